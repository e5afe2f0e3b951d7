//! Single-channel depth maps with a validity mask.

use crate::error::{shape_err, Error, Result};

/// H×W depths (meters, or transformed units) in row-major order. Invalid
/// pixels (sensor holes) carry value 0 and are excluded from losses and
/// metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Marks every positive finite value valid.
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let valid = values.iter().map(|&v| v.is_finite() && v > 0.0).collect();
        DepthMap::with_mask(height, width, values, valid)
    }

    pub fn with_mask(height: usize, width: usize, mut values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(shape_err!("depth map extent {height}x{width}"));
        }
        if values.len() != height * width || valid.len() != values.len() {
            return Err(shape_err!(
                "depth map {height}x{width} with {} values and {} mask entries",
                values.len(),
                valid.len()
            ));
        }
        for (v, &ok) in values.iter_mut().zip(&valid) {
            if !ok {
                *v = 0.0;
            } else if !(v.is_finite() && *v > 0.0) {
                return Err(Error::Data(format!("valid depth must be positive and finite, got {v}")));
            }
        }
        Ok(DepthMap {
            height,
            width,
            values,
            valid,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, y: usize, x: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.values[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn flip_horizontal(&self) -> DepthMap {
        let mut out = self.clone();
        for (dst, src) in out
            .values
            .chunks_mut(self.width)
            .zip(self.values.chunks(self.width))
        {
            dst.iter_mut().zip(src.iter().rev()).for_each(|(d, s)| *d = *s);
        }
        for (dst, src) in out.valid.chunks_mut(self.width).zip(self.valid.chunks(self.width)) {
            dst.iter_mut().zip(src.iter().rev()).for_each(|(d, s)| *d = *s);
        }
        out
    }

    /// 2×2 area average over valid pixels; a block with no valid pixel is
    /// invalid. Extents must be even.
    pub fn downsample2x(&self) -> Result<DepthMap> {
        if self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(shape_err!(
                "area downsampling needs even extents, got {}x{}",
                self.height,
                self.width
            ));
        }
        let (h, w) = (self.height / 2, self.width / 2);
        let mut values = vec![0.0; h * w];
        let mut valid = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                let mut n = 0;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    if let Some(v) = self.get(2 * y + dy, 2 * x + dx) {
                        sum += v;
                        n += 1;
                    }
                }
                if n > 0 {
                    values[y * w + x] = sum / n as f64;
                    valid[y * w + x] = true;
                }
            }
        }
        DepthMap::with_mask(h, w, values, valid)
    }

    pub(crate) fn map_valid(&self, f: impl Fn(f64) -> f64) -> DepthMap {
        let values = self
            .values
            .iter()
            .zip(&self.valid)
            .map(|(&v, &ok)| if ok { f(v) } else { 0.0 })
            .collect();
        DepthMap {
            height: self.height,
            width: self.width,
            values,
            valid: self.valid.clone(),
        }
    }
}

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use image::DynamicImage;

use super::{DepthDataset, Sample};
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Meters per raw unit of a millimeter depth raster.
pub const DEFAULT_DEPTH_SCALE: f64 = 0.001;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    /// The RGB path as written in the manifest.
    pub id: String,
    pub rgb_path: PathBuf,
    pub depth_path: PathBuf,
}

/// Ordered list of RGB/depth raster pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// Meters per raw depth unit.
    pub depth_scale: f64,
    /// Valid depths above this are clamped to it.
    pub max_depth: f64,
    pub split: String,
}

/// Reads a headerless two-column CSV `rgb_path,depth_path`; paths are
/// relative to the manifest's directory. Every referenced file must exist.
pub fn load_manifest(path: &Path, depth_scale: f64, max_depth: f64, split: &str) -> Result<Manifest> {
    if !(depth_scale > 0.0) || !(max_depth > 0.0) {
        return Err(Error::Config("depth_scale and max_depth must be positive".into()));
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| Error::Data(format!("{}: row {row_no}: {e}", path.display())))?;
        if row.len() != 2 {
            return Err(Error::Data(format!(
                "{}: row {row_no}: expected 2 columns (rgb_path,depth_path), found {}",
                path.display(),
                row.len()
            )));
        }
        let (rgb, depth) = (row[0].trim(), row[1].trim());
        if rgb.is_empty() || depth.is_empty() {
            return Err(Error::Data(format!("{}: row {row_no}: empty path", path.display())));
        }
        let rgb_path = base.join(rgb);
        let depth_path = base.join(depth);
        for (p, what) in [(&rgb_path, "rgb"), (&depth_path, "depth")] {
            if !p.is_file() {
                return Err(Error::Data(format!(
                    "{}: row {row_no}: {what} file {} not found",
                    path.display(),
                    p.display()
                )));
            }
        }
        if !ids.insert(rgb.to_owned()) {
            return Err(Error::Data(format!(
                "{}: row {row_no}: duplicate id '{rgb}'",
                path.display()
            )));
        }
        records.push(ManifestRecord {
            id: rgb.to_owned(),
            rgb_path,
            depth_path,
        });
    }
    Ok(Manifest {
        records,
        depth_scale,
        max_depth,
        split: split.to_owned(),
    })
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_owned(),
        source,
    })
}

/// 8-bit RGB scaled into `[0, 1]`.
pub(crate) fn rgb_tensor(img: &DynamicImage) -> Tensor<f32> {
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("image extents are positive")
}

pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    Ok(rgb_tensor(&open_image(path)?))
}

/// Single-channel 8- or 16-bit raster times `depth_scale`; raw 0 is a hole.
pub fn load_depth(path: &Path, depth_scale: f64, max_depth: f64) -> Result<DepthMap> {
    let img = open_image(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<f64> = match &img {
        DynamicImage::ImageLuma8(b) => b.as_raw().iter().map(|&v| v as f64).collect(),
        DynamicImage::ImageLuma16(b) => b.as_raw().iter().map(|&v| v as f64).collect(),
        other => {
            return Err(Error::Data(format!(
                "{}: depth raster must be 8- or 16-bit single channel, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let valid: Vec<bool> = raw.iter().map(|&r| r > 0.0).collect();
    let values = raw.iter().map(|&r| (r * depth_scale).min(max_depth)).collect();
    DepthMap::with_mask(h, w, values, valid)
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn load_sample(&self, index: usize) -> Result<Sample> {
        let rec = self.records.get(index).ok_or_else(|| {
            Error::Data(format!("sample index {index} out of range ({})", self.records.len()))
        })?;
        let rgb = load_rgb(&rec.rgb_path)?;
        let depth = load_depth(&rec.depth_path, self.depth_scale, self.max_depth)?;
        if rgb.shape()[1..] != [depth.height(), depth.width()] {
            return Err(Error::Data(format!(
                "{}: rgb is {}x{} but depth is {}x{}",
                rec.id,
                rgb.shape()[1],
                rgb.shape()[2],
                depth.height(),
                depth.width()
            )));
        }
        Ok(Sample {
            rgb,
            depth,
            id: rec.id.clone(),
        })
    }
}

impl DepthDataset for Manifest {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn sample(&self, index: usize) -> Result<Sample> {
        self.load_sample(index)
    }
}

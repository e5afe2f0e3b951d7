//! RMSE, SqRel and MAE over pooled valid pixels.
//!
//! `SqRel` here is the ratio of total squared error to the total squared
//! deviation of the ground truth about its own mean,
//! `sum (y - yhat)^2 / sum (y - mean(y))^2`. The more common
//! `mean((y - yhat)^2 / y)` is available as [`sq_rel_conventional`].

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::depth::DepthMap;
use crate::error::{shape_err, Error, Result};
use crate::kernels::resize;
use crate::losses::inverse_depth_transform;

/// Running sums over (ground truth, prediction) pairs. Ground-truth spread is
/// tracked with Welford/Chan updates so pooled sets never need to be held in
/// memory.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsAccumulator {
    n: usize,
    sum_sq_err: f64,
    sum_abs_err: f64,
    sum_sq_rel: f64,
    mean_y: f64,
    m2_y: f64,
}

impl MetricsAccumulator {
    pub fn push(&mut self, y: f64, yhat: f64) {
        let e = y - yhat;
        self.n += 1;
        self.sum_sq_err += e * e;
        self.sum_abs_err += e.abs();
        self.sum_sq_rel += e * e / y;
        let d = y - self.mean_y;
        self.mean_y += d / self.n as f64;
        self.m2_y += d * (y - self.mean_y);
    }

    /// Combines two disjoint partial sums.
    pub fn merge(&mut self, other: &MetricsAccumulator) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let d = other.mean_y - self.mean_y;
        self.mean_y += d * other.n as f64 / n as f64;
        self.m2_y += other.m2_y + d * d * (self.n as f64 * other.n as f64) / n as f64;
        self.sum_sq_err += other.sum_sq_err;
        self.sum_abs_err += other.sum_abs_err;
        self.sum_sq_rel += other.sum_sq_rel;
        self.n = n;
    }

    pub fn count(&self) -> usize {
        self.n
    }

    fn nonempty(&self) -> Result<f64> {
        if self.n == 0 {
            return Err(Error::Degenerate("no valid pixels to evaluate".into()));
        }
        Ok(self.n as f64)
    }

    pub fn rmse(&self) -> Result<f64> {
        Ok((self.sum_sq_err / self.nonempty()?).sqrt())
    }

    pub fn mae(&self) -> Result<f64> {
        Ok(self.sum_abs_err / self.nonempty()?)
    }

    pub fn sq_rel(&self) -> Result<f64> {
        self.nonempty()?;
        if self.m2_y <= 0.0 {
            return Err(Error::Degenerate(
                "SqRel undefined: ground truth is constant (zero deviation about its mean)".into(),
            ));
        }
        Ok(self.sum_sq_err / self.m2_y)
    }

    pub fn sq_rel_conventional(&self) -> Result<f64> {
        Ok(self.sum_sq_rel / self.nonempty()?)
    }
}

fn accumulate(y: &[f64], yhat: &[f64]) -> Result<MetricsAccumulator> {
    if y.len() != yhat.len() {
        return Err(shape_err!("{} ground-truth values vs {} predictions", y.len(), yhat.len()));
    }
    let mut acc = MetricsAccumulator::default();
    for (&a, &b) in y.iter().zip(yhat) {
        acc.push(a, b);
    }
    Ok(acc)
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    accumulate(y, yhat)?.rmse()
}

pub fn sq_rel(y: &[f64], yhat: &[f64]) -> Result<f64> {
    accumulate(y, yhat)?.sq_rel()
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    accumulate(y, yhat)?.mae()
}

pub fn sq_rel_conventional(y: &[f64], yhat: &[f64]) -> Result<f64> {
    accumulate(y, yhat)?.sq_rel_conventional()
}

/// Accumulates the pixels valid in both maps.
pub fn accumulate_maps(gt: &DepthMap, pred: &DepthMap) -> Result<MetricsAccumulator> {
    if (gt.height(), gt.width()) != (pred.height(), pred.width()) {
        return Err(shape_err!(
            "ground truth {}x{} vs prediction {}x{}",
            gt.height(),
            gt.width(),
            pred.height(),
            pred.width()
        ));
    }
    let mut acc = MetricsAccumulator::default();
    for i in 0..gt.values().len() {
        if gt.valid()[i] && pred.valid()[i] {
            acc.push(gt.values()[i], pred.values()[i]);
        }
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    /// `None` when the pooled ground truth is constant.
    pub sq_rel: Option<f64>,
    pub mae: f64,
    pub n_pixels: usize,
    pub n_images: usize,
}

impl MetricsReport {
    pub fn from_accumulator(acc: &MetricsAccumulator, n_images: usize) -> Result<Self> {
        Ok(MetricsReport {
            rmse: acc.rmse()?,
            sq_rel: acc.sq_rel().ok(),
            mae: acc.mae()?,
            n_pixels: acc.count(),
            n_images,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table with columns Model, RMSE, Sq Rel, MAE.
    pub fn to_table(&self, model: &str) -> String {
        let sq = self
            .sq_rel
            .map_or_else(|| "degenerate".to_owned(), |v| format!("{v:.6}"));
        let mut s = String::new();
        let w = model.len().max(10);
        let _ = writeln!(s, "{:<w$} {:>12} {:>12} {:>12}", "Model", "RMSE", "Sq Rel", "MAE");
        let _ = writeln!(s, "{:<w$} {:>12.6} {:>12} {:>12.6}", model, self.rmse, sq, self.mae);
        let _ = writeln!(s, "({} pixels over {} images)", self.n_pixels, self.n_images);
        s
    }
}

/// How network outputs are brought to ground-truth units and resolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResolutionPolicy {
    /// Predictions are bilinearly resized to the ground-truth extent when
    /// they differ.
    pub resize: bool,
    /// `(max_depth, min_depth)` when predictions are in reciprocal units and
    /// must be mapped back to meters.
    pub inverse_transform: Option<(f64, f64)>,
}

impl ResolutionPolicy {
    /// Predictions already in meters at ground-truth resolution.
    pub fn identity() -> Self {
        ResolutionPolicy {
            resize: false,
            inverse_transform: None,
        }
    }
}

/// Brings a prediction to the ground truth's resolution and units.
pub fn align_prediction(pred: &DepthMap, gt: &DepthMap, policy: &ResolutionPolicy) -> Result<DepthMap> {
    let mut p = pred.clone();
    if (p.height(), p.width()) != (gt.height(), gt.width()) {
        if !policy.resize {
            return Err(shape_err!(
                "prediction {}x{} does not match ground truth {}x{}",
                p.height(),
                p.width(),
                gt.height(),
                gt.width()
            ));
        }
        let values = resize::bilinear_forward(p.values(), 1, (p.height(), p.width()), (gt.height(), gt.width()));
        p = DepthMap::new(gt.height(), gt.width(), values)?;
    }
    if let Some((max_depth, min_depth)) = policy.inverse_transform {
        p = inverse_depth_transform(&p, max_depth, min_depth)?;
    }
    Ok(p)
}

/// Pooled-pixel metrics over an aligned evaluation set.
pub fn evaluate(predictions: &[DepthMap], ground_truths: &[DepthMap], policy: &ResolutionPolicy) -> Result<MetricsReport> {
    if predictions.len() != ground_truths.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} ground-truth maps",
            predictions.len(),
            ground_truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let mut acc = MetricsAccumulator::default();
    for (p, g) in predictions.iter().zip(ground_truths) {
        let aligned = align_prediction(p, g, policy)?;
        acc.merge(&accumulate_maps(g, &aligned)?);
    }
    MetricsReport::from_accumulator(&acc, predictions.len())
}

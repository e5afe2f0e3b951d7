//! Composite depth loss `lambda * L1 + L1_grad + L_SSIM` and the reciprocal
//! depth transform applied to targets before training.
//!
//! All terms are built on a [`Tape`] so they differentiate end to end. Each
//! term reduces as the mean over samples of a per-sample mean over valid
//! positions; without a mask that is the plain mean over all elements.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::depth::DepthMap;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight on the L1 term.
    pub lambda: f64,
    /// Side of the uniform SSIM window; odd, at least 3.
    pub ssim_window: usize,
    /// Overrides `(0.01 * dynamic_range)^2`.
    pub ssim_c1: Option<f64>,
    /// Overrides `(0.03 * dynamic_range)^2`.
    pub ssim_c2: Option<f64>,
    /// Dynamic range of transformed depth used for the SSIM constants.
    pub dynamic_range: f64,
    /// Maximum depth `m` in meters.
    pub max_depth: f64,
    /// Depths are clamped to at least this many meters before the transform.
    pub min_depth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.1,
            ssim_window: 7,
            ssim_c1: None,
            ssim_c2: None,
            dynamic_range: 10.0,
            max_depth: 10.0,
            min_depth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("loss: {m}")));
        if !(self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        if self.ssim_window < 3 || self.ssim_window % 2 == 0 {
            return bad("ssim_window must be odd and >= 3");
        }
        if !(self.dynamic_range > 0.0) {
            return bad("dynamic_range must be positive");
        }
        if self.ssim_c1.is_some_and(|c| !(c > 0.0)) || self.ssim_c2.is_some_and(|c| !(c > 0.0)) {
            return bad("SSIM constants must be positive");
        }
        if !(self.min_depth > 0.0 && self.max_depth >= self.min_depth) {
            return bad("need 0 < min_depth <= max_depth");
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        self.ssim_c1.unwrap_or((0.01 * self.dynamic_range).powi(2))
    }

    pub fn c2(&self) -> f64 {
        self.ssim_c2.unwrap_or((0.03 * self.dynamic_range).powi(2))
    }
}

/// Per-term values of one composite loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l1_grad: f64,
    pub l_ssim: f64,
    pub total: f64,
}

/// `lambda * l1 + l1_grad + l_ssim`, accumulated left to right. The tape
/// evaluates the total in this same order.
pub fn combine_terms<T: Scalar>(lambda: T, l1: T, l1_grad: T, l_ssim: T) -> T {
    lambda * l1 + l1_grad + l_ssim
}

pub struct CompositeLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

fn check_pair<T: Scalar>(tape: &Tape<T>, y: Var, yhat: Var, mask: Option<&Tensor<T>>) -> Result<(usize, usize, usize, usize)> {
    if tape.shape(y) != tape.shape(yhat) {
        return Err(shape_err!(
            "loss inputs differ in shape: {:?} vs {:?}",
            tape.shape(y),
            tape.shape(yhat)
        ));
    }
    if let Some(m) = mask {
        if m.shape() != tape.shape(y) {
            return Err(shape_err!("mask shape {:?} vs input {:?}", m.shape(), tape.shape(y)));
        }
    }
    tape.value(y).dims4()
}

/// Reduction weights giving each sample equal total weight, spread evenly over
/// its valid positions. `valid` is laid out `[N, plane]`.
fn per_sample_weights<T: Scalar>(valid: &[bool], batch: usize) -> Result<Vec<T>> {
    let plane = valid.len() / batch;
    let counts: Vec<usize> = valid
        .chunks(plane)
        .map(|s| s.iter().filter(|&&v| v).count())
        .collect();
    let active = counts.iter().filter(|&&c| c > 0).count();
    if active == 0 {
        return Err(Error::Degenerate("no valid positions for the loss".into()));
    }
    let mut w = Vec::with_capacity(valid.len());
    for (s, &count) in valid.chunks(plane).zip(&counts) {
        let wi = if count > 0 {
            T::one() / T::from_f64((active * count) as f64)
        } else {
            T::zero()
        };
        w.extend(s.iter().map(|&v| if v { wi } else { T::zero() }));
    }
    Ok(w)
}

fn mask_bits<T: Scalar>(mask: Option<&Tensor<T>>, len: usize) -> Vec<bool> {
    match mask {
        Some(m) => m.data().iter().map(|&v| v > T::zero()).collect(),
        None => vec![true; len],
    }
}

/// Mean absolute difference over valid positions.
pub fn l1_loss<T: Scalar>(tape: &mut Tape<T>, y: Var, yhat: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
    let (n, ..) = check_pair(tape, y, yhat, mask)?;
    let valid = mask_bits(mask, tape.value(y).numel());
    let w = per_sample_weights(&valid, n)?;
    let d = tape.sub(y, yhat)?;
    let a = tape.abs(d)?;
    tape.weighted_sum(a, w)
}

/// L1 distance between forward-difference image gradients along width and
/// height; a difference is valid when both of its pixels are.
pub fn grad_loss<T: Scalar>(tape: &mut Tape<T>, y: Var, yhat: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
    let (n, c, h, w) = check_pair(tape, y, yhat, mask)?;
    if h < 2 || w < 2 {
        return Err(shape_err!("gradient loss needs at least 2x2 maps, got {h}x{w}"));
    }
    let valid = mask_bits(mask, tape.value(y).numel());
    let mut valid_x = Vec::with_capacity(n * c * h * (w - 1));
    for row in valid.chunks(w) {
        valid_x.extend(row.windows(2).map(|p| p[0] && p[1]));
    }
    let mut valid_y = Vec::with_capacity(n * c * (h - 1) * w);
    for plane in valid.chunks(h * w) {
        for i in 0..h - 1 {
            valid_y.extend((0..w).map(|j| plane[i * w + j] && plane[(i + 1) * w + j]));
        }
    }

    let gx_y = tape.diff_w(y)?;
    let gx_p = tape.diff_w(yhat)?;
    let dx = tape.sub(gx_y, gx_p)?;
    let ax = tape.abs(dx)?;
    let term_x = tape.weighted_sum(ax, per_sample_weights(&valid_x, n)?)?;

    let gy_y = tape.diff_h(y)?;
    let gy_p = tape.diff_h(yhat)?;
    let dy = tape.sub(gy_y, gy_p)?;
    let ay = tape.abs(dy)?;
    let term_y = tape.weighted_sum(ay, per_sample_weights(&valid_y, n)?)?;

    tape.add(term_x, term_y)
}

/// Per-window SSIM map and the averaging weights over fully valid windows.
fn ssim_map<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    y: Var,
    cfg: &LossConfig,
    mask: Option<&Tensor<T>>,
) -> Result<(Var, Vec<T>)> {
    let (n, c, h, w) = check_pair(tape, x, y, mask)?;
    let k = cfg.ssim_window;
    if h < k || w < k {
        return Err(shape_err!("SSIM window {k} larger than {h}x{w} image"));
    }
    let (oh, ow) = (h - k + 1, w - k + 1);
    let valid = mask_bits(mask, tape.value(x).numel());
    let window_valid: Vec<bool> = match mask {
        None => vec![true; n * c * oh * ow],
        Some(_) => {
            let mut out = Vec::with_capacity(n * c * oh * ow);
            for plane in valid.chunks(h * w) {
                for i in 0..oh {
                    for j in 0..ow {
                        out.push((i..i + k).all(|a| (j..j + k).all(|b| plane[a * w + b])));
                    }
                }
            }
            out
        }
    };
    let weights = per_sample_weights(&window_valid, n)?;
    let c1 = T::from_f64(cfg.c1());
    let c2 = T::from_f64(cfg.c2());
    let two = T::from_f64(2.0);

    let mu_x = tape.avg_pool2d(x, k, 1, 0)?;
    let mu_y = tape.avg_pool2d(y, k, 1, 0)?;
    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let xy = tape.mul(x, y)?;
    let e_xx = tape.avg_pool2d(xx, k, 1, 0)?;
    let e_yy = tape.avg_pool2d(yy, k, 1, 0)?;
    let e_xy = tape.avg_pool2d(xy, k, 1, 0)?;

    let mu_xx = tape.mul(mu_x, mu_x)?;
    let mu_yy = tape.mul(mu_y, mu_y)?;
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let var_x = tape.sub(e_xx, mu_xx)?;
    let var_y = tape.sub(e_yy, mu_yy)?;
    let cov = tape.sub(e_xy, mu_xy)?;

    let lum_num = tape.scale(mu_xy, two)?;
    let lum_num = tape.offset(lum_num, c1)?;
    let cs_num = tape.scale(cov, two)?;
    let cs_num = tape.offset(cs_num, c2)?;
    let lum_den = tape.add(mu_xx, mu_yy)?;
    let lum_den = tape.offset(lum_den, c1)?;
    let cs_den = tape.add(var_x, var_y)?;
    let cs_den = tape.offset(cs_den, c2)?;

    let num = tape.mul(lum_num, cs_num)?;
    let den = tape.mul(lum_den, cs_den)?;
    let map = tape.div(num, den)?;
    Ok((map, weights))
}

/// Mean SSIM over every fully valid `window × window` position (no padding).
pub fn ssim<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var, cfg: &LossConfig, mask: Option<&Tensor<T>>) -> Result<Var> {
    let (map, weights) = ssim_map(tape, x, y, cfg, mask)?;
    tape.weighted_sum(map, weights)
}

/// `(1 - SSIM) / 2`, taken per window before averaging so identical inputs
/// give exactly zero.
pub fn ssim_loss<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var, cfg: &LossConfig, mask: Option<&Tensor<T>>) -> Result<Var> {
    let (map, weights) = ssim_map(tape, x, y, cfg, mask)?;
    let neg = tape.scale(map, T::from_f64(-0.5))?;
    let per_window = tape.offset(neg, T::from_f64(0.5))?;
    tape.weighted_sum(per_window, weights)
}

/// Full training objective on targets and predictions that are both already
/// in transformed-depth units.
pub fn composite_loss<T: Scalar>(
    tape: &mut Tape<T>,
    y: Var,
    yhat: Var,
    mask: Option<&Tensor<T>>,
    cfg: &LossConfig,
) -> Result<CompositeLoss> {
    cfg.validate()?;
    let l1 = l1_loss(tape, y, yhat, mask)?;
    let l1_grad = grad_loss(tape, y, yhat, mask)?;
    let l_ssim = ssim_loss(tape, y, yhat, cfg, mask)?;
    let weighted = tape.scale(l1, T::from_f64(cfg.lambda))?;
    let partial = tape.add(weighted, l1_grad)?;
    let total = tape.add(partial, l_ssim)?;
    let breakdown = LossBreakdown {
        l1: tape.item(l1)?.to_f64(),
        l1_grad: tape.item(l1_grad)?.to_f64(),
        l_ssim: tape.item(l_ssim)?.to_f64(),
        total: tape.item(total)?.to_f64(),
    };
    Ok(CompositeLoss { total, breakdown })
}

/// SSIM of two `[N, 1, H, W]` tensors without gradient tracking.
pub fn ssim_value<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<T> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let s = ssim(&mut tape, xv, yv, cfg, None)?;
    tape.item(s)
}

/// Composite loss breakdown of two tensors without gradient tracking.
pub fn composite_value<T: Scalar>(y: &Tensor<T>, yhat: &Tensor<T>, cfg: &LossConfig) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let yv = tape.constant(y.clone());
    let pv = tape.constant(yhat.clone());
    Ok(composite_loss(&mut tape, yv, pv, None, cfg)?.breakdown)
}

/// Clamps valid depths to `[min_depth, max_depth]` and maps them to
/// `max_depth / d`, so outputs lie in `[1, max_depth / min_depth]`. Invalid
/// pixels stay invalid and are never divided.
pub fn depth_transform(depth: &DepthMap, max_depth: f64, min_depth: f64) -> Result<DepthMap> {
    if !(max_depth > 0.0) || !(min_depth > 0.0) || min_depth > max_depth {
        return Err(Error::Config(format!(
            "depth transform needs 0 < min_depth <= max_depth, got {min_depth}, {max_depth}"
        )));
    }
    Ok(depth.map_valid(|d| max_depth / d.clamp(min_depth, max_depth)))
}

/// Maps transformed values back to meters: `max_depth / t`, with `t` first
/// clamped to the transform's output range `[1, max_depth / min_depth]`.
pub fn inverse_depth_transform(transformed: &DepthMap, max_depth: f64, min_depth: f64) -> Result<DepthMap> {
    if !(max_depth > 0.0) || !(min_depth > 0.0) || min_depth > max_depth {
        return Err(Error::Config(format!(
            "depth transform needs 0 < min_depth <= max_depth, got {min_depth}, {max_depth}"
        )));
    }
    let hi = max_depth / min_depth;
    Ok(transformed.map_valid(|t| max_depth / t.clamp(1.0, hi)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, 1, h, w], data.to_vec()).unwrap()
    }

    fn eval2(f: impl Fn(&mut Tape<f64>, Var, Var) -> Result<Var>, y: &Tensor<f64>, p: &Tensor<f64>) -> f64 {
        let mut tape = Tape::new();
        let a = tape.constant(y.clone());
        let b = tape.constant(p.clone());
        let out = f(&mut tape, a, b).unwrap();
        tape.item(out).unwrap()
    }

    #[test]
    fn transform_examples() {
        let d = DepthMap::new(1, 3, vec![5.0, 10.0, 1.0]).unwrap();
        let t = depth_transform(&d, 10.0, 1.0).unwrap();
        assert_eq!(t.values(), &[2.0, 1.0, 10.0]);
        let clamped = DepthMap::new(1, 2, vec![0.5, 20.0]).unwrap();
        assert_eq!(depth_transform(&clamped, 10.0, 1.0).unwrap().values(), &[10.0, 1.0]);
    }

    #[test]
    fn transform_skips_invalid() {
        let d = DepthMap::new(1, 2, vec![0.0, 4.0]).unwrap();
        let t = depth_transform(&d, 10.0, 1.0).unwrap();
        assert_eq!(t.valid(), &[false, true]);
        assert_eq!(t.values(), &[0.0, 2.5]);
    }

    #[test]
    fn l1_examples() {
        let y = Tensor::new(vec![1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = Tensor::new(vec![1, 1, 1, 3], vec![2.0, 2.0, 5.0]).unwrap();
        let l = |t: &mut Tape<f64>, a, b| l1_loss(t, a, b, None);
        assert_eq!(eval2(l, &y, &p), 1.0);
        assert_eq!(eval2(l, &y, &y), 0.0);
    }

    #[test]
    fn l1_respects_mask() {
        let y = Tensor::new(vec![1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = Tensor::new(vec![1, 1, 1, 3], vec![2.0, 2.0, 5.0]).unwrap();
        let m = Tensor::new(vec![1, 1, 1, 3], vec![1.0, 1.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(y);
        let b = tape.constant(p);
        let l = l1_loss(&mut tape, a, b, Some(&m)).unwrap();
        assert_eq!(tape.item(l).unwrap(), 0.5);
    }

    #[test]
    fn grad_loss_examples() {
        let y = img(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        let p = img(2, 2, &[0.0; 4]);
        let g = |t: &mut Tape<f64>, a, b| grad_loss(t, a, b, None);
        assert_eq!(eval2(g, &y, &p), 1.0);
        let c1 = img(2, 2, &[3.0; 4]);
        let c2 = img(2, 2, &[-7.5; 4]);
        assert_eq!(eval2(g, &c1, &c2), 0.0);
    }

    #[test]
    fn grad_loss_rejects_single_row() {
        let y = img(1, 4, &[0.0; 4]);
        let mut tape = Tape::new();
        let a = tape.constant(y.clone());
        let b = tape.constant(y);
        assert!(matches!(grad_loss(&mut tape, a, b, None), Err(Error::Shape(_))));
    }

    #[test]
    fn ssim_constant_images() {
        let cfg = LossConfig::default();
        assert_eq!(cfg.c1(), 0.010000000000000002);
        let x = Tensor::<f64>::zeros(vec![1, 1, 8, 8]).unwrap();
        let y = Tensor::ones(vec![1, 1, 8, 8]).unwrap();
        let s = ssim_value(&x, &y, &cfg).unwrap();
        assert!((s - 0.01 / 1.01).abs() < 1e-12, "{s}");
        let loss = (1.0 - s) / 2.0;
        assert!((loss - 0.495049504950495).abs() < 1e-9);
    }

    #[test]
    fn ssim_identical_is_one() {
        let cfg = LossConfig::default();
        let x = Tensor::from_fn(vec![2, 1, 9, 11], |i| ((i * 37) % 17) as f64 * 0.3).unwrap();
        assert!((ssim_value(&x, &x, &cfg).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_window_too_large() {
        let cfg = LossConfig::default();
        let x = Tensor::<f64>::zeros(vec![1, 1, 6, 10]).unwrap();
        assert!(matches!(ssim_value(&x, &x, &cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn combine_terms_example() {
        assert!((combine_terms(0.1, 1.0, 1.0, 0.5) - 1.6f64).abs() < 1e-15);
    }

    #[test]
    fn composite_of_equal_inputs_is_zero() {
        let y = Tensor::from_fn(vec![2, 1, 8, 8], |i| 1.0 + (i % 7) as f64).unwrap();
        let b = composite_value(&y, &y, &LossConfig::default()).unwrap();
        assert_eq!(b.total, 0.0);
        assert_eq!((b.l1, b.l1_grad, b.l_ssim), (0.0, 0.0, 0.0));
    }

    #[test]
    fn config_validation() {
        let mut cfg = LossConfig::default();
        cfg.ssim_window = 4;
        assert!(cfg.validate().is_err());
        cfg.ssim_window = 7;
        cfg.lambda = -1.0;
        assert!(cfg.validate().is_err());
    }
}

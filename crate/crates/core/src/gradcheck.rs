//! Central finite-difference verification of every differentiable tape op,
//! the loss terms and the composite loss through the toy network (64-bit).

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{BatchNormParams, Mode, RunningStats, Tape, Var};
use crate::error::Result;
use crate::losses::{composite_loss, grad_loss, l1_loss, ssim, ssim_loss, LossConfig};
use crate::network::{Network, NetworkConfig};
use crate::tensor::Tensor;

/// Every entry of the suite, in report order.
pub const OPS: &[&str] = &[
    "conv2d",
    "relu",
    "softplus",
    "batch_norm",
    "avg_pool2d",
    "max_pool2d",
    "resize_bilinear",
    "upsample2x",
    "concat_channels",
    "concat_all",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "offset",
    "square",
    "abs",
    "diff_w",
    "diff_h",
    "sum",
    "mean",
    "weighted_sum",
    "l1_loss",
    "grad_loss",
    "ssim",
    "ssim_loss",
    "composite_loss",
    "toy_network_composite_loss",
];

/// Gradients smaller than this are compared absolutely.
pub const SMALL_GRAD: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub instances: usize,
    pub tolerance: f64,
    /// Parameter coordinates sampled per toy-network instance.
    pub network_coords: usize,
    /// Test hook: perturbs the analytic gradient of the named op.
    pub corrupt: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            instances: 100,
            tolerance: 1e-4,
            network_coords: 16,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct OpReport {
    pub op: String,
    pub instances: usize,
    pub checked: usize,
    /// Coordinates whose finite-difference stencil crossed a kink.
    pub skipped: usize,
    pub max_rel_err: f64,
    /// Largest absolute error among small-gradient coordinates.
    pub max_small_abs_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub ops: Vec<OpReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(|o| o.passed)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.ops.iter().filter(|o| !o.passed).map(|o| o.op.as_str()).collect()
    }

    pub fn get(&self, op: &str) -> Option<&OpReport> {
        self.ops.iter().find(|o| o.op == op)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<28} {:>9} {:>8} {:>8} {:>12}  status\n",
            "op", "instances", "checked", "skipped", "max_rel_err"
        );
        for o in &self.ops {
            let _ = writeln!(
                s,
                "{:<28} {:>9} {:>8} {:>8} {:>12.3e}  {}",
                o.op,
                o.instances,
                o.checked,
                o.skipped,
                o.max_rel_err,
                if o.passed { "PASS" } else { "FAIL" }
            );
        }
        s
    }
}

type Objective<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync + 'a;

/// Which coordinates of each input to probe; `None` checks all of them.
type Coords = Vec<Option<Vec<usize>>>;

struct Checker {
    tolerance: f64,
    corrupt: bool,
    report: OpReport,
}

impl Checker {
    fn new(op: &str, cfg: &GradcheckConfig) -> Self {
        Checker {
            tolerance: cfg.tolerance,
            corrupt: cfg.corrupt.as_deref() == Some(op),
            report: OpReport {
                op: op.to_owned(),
                ..Default::default()
            },
        }
    }

    /// Scalarizes `f` with a fixed random projection, then compares the
    /// analytic gradient of every probed coordinate with a central
    /// difference of step `1e-4 * max(1, |x|)`.
    fn check(&mut self, rng: &mut ChaCha8Rng, f: &Objective, inputs: &[Tensor<f64>], coords: Coords) -> Result<()> {
        let weights = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let out = f(&mut tape, &vars)?;
            let n = tape.value(out).numel();
            (n > 1).then(|| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>())
        };
        let eval = |xs: &[Tensor<f64>], grad: bool| -> Result<(Tape<f64>, Vec<Var>, Var)> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs
                .iter()
                .map(|t| tape.leaf(t.clone().with_requires_grad(grad)))
                .collect();
            let mut out = f(&mut tape, &vars)?;
            if let Some(w) = &weights {
                out = tape.weighted_sum(out, w.clone())?;
            }
            Ok((tape, vars, out))
        };

        let (tape, vars, out) = eval(inputs, true)?;
        let sig = tape.kink_signature();
        let grads = tape.backward(out)?;
        let probes: Vec<(usize, usize)> = coords
            .into_iter()
            .enumerate()
            .flat_map(|(i, sel)| {
                let sel = sel.unwrap_or_else(|| (0..inputs[i].numel()).collect());
                sel.into_iter().map(move |j| (i, j))
            })
            .collect();
        // Each probe is independent; results are recorded in probe order.
        let numeric: Vec<Option<f64>> = probes
            .par_iter()
            .map(|&(i, j)| {
                let mut xs = inputs.to_vec();
                let theta = inputs[i].data()[j];
                let h = 1e-4 * theta.abs().max(1.0);
                let (xp, xm) = (theta + h, theta - h);
                xs[i].data_mut()[j] = xp;
                let (tp, _, op) = eval(&xs, false)?;
                xs[i].data_mut()[j] = xm;
                let (tm, _, om) = eval(&xs, false)?;
                if tp.kink_signature() != sig || tm.kink_signature() != sig {
                    return Ok(None);
                }
                Ok(Some((tp.item(op)? - tm.item(om)?) / (xp - xm)))
            })
            .collect::<Result<_>>()?;
        for (&(i, j), n) in probes.iter().zip(numeric) {
            let Some(n) = n else {
                self.report.skipped += 1;
                continue;
            };
            let mut a = grads.get(vars[i]).map_or(0.0, |g| g[j]);
            if self.corrupt {
                a = a * 1.01 + 1e-3;
            }
            self.record(a, n);
        }
        self.report.instances += 1;
        Ok(())
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let r = &mut self.report;
        r.checked += 1;
        let scale = analytic.abs().max(numeric.abs());
        let diff = (analytic - numeric).abs();
        if scale < SMALL_GRAD {
            r.max_small_abs_err = r.max_small_abs_err.max(diff);
        } else {
            r.max_rel_err = r.max_rel_err.max(diff / scale);
        }
    }

    fn finish(mut self) -> OpReport {
        let r = &mut self.report;
        r.passed = r.checked > 0 && r.max_rel_err <= self.tolerance && r.max_small_abs_err <= SMALL_GRAD;
        self.report
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

fn random_nchw(rng: &mut ChaCha8Rng, max_c: usize, lo: usize, hi: usize) -> Vec<usize> {
    vec![
        rng.random_range(1..=2),
        rng.random_range(1..=max_c),
        rng.random_range(lo..=hi),
        rng.random_range(lo..=hi),
    ]
}

fn all(n: usize) -> Coords {
    vec![None; n]
}

fn op_rng(seed: u64, op: &str) -> ChaCha8Rng {
    let tag = op.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    ChaCha8Rng::seed_from_u64(seed ^ tag)
}

/// All-valid mask with one hole in a random corner of each sample, small
/// enough that some 7x7 window stays fully valid.
fn random_mask(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let max_hole = h.min(w).saturating_sub(7).clamp(1, 2);
    let mut m = Tensor::full(shape.to_vec(), 1.0).expect("positive extents");
    for s in 0..n {
        let (hh, hw) = (rng.random_range(1..=max_hole), rng.random_range(1..=max_hole));
        let y0 = if rng.random_bool(0.5) { 0 } else { h - hh };
        let x0 = if rng.random_bool(0.5) { 0 } else { w - hw };
        for y in y0..y0 + hh {
            for x in x0..x0 + hw {
                m.data_mut()[(s * h + y) * w + x] = 0.0;
            }
        }
    }
    m
}

/// Runs one entry of [`OPS`].
pub fn check_op(op: &str, cfg: &GradcheckConfig) -> Result<OpReport> {
    let mut rng = op_rng(cfg.seed, op);
    let mut c = Checker::new(op, cfg);
    let loss_cfg = LossConfig::default();
    for inst in 0..cfg.instances {
        let r = &mut rng;
        match op {
            "conv2d" => {
                let mut s = random_nchw(r, 3, 3, 6);
                let k = if r.random_bool(0.5) { 3 } else { 1 };
                s[2] = s[2].max(k);
                s[3] = s[3].max(k);
                let cout = r.random_range(1..=3);
                let stride = r.random_range(1..=2);
                let padding = r.random_range(0..=k / 2);
                let mut inputs = vec![normal(r, &s, 1.0), normal(r, &[cout, s[1], k, k], 0.5)];
                let bias = r.random_bool(0.5);
                if bias {
                    inputs.push(normal(r, &[cout], 0.5));
                }
                let f = move |t: &mut Tape<f64>, v: &[Var]| t.conv2d(v[0], v[1], v.get(2).copied(), stride, padding);
                c.check(r, &f, &inputs, all(inputs.len()))?;
            }
            "relu" | "softplus" | "square" | "abs" | "sum" | "mean" => {
                let s = random_nchw(r, 3, 1, 4);
                let x = normal(r, &s, 2.0);
                let f = |t: &mut Tape<f64>, v: &[Var]| match op {
                    "relu" => t.relu(v[0]),
                    "softplus" => t.softplus(v[0]),
                    "square" => t.square(v[0]),
                    "abs" => t.abs(v[0]),
                    "sum" => t.sum(v[0]),
                    _ => t.mean(v[0]),
                };
                c.check(r, &f, &[x], all(1))?;
            }
            "scale" | "offset" => {
                let s = random_nchw(r, 3, 1, 4);
                let x = normal(r, &s, 1.0);
                let k: f64 = r.random_range(-3.0..3.0);
                let f = move |t: &mut Tape<f64>, v: &[Var]| {
                    if op == "scale" {
                        t.scale(v[0], k)
                    } else {
                        t.offset(v[0], k)
                    }
                };
                c.check(r, &f, &[x], all(1))?;
            }
            "weighted_sum" => {
                let s = random_nchw(r, 3, 1, 4);
                let x = normal(r, &s, 1.0);
                let w: Vec<f64> = (0..x.numel()).map(|_| r.random_range(-2.0..2.0)).collect();
                let f = move |t: &mut Tape<f64>, v: &[Var]| t.weighted_sum(v[0], w.clone());
                c.check(r, &f, &[x], all(1))?;
            }
            "add" | "sub" | "mul" | "div" => {
                let s = random_nchw(r, 3, 1, 4);
                let a = normal(r, &s, 1.0);
                let mut b = normal(r, &s, 1.0);
                if op == "div" {
                    for v in b.data_mut() {
                        *v = v.signum() * (0.5 + v.abs());
                    }
                }
                let f = |t: &mut Tape<f64>, v: &[Var]| match op {
                    "add" => t.add(v[0], v[1]),
                    "sub" => t.sub(v[0], v[1]),
                    "mul" => t.mul(v[0], v[1]),
                    _ => t.div(v[0], v[1]),
                };
                c.check(r, &f, &[a, b], all(2))?;
            }
            "diff_w" | "diff_h" => {
                let s = random_nchw(r, 2, 2, 5);
                let x = normal(r, &s, 1.0);
                let f = |t: &mut Tape<f64>, v: &[Var]| {
                    if op == "diff_w" {
                        t.diff_w(v[0])
                    } else {
                        t.diff_h(v[0])
                    }
                };
                c.check(r, &f, &[x], all(1))?;
            }
            "batch_norm" => {
                let s = random_nchw(r, 3, 2, 4);
                let ch = s[1];
                let inputs = vec![
                    normal(r, &s, 1.5),
                    uniform(r, &[ch], 0.5, 1.5),
                    normal(r, &[ch], 0.5),
                ];
                let mode = if inst % 2 == 0 { Mode::Train } else { Mode::Eval };
                let mean = normal(r, &[ch], 0.5).into_data();
                let var = uniform(r, &[ch], 0.5, 2.0).into_data();
                let f = move |t: &mut Tape<f64>, v: &[Var]| {
                    let mut stats = RunningStats::from_parts(mean.clone(), var.clone());
                    let p = BatchNormParams {
                        mode,
                        momentum: 0.1,
                        epsilon: 1e-5,
                    };
                    t.batch_norm(v[0], v[1], v[2], &mut stats, p)
                };
                c.check(r, &f, &inputs, all(3))?;
            }
            "avg_pool2d" | "max_pool2d" => {
                let s = random_nchw(r, 2, 3, 6);
                let k = r.random_range(2..=3);
                let stride = r.random_range(1..=2);
                let pad = r.random_range(0..=(k - 1) / 2);
                let x = normal(r, &s, 1.0);
                let f = move |t: &mut Tape<f64>, v: &[Var]| {
                    if op == "avg_pool2d" {
                        t.avg_pool2d(v[0], k, stride, pad)
                    } else {
                        t.max_pool2d(v[0], k, stride, pad)
                    }
                };
                c.check(r, &f, &[x], all(1))?;
            }
            "resize_bilinear" => {
                let s = random_nchw(r, 2, 1, 5);
                let (oh, ow) = (r.random_range(1..=8), r.random_range(1..=8));
                let x = normal(r, &s, 1.0);
                let f = move |t: &mut Tape<f64>, v: &[Var]| t.resize_bilinear(v[0], oh, ow);
                c.check(r, &f, &[x], all(1))?;
            }
            "upsample2x" => {
                let s = random_nchw(r, 2, 1, 4);
                let x = normal(r, &s, 1.0);
                let f = |t: &mut Tape<f64>, v: &[Var]| t.upsample2x(v[0]);
                c.check(r, &f, &[x], all(1))?;
            }
            "concat_channels" | "concat_all" => {
                let s = random_nchw(r, 2, 1, 4);
                let parts = if op == "concat_channels" { 2 } else { r.random_range(1..=4) };
                let inputs: Vec<Tensor<f64>> = (0..parts)
                    .map(|_| {
                        let mut si = s.clone();
                        si[1] = r.random_range(1..=3);
                        normal(r, &si, 1.0)
                    })
                    .collect();
                let f = |t: &mut Tape<f64>, v: &[Var]| {
                    if op == "concat_channels" {
                        t.concat_channels(v[0], v[1])
                    } else {
                        t.concat_all(v)
                    }
                };
                c.check(r, &f, &inputs, all(parts))?;
            }
            "l1_loss" | "grad_loss" | "ssim" | "ssim_loss" | "composite_loss" => {
                let s = [r.random_range(1..=2), 1, r.random_range(8..=10), r.random_range(8..=10)];
                let y = uniform(r, &s, 1.0, 10.0);
                let yhat = uniform(r, &s, 1.0, 10.0);
                let mask = r.random_bool(0.5).then(|| random_mask(r, &s));
                let lc = loss_cfg.clone();
                let f = move |t: &mut Tape<f64>, v: &[Var]| {
                    let m = mask.as_ref();
                    match op {
                        "l1_loss" => l1_loss(t, v[0], v[1], m),
                        "grad_loss" => grad_loss(t, v[0], v[1], m),
                        "ssim" => ssim(t, v[0], v[1], &lc, m),
                        "ssim_loss" => ssim_loss(t, v[0], v[1], &lc, m),
                        _ => Ok(composite_loss(t, v[0], v[1], m, &lc)?.total),
                    }
                };
                c.check(r, &f, &[y, yhat], all(2))?;
            }
            "toy_network_composite_loss" => {
                let net = Network::<f64>::build(NetworkConfig::toy().with_seed(r.random()))?;
                check_network(&mut c, r, &net, inst, Some(cfg.network_coords), &loss_cfg)?;
            }
            other => {
                return Err(crate::Error::Usage(format!("unknown gradcheck op '{other}'")));
            }
        }
    }
    Ok(c.finish())
}

/// Composite loss of `net` on a random 2-image batch with respect to its
/// parameters. `coords` limits the check to that many random coordinates.
fn check_network(
    c: &mut Checker,
    r: &mut ChaCha8Rng,
    net: &Network<f64>,
    inst: usize,
    coords: Option<usize>,
    loss_cfg: &LossConfig,
) -> Result<()> {
    let side = 16;
    let out = net.output_extent(side);
    let image = uniform(r, &[2, 3, side, side], 0.0, 1.0);
    let target = uniform(r, &[2, 1, out, out], 1.0, 10.0);
    let mask = random_mask(r, &[2, 1, out, out]);
    let mode = if inst % 2 == 0 { Mode::Train } else { Mode::Eval };
    let inputs: Vec<Tensor<f64>> = net.params().iter().map(|p| p.tensor.clone()).collect();
    let sel: Coords = match coords {
        None => all(inputs.len()),
        Some(k) => {
            let mut sel = vec![Vec::new(); inputs.len()];
            for _ in 0..k {
                let i = r.random_range(0..inputs.len());
                sel[i].push(r.random_range(0..inputs[i].numel()));
            }
            sel.into_iter().map(Some).collect()
        }
    };
    let f = |t: &mut Tape<f64>, v: &[Var]| {
        let x = t.constant(image.clone());
        let y = t.constant(target.clone());
        let pred = net.forward_with(t, x, v, mode)?;
        Ok(composite_loss(t, y, pred, Some(&mask), loss_cfg)?.total)
    };
    c.check(r, &f, &inputs, sel)
}

/// Checks every parameter coordinate of a toy network (one instance).
pub fn check_toy_network_full(seed: u64, tolerance: f64) -> Result<OpReport> {
    let cfg = GradcheckConfig {
        seed,
        tolerance,
        ..Default::default()
    };
    let mut c = Checker::new("toy_network_composite_loss", &cfg);
    let mut r = op_rng(seed, "toy_network_full");
    let net = Network::<f64>::build(NetworkConfig::toy().with_seed(seed))?;
    check_network(&mut c, &mut r, &net, 0, None, &LossConfig::default())?;
    Ok(c.finish())
}

/// Runs the whole suite.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let ops = OPS
        .par_iter()
        .map(|op| check_op(op, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        ops,
    })
}

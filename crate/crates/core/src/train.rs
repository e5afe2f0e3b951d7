//! Adam optimization loop with checkpointing and a per-step CSV log.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{load_batch, make_batches, Batch, BatchOptions, DepthDataset};
use crate::error::{Error, Result};
use crate::losses::{composite_loss, LossBreakdown, LossConfig};
use crate::network::{CheckpointFile, Network, Param, StatsSlot, TensorRecord};
use crate::scalar::{DType, Scalar};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    /// Shuffle and augmentation seed.
    pub seed: u64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub precision: Precision,
    /// Stop after this many total steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub augment: bool,
    /// Fill the `wall_ms` log column. Off by default so logs are
    /// reproducible byte for byte.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 4,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            seed: 0,
            checkpoint_every: 0,
            precision: Precision::F32,
            max_steps: None,
            augment: true,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "train.learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("train.{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.eps_adam > 0.0) {
            return Err(Error::Config("train.eps_adam must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps_adam,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

/// First and second moments per parameter tensor, plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Param<T>]) -> Self {
        let zeros = |p: &Param<T>| vec![T::zero(); p.tensor.numel()];
        AdamState {
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step<T: Scalar>(
    params: &mut [Param<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::State(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        let n = p.tensor.numel();
        if grads[i].len() != n || state.m[i].len() != n || state.v[i].len() != n {
            return Err(Error::State(format!("adam: size mismatch for '{}'", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let bc1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let lr = T::from_f64(cfg.lr);
    let eps = T::from_f64(cfg.eps);
    let one = T::one();
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, theta) in p.tensor.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub epoch: u64,
    pub l1: f64,
    pub l1_grad: f64,
    pub l_ssim: f64,
    pub total: f64,
    pub wall_ms: u64,
}

pub const LOG_HEADER: &str = "step,epoch,l1,l1_grad,l_ssim,total,wall_ms";

fn log_writer(path: &Path, append: bool) -> Result<csv::Writer<std::fs::File>> {
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .has_headers(!append)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

/// Serializes log records as CSV text, header included.
pub fn log_csv(records: &[TrainLogRecord]) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    if records.is_empty() {
        return format!("{LOG_HEADER}\n");
    }
    for r in records {
        w.serialize(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SizeReport {
    pub param_count: usize,
    pub checkpoint_bytes: usize,
    pub megabytes: f64,
}

/// Reference figures quoted for comparison only.
pub const REFERENCE_PARAMS: &str = "8 million total parameters";
pub const REFERENCE_MODEL_MB: f64 = 144.0;

impl SizeReport {
    pub fn comparison_line(&self) -> String {
        format!(
            "{:.2}M parameters, {:.1} MB checkpoint (reference: \"{REFERENCE_PARAMS}\", {REFERENCE_MODEL_MB} MB model size)",
            self.param_count as f64 / 1e6,
            self.megabytes
        )
    }
}

pub fn size_report<T: Scalar>(net: &Network<T>) -> SizeReport {
    let bytes = net.checkpoint_bytes();
    SizeReport {
        param_count: net.param_count(),
        checkpoint_bytes: bytes,
        megabytes: bytes as f64 / (1u64 << 20) as f64,
    }
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ckpt";
pub const LOG_FILE: &str = "log.csv";

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:08}.ckpt")
}

/// Network, optimizer state and step counter of one training run.
pub struct Trainer<T> {
    net: Network<T>,
    adam: AdamState<T>,
    cfg: TrainConfig,
    loss: LossConfig,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(net: Network<T>, cfg: TrainConfig, loss: LossConfig) -> Result<Self> {
        cfg.validate()?;
        loss.validate()?;
        check_precision::<T>(&cfg)?;
        let adam = AdamState::new(net.params());
        Ok(Trainer { net, adam, cfg, loss })
    }

    /// Restores network, running statistics and optimizer state.
    pub fn resume(file: &CheckpointFile, cfg: TrainConfig, loss: LossConfig) -> Result<Self> {
        let net = Network::<T>::from_checkpoint(file, &["adam."])?;
        let mut t = Trainer::new(net, cfg, loss)?;
        let step = file
            .get("adam.step")
            .ok_or_else(|| Error::Checkpoint("missing tensor 'adam.step'".into()))?
            .to_vec::<f64>()?;
        t.adam.step = match step[..] {
            [s] if s >= 0.0 && s.fract() == 0.0 => s as u64,
            _ => return Err(Error::Checkpoint("malformed 'adam.step'".into())),
        };
        for (i, p) in t.net.params().iter().enumerate() {
            for (prefix, slot) in [("adam.m.", &mut t.adam.m[i]), ("adam.v.", &mut t.adam.v[i])] {
                let name = format!("{prefix}{}", p.name);
                let rec = file
                    .get(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
                let data = rec.to_vec::<T>()?;
                if data.len() != slot.len() {
                    return Err(Error::Checkpoint(format!("tensor '{name}' has wrong size")));
                }
                *slot = data;
            }
        }
        Ok(t)
    }

    pub fn load(path: &Path, cfg: TrainConfig, loss: LossConfig) -> Result<Self> {
        Trainer::resume(&CheckpointFile::read(path)?, cfg, loss)
    }

    pub fn to_checkpoint(&self) -> CheckpointFile {
        let mut file = self.net.to_checkpoint();
        for (i, p) in self.net.params().iter().enumerate() {
            let shape = p.tensor.shape();
            file.tensors
                .push(TensorRecord::from_slice(format!("adam.m.{}", p.name), shape, &self.adam.m[i]));
            file.tensors
                .push(TensorRecord::from_slice(format!("adam.v.{}", p.name), shape, &self.adam.v[i]));
        }
        file.tensors
            .push(TensorRecord::from_slice("adam.step", &[1], &[self.adam.step as f64; 1]));
        file
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    /// Completed update count.
    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn into_network(self) -> Network<T> {
        self.net
    }

    pub fn adam_state(&self) -> &AdamState<T> {
        &self.adam
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn batch_options(&self) -> BatchOptions {
        BatchOptions {
            seed: self.cfg.seed,
            augment: self.cfg.augment,
            output_scale: self.net.config().output_scale,
            max_depth: self.loss.max_depth,
            min_depth: self.loss.min_depth,
        }
    }

    /// Forward, loss, backward and one Adam update on `batch`. On a
    /// non-finite loss or gradient nothing is modified and
    /// [`Error::Diverged`] names the step.
    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<LossBreakdown> {
        let step = self.adam.step;
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Diverged { step },
            other => other,
        };
        let saved: Vec<StatsSlot<T>> = self.net.stats().to_vec();
        let result = (|| {
            let mut tape = Tape::new();
            let x = tape.constant(batch.rgb.clone());
            let y = tape.constant(batch.target.clone());
            let fwd = self.net.forward_train(&mut tape, x)?;
            let loss = composite_loss(&mut tape, y, fwd.output, Some(&batch.mask), &self.loss)?;
            if !loss.breakdown.total.is_finite() {
                return Err(Error::Diverged { step });
            }
            let mut grads = tape.backward(loss.total)?;
            let grads: Vec<Vec<T>> = fwd
                .params
                .iter()
                .zip(self.net.params())
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| vec![T::zero(); p.tensor.numel()]))
                .collect();
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { step });
            }
            Ok((loss.breakdown, grads))
        })()
        .map_err(diverged);
        let (breakdown, grads) = match result {
            Ok(r) => r,
            Err(e) => {
                self.net.restore_stats(saved);
                return Err(e);
            }
        };
        adam_step(self.net.params_mut(), &grads, &mut self.adam, &self.cfg.adam())?;
        Ok(breakdown)
    }

    /// Total steps the schedule allows for a dataset of `len` samples.
    pub fn planned_steps(&self, len: usize) -> u64 {
        let per_epoch = len.div_ceil(self.cfg.batch_size) as u64;
        let total = per_epoch * self.cfg.epochs;
        self.cfg.max_steps.map_or(total, |m| m.min(total))
    }

    /// Runs the remaining schedule. With `out`, appends to `log.csv`, writes
    /// periodic checkpoints and always writes `final.ckpt`; on divergence the
    /// pre-step state is written to `last_good.ckpt`.
    pub fn run<D: DepthDataset + ?Sized>(&mut self, data: &D, out: Option<&Path>) -> Result<Vec<TrainLogRecord>> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let first = data.sample(0)?;
        self.net
            .check_input(&[1, first.rgb.shape()[0], first.height(), first.width()])?;
        let per_epoch = data.len().div_ceil(self.cfg.batch_size) as u64;
        let planned = self.planned_steps(data.len());
        let opts = self.batch_options();

        let mut writer = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(LOG_FILE);
                let append = self.adam.step > 0 && path.is_file();
                Some(log_writer(&path, append)?)
            }
            None => None,
        };
        let mut log = Vec::new();
        let mut order: Option<(u64, Vec<Vec<usize>>)> = None;
        while self.adam.step < planned {
            let step = self.adam.step;
            let epoch = step / per_epoch;
            if order.as_ref().map(|(e, _)| *e) != Some(epoch) {
                order = Some((epoch, make_batches(data.len(), self.cfg.batch_size, self.cfg.seed, epoch)?));
            }
            let indices = &order.as_ref().expect("set above").1[(step % per_epoch) as usize];
            let started = Instant::now();
            let batch = load_batch::<T, D>(data, indices, epoch, &opts)?;
            let b = match self.train_step(&batch) {
                Ok(b) => b,
                Err(e @ Error::Diverged { .. }) => {
                    if let Some(dir) = out {
                        self.save(&dir.join(LAST_GOOD_CHECKPOINT))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let rec = TrainLogRecord {
                step,
                epoch,
                l1: b.l1,
                l1_grad: b.l1_grad,
                l_ssim: b.l_ssim,
                total: b.total,
                wall_ms: if self.cfg.record_wall_time {
                    started.elapsed().as_millis() as u64
                } else {
                    0
                },
            };
            if let Some(w) = writer.as_mut() {
                w.serialize(&rec).map_err(|e| Error::Data(format!("log: {e}")))?;
                w.flush().map_err(|e| Error::io(out.unwrap().join(LOG_FILE), e))?;
            }
            log.push(rec);
            let done = self.adam.step;
            if let Some(dir) = out {
                if self.cfg.checkpoint_every > 0 && done % self.cfg.checkpoint_every == 0 {
                    self.save(&dir.join(checkpoint_name(done)))?;
                }
            }
        }
        if let Some(dir) = out {
            self.save(&dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(log)
    }
}

fn check_precision<T: Scalar>(cfg: &TrainConfig) -> Result<()> {
    if cfg.precision.dtype() != T::DTYPE {
        return Err(Error::Config(format!(
            "train.precision is {:?} but the network is {:?}",
            cfg.precision,
            T::DTYPE
        )));
    }
    Ok(())
}

/// Trains `net` on `data` from scratch without writing files.
pub fn train<T: Scalar, D: DepthDataset + ?Sized>(
    net: Network<T>,
    data: &D,
    cfg: TrainConfig,
    loss: LossConfig,
) -> Result<(Network<T>, Vec<TrainLogRecord>)> {
    let mut t = Trainer::new(net, cfg, loss)?;
    let log = t.run(data, None)?;
    Ok((t.into_network(), log))
}

/// Path of the final checkpoint written by [`Trainer::run`].
pub fn final_checkpoint(dir: &Path) -> PathBuf {
    dir.join(FINAL_CHECKPOINT)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_param(v: f64) -> Vec<Param<f64>> {
        vec![Param {
            name: "theta".into(),
            tensor: Tensor::new(vec![1], vec![v]).unwrap(),
        }]
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut p = scalar_param(0.0);
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        adam_step(&mut p, &[vec![1.0]], &mut s, &cfg).unwrap();
        assert!((p[0].tensor.data()[0] + 0.1).abs() < 1e-6);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = scalar_param(0.75);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[vec![0.0]], &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p[0].tensor.data()[0], 0.75);
    }

    #[test]
    fn adam_matches_scalar_reference() {
        let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
        let gs = [0.3, -1.7];
        let mut p = scalar_param(0.5);
        let mut s = AdamState::new(&p);
        let (mut theta, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for (t, &g) in gs.iter().enumerate() {
            adam_step(&mut p, &[vec![g]], &mut s, &cfg).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            theta -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p[0].tensor.data()[0] - theta).abs() < 1e-12);
    }

    #[test]
    fn adam_rejects_mismatched_state() {
        let mut p = scalar_param(0.0);
        let mut s = AdamState::new(&p);
        assert!(adam_step(&mut p, &[vec![1.0, 2.0]], &mut s, &AdamConfig::default()).is_err());
        assert!(adam_step(&mut p, &[], &mut s, &AdamConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { beta1: 1.0, ..Default::default() },
            TrainConfig { beta2: 0.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn log_csv_layout() {
        let rec = TrainLogRecord {
            step: 0,
            epoch: 0,
            l1: 0.5,
            l1_grad: 0.25,
            l_ssim: 0.125,
            total: 0.425,
            wall_ms: 0,
        };
        assert_eq!(log_csv(&[rec]), format!("{LOG_HEADER}\n0,0,0.5,0.25,0.125,0.425,0\n"));
        assert_eq!(log_csv(&[]), format!("{LOG_HEADER}\n"));
    }
}

//! DenseNet-encoder U-Net for depth regression.
//!
//! Encoder: stem, then dense blocks separated by transition layers. Each dense
//! layer is `BN -> ReLU -> 1x1 conv (4k) -> BN -> ReLU -> 3x3 conv (k)` and its
//! output is appended to the running feature stack. A transition is
//! `BN -> ReLU -> 1x1 conv (compression) -> 2x2 avg-pool`.
//!
//! Decoder: a 1×1 bottleneck convolution on the encoder output, then per
//! stage `upsample x2 -> concat skip -> 3x3 conv -> ReLU -> 3x3 conv -> ReLU`,
//! where the skip is the first encoder feature map at the upsampled
//! resolution. A 3×3 head with softplus produces strictly positive depth.

mod checkpoint;
mod config;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use checkpoint::{CheckpointFile, TensorRecord, MAGIC, VERSION};
pub use config::{NetworkConfig, OutputScale, StemKind, PRESETS};

use crate::autodiff::{BatchNormParams, Mode, RunningStats, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Named batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsSlot<T> {
    pub name: String,
    pub stats: RunningStats<T>,
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    weight: usize,
    bias: Option<usize>,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Copy, Debug)]
struct NormLayer {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Copy, Debug)]
struct DenseLayer {
    norm1: NormLayer,
    conv1: ConvLayer,
    norm2: NormLayer,
    conv2: ConvLayer,
}

#[derive(Clone, Copy, Debug)]
struct Transition {
    norm: NormLayer,
    conv: ConvLayer,
}

#[derive(Clone, Copy, Debug)]
struct DecoderStage {
    skip_factor: usize,
    conv1: ConvLayer,
    conv2: ConvLayer,
}

#[derive(Clone, Debug)]
struct Layout {
    stem_conv: ConvLayer,
    stem_norm: NormLayer,
    stem_pool: bool,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    final_norm: NormLayer,
    bottleneck: ConvLayer,
    stages: Vec<DecoderStage>,
    head: ConvLayer,
}

/// One row of [`Network::layer_table`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRow {
    pub name: String,
    pub shape: Vec<usize>,
    pub params: usize,
}

/// Instantiated encoder-decoder with its parameters and running statistics.
#[derive(Clone, Debug)]
pub struct Network<T> {
    config: NetworkConfig,
    params: Vec<Param<T>>,
    stats: Vec<StatsSlot<T>>,
    layout: Layout,
    encoder_params: usize,
}

/// Result of a forward pass: the depth output and the tape vars holding each
/// parameter, in [`Network::params`] order.
pub struct Forward {
    pub output: Var,
    pub params: Vec<Var>,
}

struct Builder<T> {
    rng: ChaCha8Rng,
    params: Vec<Param<T>>,
    stats: Vec<StatsSlot<T>>,
}

impl<T: Scalar> Builder<T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> ConvLayer {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let rng = &mut self.rng;
        let w = Tensor::from_fn(vec![cout, cin, k, k], |_| T::from_f64(normal.sample(rng)))
            .expect("positive extents");
        let weight = self.push(format!("{name}.weight"), w);
        let bias = bias.then(|| self.push(format!("{name}.bias"), Tensor::zeros(vec![cout]).expect("cout > 0")));
        ConvLayer {
            weight,
            bias,
            stride,
            padding: k / 2,
        }
    }

    fn norm(&mut self, name: &str, channels: usize) -> NormLayer {
        let gamma = self.push(format!("{name}.gamma"), Tensor::ones(vec![channels]).expect("c > 0"));
        let beta = self.push(format!("{name}.beta"), Tensor::zeros(vec![channels]).expect("c > 0"));
        self.stats.push(StatsSlot {
            name: name.to_owned(),
            stats: RunningStats::new(channels),
        });
        NormLayer {
            gamma,
            beta,
            stats: self.stats.len() - 1,
        }
    }

    fn push(&mut self, name: String, tensor: Tensor<T>) -> usize {
        self.params.push(Param { name, tensor });
        self.params.len() - 1
    }
}

/// Channel count and downsampling factor of each encoder feature map that
/// can feed a skip connection, plus the encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeTrace {
    /// `(factor, channels)` in encoder order, first map per factor.
    pub skips: Vec<(usize, usize)>,
    pub bottleneck_factor: usize,
    pub bottleneck_channels: usize,
    pub output_factor: usize,
}

/// Channel/resolution bookkeeping of a config without allocating weights.
pub fn shape_trace(config: &NetworkConfig) -> Result<ShapeTrace> {
    config.validate()?;
    let mut skips = vec![(1, config.input_channels), (2, config.stem_features)];
    if config.stem == StemKind::Conv7MaxPool {
        skips.push((4, config.stem_features));
    }
    let mut factor = config.stem_factor();
    let mut channels = config.stem_features;
    for (b, &layers) in config.block_layout.iter().enumerate() {
        channels += layers * config.growth_rate;
        if b + 1 < config.block_layout.len() {
            channels = compressed(channels, config.compression)?;
            factor *= 2;
            skips.push((factor, channels));
        }
    }
    let stages = config.decoder_features.len() - 1;
    let out_factor = config.output_scale.factor();
    if factor != out_factor << stages {
        return Err(Error::Config(format!(
            "skip-resolution mismatch: encoder downsamples x{factor} but {stages} up-stage(s) reach x{}, \
             need x{out_factor} for {:?} output",
            factor >> stages.min(63),
            config.output_scale
        )));
    }
    for s in 0..stages {
        let f = factor >> (s + 1);
        if !skips.iter().any(|&(sf, _)| sf == f) {
            return Err(Error::Config(format!(
                "skip-resolution mismatch: decoder stage {} needs an encoder feature at 1/{f} resolution",
                s + 1
            )));
        }
    }
    Ok(ShapeTrace {
        skips,
        bottleneck_factor: factor,
        bottleneck_channels: channels,
        output_factor: out_factor,
    })
}

fn compressed(channels: usize, compression: f64) -> Result<usize> {
    let c = (channels as f64 * compression).floor() as usize;
    if c == 0 {
        return Err(Error::Config(format!(
            "compression {compression} leaves no channels from {channels}"
        )));
    }
    Ok(c)
}

impl<T: Scalar> Network<T> {
    pub fn build(config: NetworkConfig) -> Result<Self> {
        let trace = shape_trace(&config)?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            params: Vec::new(),
            stats: Vec::new(),
        };
        let (stem_k, stem_pool) = match config.stem {
            StemKind::Conv7MaxPool => (7, true),
            StemKind::Conv3 => (3, false),
        };
        let stem_conv = b.conv("encoder.stem.conv", config.input_channels, config.stem_features, stem_k, 2, false);
        let stem_norm = b.norm("encoder.stem.norm", config.stem_features);

        let k = config.growth_rate;
        let mut channels = config.stem_features;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (bi, &n_layers) in config.block_layout.iter().enumerate() {
            let mut layers = Vec::with_capacity(n_layers);
            for li in 0..n_layers {
                let p = format!("encoder.block{}.layer{}", bi + 1, li + 1);
                let norm1 = b.norm(&format!("{p}.norm1"), channels);
                let conv1 = b.conv(&format!("{p}.conv1"), channels, 4 * k, 1, 1, false);
                let norm2 = b.norm(&format!("{p}.norm2"), 4 * k);
                let conv2 = b.conv(&format!("{p}.conv2"), 4 * k, k, 3, 1, false);
                layers.push(DenseLayer {
                    norm1,
                    conv1,
                    norm2,
                    conv2,
                });
                channels += k;
            }
            blocks.push(layers);
            if bi + 1 < config.block_layout.len() {
                let p = format!("encoder.transition{}", bi + 1);
                let out = compressed(channels, config.compression)?;
                let norm = b.norm(&format!("{p}.norm"), channels);
                let conv = b.conv(&format!("{p}.conv"), channels, out, 1, 1, false);
                transitions.push(Transition { norm, conv });
                channels = out;
            }
        }
        let final_norm = b.norm("encoder.final_norm", channels);
        let encoder_params = b.params.iter().map(|p| p.tensor.numel()).sum();

        let dec = &config.decoder_features;
        let bottleneck = b.conv("decoder.bottleneck", channels, dec[0], 1, 1, true);
        let mut stages = Vec::new();
        for s in 1..dec.len() {
            let skip_factor = trace.bottleneck_factor >> s;
            let skip_c = trace
                .skips
                .iter()
                .find(|&&(f, _)| f == skip_factor)
                .map(|&(_, c)| c)
                .expect("checked by shape_trace");
            let p = format!("decoder.stage{s}");
            let conv1 = b.conv(&format!("{p}.conv1"), dec[s - 1] + skip_c, dec[s], 3, 1, true);
            let conv2 = b.conv(&format!("{p}.conv2"), dec[s], dec[s], 3, 1, true);
            stages.push(DecoderStage {
                skip_factor,
                conv1,
                conv2,
            });
        }
        let head = b.conv("decoder.head", *dec.last().expect("non-empty"), 1, 3, 1, true);

        Ok(Network {
            config,
            params: b.params,
            stats: b.stats,
            layout: Layout {
                stem_conv,
                stem_norm,
                stem_pool,
                blocks,
                transitions,
                final_norm,
                bottleneck,
                stages,
                head,
            },
            encoder_params,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn stats(&self) -> &[StatsSlot<T>] {
        &self.stats
    }

    /// Replaces every batch-norm running-statistics slot.
    pub fn restore_stats(&mut self, stats: Vec<StatsSlot<T>>) {
        debug_assert_eq!(stats.len(), self.stats.len());
        self.stats = stats;
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn encoder_param_count(&self) -> usize {
        self.encoder_params
    }

    /// Input extents must be multiples of this.
    pub fn input_multiple(&self) -> usize {
        self.config.encoder_factor()
    }

    /// Output extent for an input extent.
    pub fn output_extent(&self, input: usize) -> usize {
        input / self.config.output_scale.factor()
    }

    pub fn layer_table(&self) -> Vec<LayerRow> {
        self.params
            .iter()
            .map(|p| LayerRow {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                params: p.tensor.numel(),
            })
            .collect()
    }

    fn bn_params(&self, mode: Mode) -> BatchNormParams<T> {
        BatchNormParams {
            mode,
            momentum: T::from_f64(self.config.bn_momentum),
            epsilon: T::from_f64(self.config.bn_epsilon),
        }
    }

    /// Records every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone().with_requires_grad(requires_grad)))
            .collect()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape[..] else {
            return Err(shape_err!("network input must be NCHW, got {shape:?}"));
        };
        if c != self.config.input_channels {
            return Err(shape_err!(
                "network expects {} input channels, got {c}",
                self.config.input_channels
            ));
        }
        let m = self.input_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(shape_err!(
                "input extent {h}x{w} must be a multiple of {m} in both dimensions"
            ));
        }
        Ok(())
    }

    /// Eval-mode forward: running statistics normalize, nothing is mutated.
    pub fn forward_eval(&self, tape: &mut Tape<T>, image: Var, requires_grad: bool) -> Result<Forward> {
        let params = self.bind(tape, requires_grad);
        let mut stats: Vec<RunningStats<T>> = self.stats.iter().map(|s| s.stats.clone()).collect();
        let output = self.forward_impl(tape, image, &params, &mut stats, Mode::Eval)?;
        Ok(Forward { output, params })
    }

    /// Train-mode forward: batch statistics normalize and the running
    /// statistics are updated.
    pub fn forward_train(&mut self, tape: &mut Tape<T>, image: Var) -> Result<Forward> {
        let params = self.bind(tape, true);
        let mut stats: Vec<RunningStats<T>> = self.stats.iter().map(|s| s.stats.clone()).collect();
        let output = self.forward_impl(tape, image, &params, &mut stats, Mode::Train)?;
        for (slot, s) in self.stats.iter_mut().zip(stats) {
            slot.stats = s;
        }
        Ok(Forward { output, params })
    }

    /// Forward with caller-bound parameter variables, in [`Network::params`]
    /// order. Running statistics are read but never stored.
    pub fn forward_with(&self, tape: &mut Tape<T>, image: Var, params: &[Var], mode: Mode) -> Result<Var> {
        if params.len() != self.params.len() {
            return Err(Error::Usage(format!(
                "forward_with: {} parameter vars for {} parameters",
                params.len(),
                self.params.len()
            )));
        }
        let mut stats: Vec<RunningStats<T>> = self.stats.iter().map(|s| s.stats.clone()).collect();
        self.forward_impl(tape, image, params, &mut stats, mode)
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, image: Var, mode: Mode) -> Result<Forward> {
        match mode {
            Mode::Train => self.forward_train(tape, image),
            Mode::Eval => self.forward_eval(tape, image, false),
        }
    }

    /// Eval-mode prediction for a batch of images, `[N, 1, H', W']`.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let out = self.forward_eval(&mut tape, x, false)?.output;
        Ok(tape.value(out).clone())
    }

    fn forward_impl(
        &self,
        tape: &mut Tape<T>,
        image: Var,
        p: &[Var],
        stats: &mut [RunningStats<T>],
        mode: Mode,
    ) -> Result<Var> {
        self.check_input(tape.shape(image))?;
        let bn = self.bn_params(mode);
        let l = &self.layout;
        let conv = |tape: &mut Tape<T>, x: Var, c: &ConvLayer| {
            tape.conv2d(x, p[c.weight], c.bias.map(|b| p[b]), c.stride, c.padding)
        };
        let norm_relu = |tape: &mut Tape<T>, x: Var, n: &NormLayer, stats: &mut [RunningStats<T>]| {
            let y = tape.batch_norm(x, p[n.gamma], p[n.beta], &mut stats[n.stats], bn)?;
            tape.relu(y)
        };

        let mut skips: Vec<(usize, Var)> = vec![(1, image)];
        let mut x = conv(tape, image, &l.stem_conv)?;
        x = norm_relu(tape, x, &l.stem_norm, stats)?;
        skips.push((2, x));
        let mut factor = 2;
        if l.stem_pool {
            x = tape.max_pool2d(x, 3, 2, 1)?;
            factor = 4;
            skips.push((factor, x));
        }
        for (bi, block) in l.blocks.iter().enumerate() {
            let mut features = vec![x];
            for layer in block {
                let input = if features.len() == 1 {
                    features[0]
                } else {
                    tape.concat_all(&features)?
                };
                let h = norm_relu(tape, input, &layer.norm1, stats)?;
                let h = conv(tape, h, &layer.conv1)?;
                let h = norm_relu(tape, h, &layer.norm2, stats)?;
                let h = conv(tape, h, &layer.conv2)?;
                features.push(h);
            }
            x = tape.concat_all(&features)?;
            if let Some(t) = l.transitions.get(bi) {
                x = norm_relu(tape, x, &t.norm, stats)?;
                x = conv(tape, x, &t.conv)?;
                x = tape.avg_pool2d(x, 2, 2, 0)?;
                factor *= 2;
                if !skips.iter().any(|&(f, _)| f == factor) {
                    skips.push((factor, x));
                }
            }
        }
        x = norm_relu(tape, x, &l.final_norm, stats)?;

        x = conv(tape, x, &l.bottleneck)?;
        for stage in &l.stages {
            let up = tape.upsample2x(x)?;
            let skip = skips
                .iter()
                .find(|&&(f, _)| f == stage.skip_factor)
                .map(|&(_, v)| v)
                .ok_or_else(|| shape_err!("no encoder feature at 1/{} resolution", stage.skip_factor))?;
            let cat = tape.concat_channels(up, skip)?;
            let h = conv(tape, cat, &stage.conv1)?;
            let h = tape.relu(h)?;
            let h = conv(tape, h, &stage.conv2)?;
            x = tape.relu(h)?;
        }
        let out = conv(tape, x, &l.head)?;
        tape.softplus(out)
    }

    /// Parameters then running statistics, in build order.
    pub fn to_records(&self) -> Vec<TensorRecord> {
        let mut out: Vec<TensorRecord> = self
            .params
            .iter()
            .map(|p| TensorRecord::from_tensor(p.name.clone(), &p.tensor))
            .collect();
        for s in &self.stats {
            let c = [s.stats.channels()];
            out.push(TensorRecord::from_slice(format!("{}.running_mean", s.name), &c, &s.stats.mean));
            out.push(TensorRecord::from_slice(format!("{}.running_var", s.name), &c, &s.stats.var));
        }
        out
    }

    pub fn config_json(&self) -> String {
        serde_json::to_string(&self.config).expect("config serializes")
    }

    pub fn to_checkpoint(&self) -> CheckpointFile {
        CheckpointFile {
            config_json: self.config_json(),
            tensors: self.to_records(),
        }
    }

    /// Serialized checkpoint length in bytes.
    pub fn checkpoint_bytes(&self) -> usize {
        self.to_checkpoint().to_bytes().len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Network::from_checkpoint(&CheckpointFile::read(path)?, &[])
    }

    /// Rebuilds the network from its embedded config and restores every
    /// tensor. Records whose names start with one of `extra_prefixes` are
    /// ignored; any other unknown or missing name is an error.
    pub fn from_checkpoint(file: &CheckpointFile, extra_prefixes: &[&str]) -> Result<Self> {
        let config: NetworkConfig = serde_json::from_str(&file.config_json)
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        let mut net = Network::build(config)?;
        let expected = net.to_records();
        let mut seen = std::collections::HashSet::new();
        for rec in &file.tensors {
            if extra_prefixes.iter().any(|p| rec.name.starts_with(p)) {
                continue;
            }
            if !expected.iter().any(|e| e.name == rec.name) {
                return Err(Error::Checkpoint(format!("unexpected tensor '{}'", rec.name)));
            }
            if !seen.insert(rec.name.as_str()) {
                return Err(Error::Checkpoint(format!("duplicate tensor '{}'", rec.name)));
            }
        }
        for e in &expected {
            let rec = file
                .get(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{}'", e.name)))?;
            if rec.shape != e.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' has shape {:?}, expected {:?}",
                    e.name, rec.shape, e.shape
                )));
            }
        }
        for p in &mut net.params {
            let rec = file.get(&p.name).expect("checked above");
            p.tensor = rec.to_tensor()?;
        }
        for s in &mut net.stats {
            let mean = file.get(&format!("{}.running_mean", s.name)).expect("checked above").to_vec()?;
            let var = file.get(&format!("{}.running_var", s.name)).expect("checked above").to_vec()?;
            s.stats = RunningStats::from_parts(mean, var);
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_trace() {
        let t = shape_trace(&NetworkConfig::toy()).unwrap();
        assert_eq!(t.bottleneck_factor, 4);
        assert_eq!(t.bottleneck_channels, 16);
        assert_eq!(t.skips, vec![(1, 3), (2, 8), (4, 8)]);
    }

    #[test]
    fn densenet121_trace() {
        let t = shape_trace(&NetworkConfig::densenet121()).unwrap();
        assert_eq!(t.bottleneck_factor, 32);
        assert_eq!(t.bottleneck_channels, 1024);
        assert_eq!(t.skips, vec![(1, 3), (2, 64), (4, 64), (8, 128), (16, 256), (32, 512)]);
    }

    #[test]
    fn stage_count_mismatch_is_build_error() {
        let mut c = NetworkConfig::toy();
        c.decoder_features = vec![16, 8, 8];
        assert!(matches!(Network::<f32>::build(c.clone()), Err(Error::Config(_))));
        c.output_scale = OutputScale::Full;
        assert!(Network::<f32>::build(c).is_ok());
    }

    #[test]
    fn unknown_preset() {
        assert!(NetworkConfig::preset("resnet").is_err());
    }

    #[test]
    fn names_unique() {
        let net = Network::<f32>::build(NetworkConfig::densenet121()).unwrap();
        let mut names: Vec<_> = net.to_records().into_iter().map(|r| r.name).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn densenet121_encoder_matches_reference_count() {
        // torchvision densenet121 features: 7_978_856 total minus the
        // 1024 -> 1000 classifier (1_025_000).
        let net = Network::<f32>::build(NetworkConfig::densenet121()).unwrap();
        assert_eq!(net.encoder_param_count(), 6_953_856);
    }

    #[test]
    fn non_divisible_input_names_multiple() {
        let net = Network::<f64>::build(NetworkConfig::toy()).unwrap();
        let err = net.predict(&Tensor::zeros(vec![1, 3, 30, 32]).unwrap()).unwrap_err();
        assert!(err.to_string().contains("multiple of 4"), "{err}");
    }
}

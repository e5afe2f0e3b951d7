use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::augment::{augment_flip, sample_rng, shuffle_rng};
use super::{DepthDataset, Sample};
use crate::error::{Error, Result};
use crate::losses::depth_transform;
use crate::network::OutputScale;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Deterministic per-epoch order split into batches; the final short batch is
/// kept.
pub fn make_batches(len: usize, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if len == 0 {
        return Err(Error::Data("cannot batch an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut shuffle_rng(shuffle_seed, epoch));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchOptions {
    pub seed: u64,
    pub augment: bool,
    pub output_scale: OutputScale,
    pub max_depth: f64,
    pub min_depth: f64,
}

/// Network-ready batch. `target` holds transformed depth at the network's
/// output resolution; `mask` is 1 where the target is valid.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub rgb: Tensor<T>,
    pub target: Tensor<T>,
    pub mask: Tensor<T>,
    pub ids: Vec<String>,
}

fn prepare(sample: Sample, index: usize, epoch: u64, opts: &BatchOptions) -> Result<Sample> {
    if opts.augment {
        let mut rng = sample_rng(opts.seed, epoch, index as u64);
        Ok(augment_flip(sample, &mut rng))
    } else {
        Ok(sample)
    }
}

/// Decodes `indices` (in parallel; results keep index order) and assembles a
/// batch. Every sample must share one extent.
pub fn load_batch<T: Scalar, D: DepthDataset + ?Sized>(
    data: &D,
    indices: &[usize],
    epoch: u64,
    opts: &BatchOptions,
) -> Result<Batch<T>> {
    if indices.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let samples: Vec<Sample> = indices
        .par_iter()
        .map(|&i| prepare(data.sample(i)?, i, epoch, opts))
        .collect::<Result<_>>()?;
    let (h, w) = (samples[0].height(), samples[0].width());
    let mut rgb = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut target = Vec::new();
    let mut mask = Vec::new();
    let mut out_hw = (0, 0);
    for s in &samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::Data(format!(
                "sample '{}' is {}x{}, batch is {h}x{w}",
                s.id,
                s.height(),
                s.width()
            )));
        }
        rgb.extend(s.rgb.data().iter().map(|&v| T::from_f64(v as f64)));
        let depth = match opts.output_scale {
            OutputScale::Half => s.depth.downsample2x()?,
            OutputScale::Full => s.depth.clone(),
        };
        let t = depth_transform(&depth, opts.max_depth, opts.min_depth)?;
        out_hw = (t.height(), t.width());
        for (&v, &ok) in t.values().iter().zip(t.valid()) {
            target.push(if ok { T::from_f64(v) } else { T::one() });
            mask.push(if ok { T::one() } else { T::zero() });
        }
    }
    let n = samples.len();
    Ok(Batch {
        rgb: Tensor::new(vec![n, 3, h, w], rgb)?,
        target: Tensor::new(vec![n, 1, out_hw.0, out_hw.1], target)?,
        mask: Tensor::new(vec![n, 1, out_hw.0, out_hw.1], mask)?,
        ids: samples.into_iter().map(|s| s.id).collect(),
    })
}

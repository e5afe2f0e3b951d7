//! RGB/depth sample ingestion, augmentation and batching.

mod augment;
mod batch;
mod manifest;
mod synth;

pub use augment::{augment_flip, flip_sample, sample_rng};
pub use batch::{load_batch, make_batches, Batch, BatchOptions};
pub use manifest::{load_depth, load_manifest, load_rgb, Manifest, ManifestRecord, DEFAULT_DEPTH_SCALE};
pub use synth::{synth_scene, write_synthetic_dataset};

use crate::depth::DepthMap;
use crate::error::Result;
use crate::tensor::Tensor;

/// One RGB image (`[3, H, W]`, values in `[0, 1]`) with its depth map in
/// meters.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub rgb: Tensor<f32>,
    pub depth: DepthMap,
    pub id: String,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.depth.height()
    }

    pub fn width(&self) -> usize {
        self.depth.width()
    }
}

/// Indexed source of samples. Implementations must be safe to read from
/// several threads at once.
pub trait DepthDataset: Sync {
    fn len(&self) -> usize;

    fn sample(&self, index: usize) -> Result<Sample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Samples held in memory, e.g. synthetic scenes.
#[derive(Clone, Debug, Default)]
pub struct InMemoryDataset {
    pub samples: Vec<Sample>,
}

impl InMemoryDataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        InMemoryDataset { samples }
    }

    /// `count` synthetic scenes with seeds `seed, seed + 1, ...`.
    pub fn synthetic(count: usize, seed: u64, height: usize, width: usize) -> Result<Self> {
        let samples = (0..count as u64)
            .map(|i| synth_scene(seed.wrapping_add(i), height, width))
            .collect::<Result<_>>()?;
        Ok(InMemoryDataset { samples })
    }
}

impl DepthDataset for InMemoryDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn sample(&self, index: usize) -> Result<Sample> {
        self.samples.get(index).cloned().ok_or_else(|| {
            crate::Error::Data(format!("sample index {index} out of range ({})", self.samples.len()))
        })
    }
}

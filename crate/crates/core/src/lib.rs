//! Monocular depth estimation from a single RGB image.
//!
//! A self-contained toolkit: a small reverse-mode autodiff engine
//! ([`autodiff`]), a DenseNet-encoder U-Net ([`network`]), the composite
//! depth loss ([`losses`]), evaluation metrics ([`metrics`]), an NYU-style data
//! pipeline ([`data`]) and an Adam trainer ([`train`]).

pub mod autodiff;
pub mod colormap;
pub mod data;
pub mod depth;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autodiff::{BatchNormParams, Gradients, Mode, RunningStats, Tape, Var};
pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
pub use depth::DepthMap;
pub use losses::{LossBreakdown, LossConfig};
pub use network::{Network, NetworkConfig, OutputScale};
pub use metrics::{MetricsReport, ResolutionPolicy};
pub use train::{adam_step, size_report, AdamConfig, AdamState, Precision, SizeReport, TrainConfig, TrainLogRecord, Trainer};

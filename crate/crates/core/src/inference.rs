//! Eval-mode prediction and dataset evaluation.

use rayon::prelude::*;

use crate::data::DepthDataset;
use crate::depth::DepthMap;
use crate::error::{shape_err, Result};
use crate::losses::{inverse_depth_transform, LossConfig};
use crate::metrics::{evaluate, MetricsReport, ResolutionPolicy};
use crate::network::Network;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Raw network output for one `[3, H, W]` image, in transformed units at the
/// network's output resolution.
pub fn predict_transformed<T: Scalar>(net: &Network<T>, rgb: &Tensor<f32>) -> Result<DepthMap> {
    let [c, h, w] = rgb.shape()[..] else {
        return Err(shape_err!("expected a [3, H, W] image, got {:?}", rgb.shape()));
    };
    let x = Tensor::new(vec![1, c, h, w], rgb.data().iter().map(|&v| T::from_f64(v as f64)).collect())?;
    let out = net.predict(&x)?;
    let (_, _, oh, ow) = out.dims4()?;
    DepthMap::new(oh, ow, out.data().iter().map(|&v| Scalar::to_f64(v)).collect())
}

/// Predicted depth in meters at the network's output resolution.
pub fn predict_depth<T: Scalar>(net: &Network<T>, rgb: &Tensor<f32>, loss: &LossConfig) -> Result<DepthMap> {
    inverse_depth_transform(&predict_transformed(net, rgb)?, loss.max_depth, loss.min_depth)
}

/// Policy used for network evaluation: upsample transformed predictions to
/// the ground-truth extent, then invert the transform.
pub fn network_policy(loss: &LossConfig) -> ResolutionPolicy {
    ResolutionPolicy {
        resize: true,
        inverse_transform: Some((loss.max_depth, loss.min_depth)),
    }
}

/// Metrics of `net` over every sample of `data`.
pub fn evaluate_network<T: Scalar, D: DepthDataset + ?Sized>(
    net: &Network<T>,
    data: &D,
    loss: &LossConfig,
) -> Result<MetricsReport> {
    let pairs: Vec<(DepthMap, DepthMap)> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let s = data.sample(i)?;
            Ok((predict_transformed(net, &s.rgb)?, s.depth))
        })
        .collect::<Result<_>>()?;
    let (preds, gts): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    evaluate(&preds, &gts, &network_policy(loss))
}

/// Metrics of ground truth against itself.
pub fn evaluate_identity<D: DepthDataset + ?Sized>(data: &D) -> Result<MetricsReport> {
    let gts: Vec<DepthMap> = (0..data.len())
        .into_par_iter()
        .map(|i| Ok(data.sample(i)?.depth))
        .collect::<Result<_>>()?;
    evaluate(&gts, &gts, &ResolutionPolicy::identity())
}

use rayon::prelude::*;

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct NormGeom {
    pub batch: usize,
    pub channels: usize,
    pub plane: usize,
}

impl NormGeom {
    fn count(&self) -> usize {
        self.batch * self.plane
    }

    fn channel_iter<'a, T: Copy>(&self, x: &'a [T], c: usize) -> impl Iterator<Item = T> + 'a {
        let (batch, channels, plane) = (self.batch, self.channels, self.plane);
        (0..batch).flat_map(move |n| x[(n * channels + c) * plane..][..plane].iter().copied())
    }
}

/// Biased per-channel mean and variance over N, H, W (two-pass).
pub fn channel_stats<T: Scalar>(g: &NormGeom, x: &[T]) -> (Vec<T>, Vec<T>) {
    let inv = T::one() / T::from_f64(g.count() as f64);
    (0..g.channels)
        .into_par_iter()
        .map(|c| {
            let mean = g.channel_iter(x, c).fold(T::zero(), |a, v| a + v) * inv;
            let var = g
                .channel_iter(x, c)
                .fold(T::zero(), |a, v| a + (v - mean) * (v - mean))
                * inv;
            (mean, var)
        })
        .unzip()
}

/// `y = gamma * (x - mean) * inv_std + beta`; returns `(y, xhat)`.
pub fn normalize<T: Scalar>(
    g: &NormGeom,
    x: &[T],
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    y.par_chunks_mut(g.plane)
        .zip(xhat.par_chunks_mut(g.plane))
        .enumerate()
        .for_each(|(p, (y, xh))| {
            let c = p % g.channels;
            let xin = &x[p * g.plane..][..g.plane];
            for i in 0..g.plane {
                xh[i] = (xin[i] - mean[c]) * inv_std[c];
                y[i] = gamma[c] * xh[i] + beta[c];
            }
        });
    (y, xhat)
}

/// Per-channel `(sum dy, sum dy * xhat)`.
pub fn grad_sums<T: Scalar>(g: &NormGeom, grad_out: &[T], xhat: &[T]) -> (Vec<T>, Vec<T>) {
    (0..g.channels)
        .into_par_iter()
        .map(|c| {
            let mut sdy = T::zero();
            let mut sdyx = T::zero();
            for n in 0..g.batch {
                let off = (n * g.channels + c) * g.plane;
                for i in off..off + g.plane {
                    sdy = sdy + grad_out[i];
                    sdyx = sdyx + grad_out[i] * xhat[i];
                }
            }
            (sdy, sdyx)
        })
        .unzip()
}

/// Input gradient when normalizing with batch statistics.
pub fn backward_input_train<T: Scalar>(
    g: &NormGeom,
    grad_out: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    sum_dy: &[T],
    sum_dy_xhat: &[T],
) -> Vec<T> {
    let m = T::from_f64(g.count() as f64);
    let mut gx = vec![T::zero(); grad_out.len()];
    gx.par_chunks_mut(g.plane).enumerate().for_each(|(p, gx)| {
        let c = p % g.channels;
        let k = gamma[c] * inv_std[c] / m;
        let off = p * g.plane;
        for i in 0..g.plane {
            gx[i] = k * (m * grad_out[off + i] - sum_dy[c] - xhat[off + i] * sum_dy_xhat[c]);
        }
    });
    gx
}

/// Input gradient when normalizing with fixed (running) statistics.
pub fn backward_input_eval<T: Scalar>(g: &NormGeom, grad_out: &[T], inv_std: &[T], gamma: &[T]) -> Vec<T> {
    let mut gx = vec![T::zero(); grad_out.len()];
    gx.par_chunks_mut(g.plane).enumerate().for_each(|(p, gx)| {
        let c = p % g.channels;
        let k = gamma[c] * inv_std[c];
        for (o, &d) in gx.iter_mut().zip(&grad_out[p * g.plane..][..g.plane]) {
            *o = k * d;
        }
    });
    gx
}

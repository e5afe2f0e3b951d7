use rayon::prelude::*;

use super::valid_range;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    /// N * C planes.
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeom {
    fn in_plane(&self) -> usize {
        self.height * self.width
    }
    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Window mean; padded positions count as zeros in the divisor.
pub fn avg_pool_forward<T: Scalar>(g: &PoolGeom, x: &[T]) -> Vec<T> {
    let scale = T::one() / T::from_f64((g.kernel * g.kernel) as f64);
    let mut out = vec![T::zero(); g.planes * g.out_plane()];
    out.par_chunks_mut(g.out_plane())
        .enumerate()
        .for_each(|(p, out)| {
            let xin = &x[p * g.in_plane()..][..g.in_plane()];
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = T::zero();
                    for ky in 0..g.kernel {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy as usize >= g.height {
                            continue;
                        }
                        for kx in 0..g.kernel {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix < 0 || ix as usize >= g.width {
                                continue;
                            }
                            acc = acc + xin[iy as usize * g.width + ix as usize];
                        }
                    }
                    out[oy * g.out_w + ox] = acc * scale;
                }
            }
        });
    out
}

pub fn avg_pool_backward<T: Scalar>(g: &PoolGeom, grad_out: &[T]) -> Vec<T> {
    let scale = T::one() / T::from_f64((g.kernel * g.kernel) as f64);
    let mut gx = vec![T::zero(); g.planes * g.in_plane()];
    gx.par_chunks_mut(g.in_plane())
        .enumerate()
        .for_each(|(p, gx)| {
            let go = &grad_out[p * g.out_plane()..][..g.out_plane()];
            for ky in 0..g.kernel {
                let (oy0, oy1) = valid_range(ky, g.padding, g.stride, g.height, g.out_h);
                for kx in 0..g.kernel {
                    let (ox0, ox1) = valid_range(kx, g.padding, g.stride, g.width, g.out_w);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.padding;
                        for ox in ox0..ox1 {
                            let ix = ox * g.stride + kx - g.padding;
                            gx[iy * g.width + ix] = gx[iy * g.width + ix] + go[oy * g.out_w + ox] * scale;
                        }
                    }
                }
            }
        });
    gx
}

/// Window maximum over in-bounds positions. Returns the outputs and, per
/// output, the flat in-plane index of the winner; ties go to the first
/// position in row-major window order.
pub fn max_pool_forward<T: Scalar>(g: &PoolGeom, x: &[T]) -> (Vec<T>, Vec<usize>) {
    let mut out = vec![T::zero(); g.planes * g.out_plane()];
    let mut arg = vec![0usize; g.planes * g.out_plane()];
    out.par_chunks_mut(g.out_plane())
        .zip(arg.par_chunks_mut(g.out_plane()))
        .enumerate()
        .for_each(|(p, (out, arg))| {
            let xin = &x[p * g.in_plane()..][..g.in_plane()];
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for ky in 0..g.kernel {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy as usize >= g.height {
                            continue;
                        }
                        for kx in 0..g.kernel {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix < 0 || ix as usize >= g.width {
                                continue;
                            }
                            let idx = iy as usize * g.width + ix as usize;
                            if best_idx == usize::MAX || xin[idx] > best {
                                best = xin[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[oy * g.out_w + ox] = best;
                    arg[oy * g.out_w + ox] = best_idx;
                }
            }
        });
    (out, arg)
}

pub fn max_pool_backward<T: Scalar>(g: &PoolGeom, argmax: &[usize], grad_out: &[T]) -> Vec<T> {
    let mut gx = vec![T::zero(); g.planes * g.in_plane()];
    gx.par_chunks_mut(g.in_plane())
        .enumerate()
        .for_each(|(p, gx)| {
            let go = &grad_out[p * g.out_plane()..][..g.out_plane()];
            let am = &argmax[p * g.out_plane()..][..g.out_plane()];
            for (&idx, &v) in am.iter().zip(go) {
                gx[idx] = gx[idx] + v;
            }
        });
    gx
}

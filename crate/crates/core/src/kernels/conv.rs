use rayon::prelude::*;

use super::valid_range;
use crate::scalar::Scalar;

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn in_plane(&self) -> usize {
        self.height * self.width
    }
    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }
    fn kernel_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_channels * g.out_plane()];
    out.par_chunks_mut(g.out_plane())
        .enumerate()
        .for_each(|(plane_idx, out)| {
            let n = plane_idx / g.out_channels;
            let co = plane_idx % g.out_channels;
            if let Some(b) = bias {
                out.fill(b[co]);
            }
            let wk = &w[co * g.kernel_len()..(co + 1) * g.kernel_len()];
            for ci in 0..g.in_channels {
                let xin = &x[(n * g.in_channels + ci) * g.in_plane()..][..g.in_plane()];
                for ky in 0..g.kernel_h {
                    let (oy0, oy1) = valid_range(ky, g.padding, g.stride, g.height, g.out_h);
                    for kx in 0..g.kernel_w {
                        let wv = wk[(ci * g.kernel_h + ky) * g.kernel_w + kx];
                        let (ox0, ox1) = valid_range(kx, g.padding, g.stride, g.width, g.out_w);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.padding;
                            let row = &xin[iy * g.width..][..g.width];
                            let orow = &mut out[oy * g.out_w..][..g.out_w];
                            for ox in ox0..ox1 {
                                let ix = ox * g.stride + kx - g.padding;
                                orow[ox] = orow[ox] + wv * row[ix];
                            }
                        }
                    }
                }
            }
        });
    out
}

pub fn conv2d_backward_input<T: Scalar>(g: &ConvGeom, w: &[T], grad_out: &[T]) -> Vec<T> {
    let mut gx = vec![T::zero(); g.batch * g.in_channels * g.in_plane()];
    gx.par_chunks_mut(g.in_plane())
        .enumerate()
        .for_each(|(plane_idx, gx)| {
            let n = plane_idx / g.in_channels;
            let ci = plane_idx % g.in_channels;
            for co in 0..g.out_channels {
                let go = &grad_out[(n * g.out_channels + co) * g.out_plane()..][..g.out_plane()];
                let wk = &w[co * g.kernel_len() + ci * g.kernel_h * g.kernel_w..];
                for ky in 0..g.kernel_h {
                    let (oy0, oy1) = valid_range(ky, g.padding, g.stride, g.height, g.out_h);
                    for kx in 0..g.kernel_w {
                        let wv = wk[ky * g.kernel_w + kx];
                        let (ox0, ox1) = valid_range(kx, g.padding, g.stride, g.width, g.out_w);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.padding;
                            let grow = &go[oy * g.out_w..][..g.out_w];
                            let row = &mut gx[iy * g.width..][..g.width];
                            for ox in ox0..ox1 {
                                let ix = ox * g.stride + kx - g.padding;
                                row[ix] = row[ix] + wv * grow[ox];
                            }
                        }
                    }
                }
            }
        });
    gx
}

pub fn conv2d_backward_weight<T: Scalar>(g: &ConvGeom, x: &[T], grad_out: &[T]) -> Vec<T> {
    let mut gw = vec![T::zero(); g.out_channels * g.kernel_len()];
    gw.par_chunks_mut(g.kernel_len())
        .enumerate()
        .for_each(|(co, gw)| {
            for ci in 0..g.in_channels {
                for ky in 0..g.kernel_h {
                    let (oy0, oy1) = valid_range(ky, g.padding, g.stride, g.height, g.out_h);
                    for kx in 0..g.kernel_w {
                        let (ox0, ox1) = valid_range(kx, g.padding, g.stride, g.width, g.out_w);
                        let mut acc = T::zero();
                        for n in 0..g.batch {
                            let go = &grad_out[(n * g.out_channels + co) * g.out_plane()..];
                            let xin = &x[(n * g.in_channels + ci) * g.in_plane()..];
                            for oy in oy0..oy1 {
                                let iy = oy * g.stride + ky - g.padding;
                                let grow = &go[oy * g.out_w..][..g.out_w];
                                let row = &xin[iy * g.width..][..g.width];
                                for ox in ox0..ox1 {
                                    let ix = ox * g.stride + kx - g.padding;
                                    acc = acc + grow[ox] * row[ix];
                                }
                            }
                        }
                        gw[(ci * g.kernel_h + ky) * g.kernel_w + kx] = acc;
                    }
                }
            }
        });
    gw
}

pub fn conv2d_backward_bias<T: Scalar>(g: &ConvGeom, grad_out: &[T]) -> Vec<T> {
    (0..g.out_channels)
        .into_par_iter()
        .map(|co| {
            let mut acc = T::zero();
            for n in 0..g.batch {
                for &v in &grad_out[(n * g.out_channels + co) * g.out_plane()..][..g.out_plane()] {
                    acc = acc + v;
                }
            }
            acc
        })
        .collect()
}

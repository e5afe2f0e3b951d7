use rayon::prelude::*;

use crate::scalar::Scalar;

/// One output coordinate of a half-pixel bilinear map: the two source taps
/// and their weights.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

/// Source coordinate = (dst + 0.5) * in/out - 0.5, clamped to the border.
fn taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: 1.0 - frac,
                w1: frac,
            }
        })
        .collect()
}

/// Bilinear resize of `planes` independent H×W planes.
pub fn bilinear_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(p, out)| {
        let xin = &x[p * h * w..][..h * w];
        for (oy, a) in ty.iter().enumerate() {
            let (ay0, ay1) = (T::from_f64(a.w0), T::from_f64(a.w1));
            for (ox, b) in tx.iter().enumerate() {
                let (bx0, bx1) = (T::from_f64(b.w0), T::from_f64(b.w1));
                let top = xin[a.i0 * w + b.i0] * bx0 + xin[a.i0 * w + b.i1] * bx1;
                let bot = xin[a.i1 * w + b.i0] * bx0 + xin[a.i1 * w + b.i1] * bx1;
                out[oy * ow + ox] = top * ay0 + bot * ay1;
            }
        }
    });
    out
}

pub fn bilinear_backward<T: Scalar>(
    grad_out: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut gx = vec![T::zero(); planes * h * w];
    gx.par_chunks_mut(h * w).enumerate().for_each(|(p, gx)| {
        let go = &grad_out[p * oh * ow..][..oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            let (ay0, ay1) = (T::from_f64(a.w0), T::from_f64(a.w1));
            for (ox, b) in tx.iter().enumerate() {
                let (bx0, bx1) = (T::from_f64(b.w0), T::from_f64(b.w1));
                let g = go[oy * ow + ox];
                let gt = g * ay0;
                let gb = g * ay1;
                gx[a.i0 * w + b.i0] = gx[a.i0 * w + b.i0] + gt * bx0;
                gx[a.i0 * w + b.i1] = gx[a.i0 * w + b.i1] + gt * bx1;
                gx[a.i1 * w + b.i0] = gx[a.i1 * w + b.i0] + gb * bx0;
                gx[a.i1 * w + b.i1] = gx[a.i1 * w + b.i1] + gb * bx1;
            }
        }
    });
    gx
}

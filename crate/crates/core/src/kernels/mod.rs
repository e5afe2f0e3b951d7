//! Forward and backward kernels on raw NCHW buffers. The tape in
//! [`crate::autodiff`] owns shapes and bookkeeping; these functions only do
//! arithmetic. Work is split across output planes so that every output
//! element is accumulated by exactly one thread in a fixed order, which keeps
//! results independent of the rayon pool size.

pub mod conv;
pub mod norm;
pub mod pool;
pub mod resize;

/// Output positions `o` in `lo..hi` for which `o * stride + offset - pad`
/// lands inside `0..in_len`.
#[inline]
pub(crate) fn valid_range(
    offset: usize,
    pad: usize,
    stride: usize,
    in_len: usize,
    out_len: usize,
) -> (usize, usize) {
    let lo = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    // largest o with o*stride + offset - pad <= in_len - 1
    let top = in_len - 1 + pad;
    let hi = if top < offset {
        0
    } else {
        ((top - offset) / stride + 1).min(out_len)
    };
    (lo, hi.max(lo))
}

/// Output extent of a sliding window, or `None` when the window does not fit.
pub fn window_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if kernel == 0 || stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

//! Fixed Turbo colormap (polynomial fit) for depth previews.

use crate::depth::DepthMap;

const RED4: [f64; 4] = [0.13572138, 4.61539260, -42.66032258, 132.13108234];
const GREEN4: [f64; 4] = [0.09140261, 2.19418839, 4.84296658, -14.18503333];
const BLUE4: [f64; 4] = [0.10667330, 12.64194608, -60.58204836, 110.36276771];
const RED2: [f64; 2] = [-152.94239396, 59.28637943];
const GREEN2: [f64; 2] = [4.27729857, 2.82956604];
const BLUE2: [f64; 2] = [-89.90310912, 27.34824973];

/// Turbo color at `t` in `[0, 1]`: 0 is the cold (blue) end, 1 the hot (red)
/// end. Out-of-range inputs are clamped.
pub fn turbo(t: f64) -> [u8; 3] {
    let x = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let v4 = [1.0, x, x * x, x * x * x];
    let v2 = [v4[2] * v4[2], v4[3] * v4[2]];
    let channel = |c4: &[f64; 4], c2: &[f64; 2]| {
        let v = c4.iter().zip(&v4).map(|(a, b)| a * b).sum::<f64>() + c2[0] * v2[0] + c2[1] * v2[1];
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    };
    [channel(&RED4, &RED2), channel(&GREEN4, &GREEN2), channel(&BLUE4, &BLUE2)]
}

/// Row-major RGB preview: the nearest valid depth maps to the hot end, the
/// farthest to the cold end. Invalid pixels are black.
pub fn colorize_depth(depth: &DepthMap) -> Vec<[u8; 3]> {
    let valid = depth.values().iter().zip(depth.valid()).filter(|(_, &ok)| ok).map(|(&d, _)| d);
    let (lo, hi) = valid.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)));
    let span = hi - lo;
    depth
        .values()
        .iter()
        .zip(depth.valid())
        .map(|(&d, &ok)| {
            if !ok {
                [0, 0, 0]
            } else if span > 0.0 {
                turbo((hi - d) / span)
            } else {
                turbo(1.0)
            }
        })
        .collect()
}

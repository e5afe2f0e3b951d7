//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use mdepth::network::{NetworkConfig, StemKind};
use mdepth::Network;

/// Parameter totals `(encoder, whole network)` enumerated layer by layer from
/// the architecture description alone.
pub fn param_oracle(cfg: &NetworkConfig) -> (usize, usize) {
    let conv = |cin: usize, cout: usize, k: usize, bias: bool| cin * cout * k * k + if bias { cout } else { 0 };
    let bn = |c: usize| 2 * c;
    let f = cfg.stem_features;
    let g = cfg.growth_rate;
    let stem_k = match cfg.stem {
        StemKind::Conv7MaxPool => 7,
        StemKind::Conv3 => 3,
    };
    let mut enc = conv(cfg.input_channels, f, stem_k, false) + bn(f);
    // (downsampling factor, channels) of every encoder feature map
    let mut pyramid = vec![(1usize, cfg.input_channels), (2, f)];
    let mut factor = 2;
    if cfg.stem == StemKind::Conv7MaxPool {
        factor = 4;
        pyramid.push((4, f));
    }
    let mut c = f;
    for (b, &layers) in cfg.block_layout.iter().enumerate() {
        for _ in 0..layers {
            enc += bn(c) + conv(c, 4 * g, 1, false) + bn(4 * g) + conv(4 * g, g, 3, false);
            c += g;
        }
        if b + 1 < cfg.block_layout.len() {
            let out = (c as f64 * cfg.compression).floor() as usize;
            enc += bn(c) + conv(c, out, 1, false);
            c = out;
            factor *= 2;
            pyramid.push((factor, c));
        }
    }
    enc += bn(c);

    let d = &cfg.decoder_features;
    let mut dec = conv(c, d[0], 1, true);
    for s in 1..d.len() {
        let skip = pyramid
            .iter()
            .find(|&&(pf, _)| pf == factor >> s)
            .expect("valid config")
            .1;
        dec += conv(d[s - 1] + skip, d[s], 3, true) + conv(d[s], d[s], 3, true);
    }
    dec += conv(d[d.len() - 1], 1, 3, true);
    (enc, enc + dec)
}

/// Parameter total by walking the built network's tensors.
pub fn enumerate_params<T: mdepth::Scalar>(net: &Network<T>) -> usize {
    net.params()
        .iter()
        .map(|p| p.tensor.shape().iter().product::<usize>())
        .sum()
}

/// Byte length of a checkpoint holding `records` as `(name, shape,
/// element size)` under a config of `config_len` bytes.
pub fn checkpoint_len(config_len: usize, records: &[(String, Vec<usize>, usize)]) -> (usize, usize) {
    let header = 4 + 4 + 4 + config_len + 4;
    let mut framing = header;
    let mut payload = 0;
    for (name, shape, elem) in records {
        framing += 4 + name.len() + 1 + 1 + 8 * shape.len();
        payload += elem * shape.iter().product::<usize>();
    }
    (framing, payload)
}

/// Mean SSIM of `[n, h, w]` images over every `k x k` window, computed per
/// window with explicit loops and two-pass moments.
pub fn naive_ssim(x: &[f64], y: &[f64], n: usize, h: usize, w: usize, k: usize, c1: f64, c2: f64) -> f64 {
    let area = (k * k) as f64;
    let mut total = 0.0;
    for s in 0..n {
        let at = |img: &[f64], i: usize, j: usize| img[s * h * w + i * w + j];
        let mut sum = 0.0;
        let mut windows = 0usize;
        for i0 in 0..=h - k {
            for j0 in 0..=w - k {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in i0..i0 + k {
                    for j in j0..j0 + k {
                        mx += at(x, i, j);
                        my += at(y, i, j);
                    }
                }
                mx /= area;
                my /= area;
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in i0..i0 + k {
                    for j in j0..j0 + k {
                        let dx = at(x, i, j) - mx;
                        let dy = at(y, i, j) - my;
                        vx += dx * dx;
                        vy += dy * dy;
                        cxy += dx * dy;
                    }
                }
                vx /= area;
                vy /= area;
                cxy /= area;
                sum += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                windows += 1;
            }
        }
        total += sum / windows as f64;
    }
    total / n as f64
}

/// `(rmse, sq_rel, mae)` by plain scalar loops.
pub fn scalar_metrics(y: &[f64], yhat: &[f64]) -> (f64, f64, f64) {
    let n = y.len() as f64;
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut mean = 0.0;
    for i in 0..y.len() {
        let d = y[i] - yhat[i];
        sq += d * d;
        abs += d.abs();
        mean += y[i];
    }
    mean /= n;
    let mut spread = 0.0;
    for &v in y {
        spread += (v - mean) * (v - mean);
    }
    ((sq / n).sqrt(), sq / spread, abs / n)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

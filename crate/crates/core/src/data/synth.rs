use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MIN_DEPTH: f64 = 1.0;
const MAX_DEPTH: f64 = 10.0;

/// Procedural indoor-like scene: a tilted floor-to-wall depth ramp with one
/// to four axis-aligned boxes at distinct constant depths, all within
/// `[1, 10]` m. RGB is depth-dependent shading times a per-surface tint plus
/// small seeded texture.
pub fn synth_scene(seed: u64, height: usize, width: usize) -> Result<Sample> {
    if height < 16 || width < 16 {
        return Err(Error::Config(format!(
            "synthetic scenes need at least 16x16, got {height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let far = rng.random_range(6.0..9.5);
    let near = rng.random_range(2.5..far - 1.5);
    let tilt = rng.random_range(-1.0..1.0);
    let mut depth = vec![0.0; height * width];
    let mut surface = vec![0usize; height * width];
    for y in 0..height {
        let v = y as f64 / (height - 1) as f64;
        for x in 0..width {
            let u = x as f64 / (width - 1) as f64;
            depth[y * width + x] = (far + (near - far) * v + tilt * (u - 0.5)).clamp(MIN_DEPTH, MAX_DEPTH);
        }
    }

    let n_boxes = rng.random_range(1..=4usize);
    let mut box_depths: Vec<f64> = Vec::with_capacity(n_boxes);
    while box_depths.len() < n_boxes {
        let d: f64 = rng.random_range(1.2..8.0);
        if box_depths.iter().all(|&o| (o - d).abs() > 0.5) {
            box_depths.push(d);
        }
    }
    // painter's order: far boxes first
    box_depths.sort_by(|a, b| b.total_cmp(a));
    for (k, &d) in box_depths.iter().enumerate() {
        let bh = rng.random_range(height / 5..=height / 2);
        let bw = rng.random_range(width / 5..=width / 2);
        let y0 = rng.random_range(0..=height - bh);
        let x0 = rng.random_range(0..=width - bw);
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                depth[y * width + x] = d;
                surface[y * width + x] = k + 1;
            }
        }
    }

    let tints: Vec<[f64; 3]> = (0..=n_boxes)
        .map(|_| {
            [
                rng.random_range(0.5..1.0),
                rng.random_range(0.5..1.0),
                rng.random_range(0.5..1.0),
            ]
        })
        .collect();
    let plane = height * width;
    let mut rgb = vec![0f32; 3 * plane];
    for i in 0..plane {
        let shade = 1.0 - 0.8 * (depth[i] - MIN_DEPTH) / (MAX_DEPTH - MIN_DEPTH);
        let tint = tints[surface[i]];
        for c in 0..3 {
            let noise: f64 = rng.random_range(-0.04..0.04);
            rgb[c * plane + i] = (shade * tint[c] + noise).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(Sample {
        rgb: Tensor::new(vec![3, height, width], rgb)?,
        depth: DepthMap::new(height, width, depth)?,
        id: format!("synth-{seed}"),
    })
}

/// Writes `count` synthetic scenes as 8-bit RGB and 16-bit millimeter depth
/// PNGs plus `manifest.csv`; returns the manifest path.
pub fn write_synthetic_dataset(dir: &Path, count: usize, seed: u64, height: usize, width: usize) -> Result<PathBuf> {
    for sub in ["rgb", "depth"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = String::new();
    for i in 0..count {
        let s = synth_scene(seed.wrapping_add(i as u64), height, width)?;
        let rgb_rel = format!("rgb/{i:05}.png");
        let depth_rel = format!("depth/{i:05}.png");
        let plane = height * width;
        let img: RgbImage = ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
            let j = y as usize * width + x as usize;
            let px = |c: usize| (s.rgb.data()[c * plane + j] * 255.0).round() as u8;
            Rgb([px(0), px(1), px(2)])
        });
        let path = dir.join(&rgb_rel);
        img.save(&path).map_err(|source| Error::Image { path, source })?;
        let depth: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
            let d = s.depth.values()[y as usize * width + x as usize];
            Luma([(d * 1000.0).round() as u16])
        });
        let path = dir.join(&depth_rel);
        depth.save(&path).map_err(|source| Error::Image { path, source })?;
        manifest.push_str(&format!("{rgb_rel},{depth_rel}\n"));
    }
    let path = dir.join("manifest.csv");
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(manifest.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}


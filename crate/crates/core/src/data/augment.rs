use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::tensor::Tensor;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent RNG stream for one `(seed, epoch, sample)` triple, so
/// augmentation does not depend on decode order.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(splitmix64(seed) ^ epoch) ^ index);
    ChaCha8Rng::seed_from_u64(key)
}

pub(crate) fn shuffle_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(seed ^ 0x5348_5546) ^ epoch))
}

/// Mirrors rgb and depth horizontally together.
pub fn flip_sample(sample: &Sample) -> Sample {
    let shape = sample.rgb.shape().to_vec();
    let w = shape[2];
    let mut data = sample.rgb.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    Sample {
        rgb: Tensor::new(shape, data).expect("same shape"),
        depth: sample.depth.flip_horizontal(),
        id: sample.id.clone(),
    }
}

/// Horizontal flip with probability 0.5. One draw decides for both rgb and
/// depth.
pub fn augment_flip<R: Rng>(sample: Sample, rng: &mut R) -> Sample {
    if rng.random_bool(0.5) {
        flip_sample(&sample)
    } else {
        sample
    }
}

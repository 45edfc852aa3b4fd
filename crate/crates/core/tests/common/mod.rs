//! Fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod oracle;

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use silora::backbone::{build_toy_backbone, BackboneBundle, BinaryMask, SoftMask, ToyBackboneConfig};
use silora::data::{synth_generate, ImageSample};

/// A backbone small enough to build and train in well under a second.
pub fn tiny_config() -> ToyBackboneConfig {
    ToyBackboneConfig {
        factor: 4,
        latent_channels: 4,
        attn_width: 8,
        prompt_dim: 6,
        prompt_len: 3,
        image_size: 16,
        calibration_images: 12,
    }
}

pub fn tiny_bundle() -> &'static BackboneBundle {
    static B: OnceLock<BackboneBundle> = OnceLock::new();
    B.get_or_init(|| build_toy_backbone(&tiny_config(), 5).unwrap())
}

pub fn default_bundle() -> &'static BackboneBundle {
    static B: OnceLock<BackboneBundle> = OnceLock::new();
    B.get_or_init(|| build_toy_backbone(&ToyBackboneConfig::default(), 0).unwrap())
}

pub fn tiny_samples(n: usize, seed: u64) -> Vec<ImageSample> {
    synth_generate(n, 16, seed).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mask pair with a random foreground density per mask.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let p: f64 = rng.random();
    BinaryMask::from_fn(h, w, |_, _| rng.random_bool(p)).unwrap()
}

/// Soft mask whose values come from a handful of random levels plus jitter, so
/// histograms are neither flat nor single-valued.
pub fn random_soft_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> SoftMask {
    let levels: Vec<f32> = (0..rng.random_range(2..5)).map(|_| rng.random()).collect();
    let data = (0..h * w)
        .map(|_| {
            let base = levels[rng.random_range(0..levels.len())];
            (base + rng.random_range(-0.05..0.05f32)).clamp(0.0, 1.0)
        })
        .collect();
    SoftMask::new(h, w, data).unwrap()
}

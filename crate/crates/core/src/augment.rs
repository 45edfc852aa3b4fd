//! Dual-space augmentation: MixUp on images and masks, Gaussian noise on the
//! encoded input latent.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{ImageGrid, LatentGrid, SoftMask};
use crate::data::ImageSample;
use crate::error::{Error, Result};

static DRAWS: AtomicU64 = AtomicU64::new(0);

/// Number of augmentation draws (λ samples and noise injections) made by this
/// process. Lets tests assert that evaluation never augments.
pub fn draw_count() -> u64 {
    DRAWS.load(Ordering::Relaxed)
}

fn note_draw() {
    DRAWS.fetch_add(1, Ordering::Relaxed);
}

/// A MixUp coefficient together with the Beta parameters it came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixCoefficient {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl MixCoefficient {
    pub fn fixed(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Argument(format!("λ = {lambda} outside [0, 1]")));
        }
        Ok(Self {
            lambda,
            alpha: f64::NAN,
            beta: f64::NAN,
        })
    }
}

/// Which augmentations run during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub mixup: bool,
    pub latent_noise: bool,
    pub beta: (f64, f64),
    pub sigma: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self::dual()
    }
}

impl AugmentPolicy {
    pub fn new(mixup: bool, latent_noise: bool) -> Self {
        Self {
            mixup,
            latent_noise,
            beta: (0.4, 0.4),
            sigma: 1.0,
        }
    }

    pub fn none() -> Self {
        Self::new(false, false)
    }

    pub fn dual() -> Self {
        Self::new(true, true)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.0 > 0.0 && self.beta.1 > 0.0) {
            return Err(Error::Config(format!(
                "augment.beta must be positive, got {:?}",
                self.beta
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "augment.sigma must be non-negative, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// `λ ~ Beta(α, β)`.
pub fn sample_lambda<R: Rng + ?Sized>(rng: &mut R, alpha: f64, beta: f64) -> Result<MixCoefficient> {
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::Argument(format!(
            "Beta parameters must be positive, got ({alpha}, {beta})"
        )));
    }
    let dist = Beta::new(alpha, beta).map_err(|e| Error::Argument(e.to_string()))?;
    note_draw();
    let lambda = dist.sample(rng).clamp(0.0, 1.0);
    Ok(MixCoefficient { lambda, alpha, beta })
}

/// `x′ = λx₁ + (1−λ)x₂`, `m′ = λm₁ + (1−λ)m₂`.
pub fn mixup(a: &ImageSample, b: &ImageSample, lambda: MixCoefficient) -> Result<(ImageGrid, SoftMask)> {
    let (h, w) = (a.image.height(), a.image.width());
    if (b.image.height(), b.image.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "cannot mix {}x{} with {}x{}",
            h,
            w,
            b.image.height(),
            b.image.width()
        )));
    }
    let l = lambda.lambda;
    let mix = |x: f32, y: f32| {
        let v = (l * f64::from(x) + (1.0 - l) * f64::from(y)) as f32;
        v.clamp(x.min(y), x.max(y))
    };
    let image = a
        .image
        .data()
        .iter()
        .zip(b.image.data())
        .map(|(&x, &y)| mix(x, y))
        .collect();
    let mask = a
        .mask
        .data()
        .iter()
        .zip(b.mask.data())
        .map(|(&x, &y)| mix(f32::from(x), f32::from(y)))
        .collect();
    Ok((ImageGrid::new(h, w, image)?, SoftMask::new(h, w, mask)?))
}

/// `z + σ·ε` with `ε` i.i.d. standard normal, fresh on every call.
pub fn inject_latent_noise<R: Rng + ?Sized>(z: &LatentGrid, sigma: f64, rng: &mut R) -> LatentGrid {
    note_draw();
    let mut out = z.clone();
    if sigma == 0.0 {
        return out;
    }
    for v in out.data_mut() {
        let eps: f64 = rng.sample(StandardNormal);
        *v = (f64::from(*v) + sigma * eps) as f32;
    }
    out
}

/// The image-space half of the augmentation. Pairs each sample with a partner
/// from a random permutation of the batch, with a fresh λ per pair.
pub fn augment_batch<R: Rng + ?Sized>(
    pairs: &[&ImageSample],
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<Vec<(ImageGrid, SoftMask)>> {
    if !policy.mixup {
        return Ok(pairs
            .iter()
            .map(|s| (s.image.clone(), SoftMask::from(&s.mask)))
            .collect());
    }
    if pairs.len() == 1 {
        log::debug!("mixup on a batch of one pairs {} with itself", pairs[0].id);
    }
    let mut partners: Vec<usize> = (0..pairs.len()).collect();
    partners.shuffle(rng);
    pairs
        .iter()
        .zip(&partners)
        .map(|(a, &j)| {
            let lambda = sample_lambda(rng, policy.beta.0, policy.beta.1)?;
            mixup(a, pairs[j], lambda)
        })
        .collect()
}

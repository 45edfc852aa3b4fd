//! Training objective, optimization loop, checkpoints and the prediction path.
//!
//! A step mixes the batch in image space, encodes it, adds latent noise, runs
//! one U-Net pass and regresses onto the encoding of the replicated (soft)
//! mask with a mean squared error. Only the adaptor factors move.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{augment_batch, inject_latent_noise, AugmentPolicy};
use crate::backbone::unet::{zero_grads, SiteFactors};
use crate::backbone::{
    decode, embed_prompt, encode, latent_to_mat, predict_latent, BackboneBundle, BinaryMask, ImageGrid, LatentGrid,
    PromptEmbedding, SoftMask,
};
use crate::codec::{read_file, write_file, Reader, Writer};
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::lora::{init_adaptor_set, AdaptorGrads, AdaptorSet};
use crate::maskops::{binarize, mask_to_rgb, otsu_threshold, rgb_to_mask, OTSU_BINS};
use crate::optim::{AdamW, AdamWConfig, Moments};
use crate::tensor::Mat;

/// Threshold used when the decoded prediction is too flat for Otsu.
pub const FALLBACK_THRESHOLD: f32 = 0.5;

pub const DEFAULT_PROMPT: &str = "segmentation map";

/// Hyperparameters of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub rank: usize,
    pub alpha: f32,
    pub prompt: String,
    pub image_size: usize,
    pub seed: u64,
    pub augment: AugmentPolicy,
    /// Emit an intermediate checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            batch_size: 2,
            epochs: 30,
            rank: 8,
            alpha: 8.0,
            prompt: DEFAULT_PROMPT.to_string(),
            image_size: 64,
            seed: 0,
            augment: AugmentPolicy::dual(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint as `(key, message)`.
    pub fn problems(&self) -> Vec<(String, String)> {
        let mut p = Vec::new();
        let mut bad = |k: &str, m: String| p.push((k.to_string(), m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            bad("train.lr", format!("must be a non-negative number, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            bad(
                "train.weight_decay",
                format!("must be non-negative, got {}", self.weight_decay),
            );
        }
        if self.batch_size == 0 {
            bad("train.batch_size", "must be positive".into());
        }
        if self.epochs == 0 {
            bad("train.epochs", "must be positive".into());
        }
        if self.rank == 0 {
            bad("lora.rank", "must be positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            bad("lora.alpha", format!("must be positive, got {}", self.alpha));
        }
        if self.prompt.is_empty() {
            bad("prompt", "must be nonempty".into());
        }
        if self.image_size == 0 {
            bad("data.image_size", "must be positive".into());
        }
        if !(self.augment.beta.0 > 0.0 && self.augment.beta.1 > 0.0) {
            bad(
                "augment.beta",
                format!("both parameters must be positive, got {:?}", self.augment.beta),
            );
        }
        if !(self.augment.sigma >= 0.0 && self.augment.sigma.is_finite()) {
            bad(
                "augment.sigma",
                format!("must be non-negative, got {}", self.augment.sigma),
            );
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            let msg: Vec<String> = p.iter().map(|(k, m)| format!("{k}: {m}")).collect();
            Err(Error::Config(msg.join("; ")))
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.batch_size) as u64
    }
}

/// The two augmentation streams. Mixing and noise draw from separate streams so
/// that toggling one augmentation leaves the other's draws unchanged.
#[derive(Clone, Debug)]
pub struct TrainRngs {
    pub mix: ChaCha8Rng,
    pub noise: ChaCha8Rng,
}

impl TrainRngs {
    pub fn from_seed(seed: u64) -> Self {
        let mut mix = ChaCha8Rng::seed_from_u64(seed);
        mix.set_stream(1);
        let mut noise = ChaCha8Rng::seed_from_u64(seed);
        noise.set_stream(2);
        Self { mix, noise }
    }

    fn positions(&self) -> (u128, u128) {
        (self.mix.get_word_pos(), self.noise.get_word_pos())
    }

    fn restore(seed: u64, (mix, noise): (u128, u128)) -> Self {
        let mut r = Self::from_seed(seed);
        r.mix.set_word_pos(mix);
        r.noise.set_word_pos(noise);
        r
    }
}

/// MSE between the U-Net output on `inputs` and `targets`, with gradients for
/// the factors. Reduction is the mean over batch and latent elements.
pub fn objective_with_factors(
    bundle: &BackboneBundle,
    factors: &SiteFactors,
    prompt: &PromptEmbedding,
    inputs: &[Mat],
    targets: &[Mat],
) -> Result<(f64, Vec<Option<crate::backbone::unet::FactorGrads>>)> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::Argument(format!(
            "{} inputs vs {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    let n = bundle.geometry().latent_size();
    let p = prompt.to_mat();
    let unet = bundle.unet();
    let mut grads = zero_grads(factors);
    let elements = (inputs.len() * inputs[0].as_slice().len()) as f64;
    let mut loss = 0.0;
    for (z, t) in inputs.iter().zip(targets) {
        if z.rows() != n * n || (z.rows(), z.cols()) != (t.rows(), t.cols()) {
            return Err(Error::Shape("latent batch does not match bundle geometry".into()));
        }
        let (out, cache) = unet.forward(z, &p, factors);
        let mut dout = Mat::zeros(out.rows(), out.cols());
        for ((d, &o), &tv) in dout.as_mut_slice().iter_mut().zip(out.as_slice()).zip(t.as_slice()) {
            let r = o - tv;
            loss += r * r;
            *d = 2.0 * r / elements;
        }
        unet.backward(&cache, &dout, factors, &mut grads);
    }
    bundle.note_unet_forwards(inputs.len() as u64);
    Ok((loss / elements, grads))
}

/// The U-Net output for one latent in 64-bit form, as the objective sees it.
pub fn unet_output(bundle: &BackboneBundle, factors: &SiteFactors, prompt: &PromptEmbedding, z: &Mat) -> Result<Mat> {
    let n = bundle.geometry().latent_size();
    if z.rows() != n * n || z.cols() != bundle.geometry().latent_channels {
        return Err(Error::Shape("latent does not match bundle geometry".into()));
    }
    bundle.note_unet_forwards(1);
    Ok(bundle.unet().forward(z, &prompt.to_mat(), factors).0)
}

/// [`objective_with_factors`] on 32-bit latents and a stored adaptor set.
pub fn objective(
    bundle: &BackboneBundle,
    adaptors: &AdaptorSet,
    prompt: &PromptEmbedding,
    inputs: &[LatentGrid],
    targets: &[LatentGrid],
) -> Result<(f64, AdaptorGrads)> {
    let factors = adaptors.factors_for(bundle)?;
    let zs: Vec<Mat> = inputs.iter().map(latent_to_mat).collect();
    let ts: Vec<Mat> = targets.iter().map(latent_to_mat).collect();
    let (loss, grads) = objective_with_factors(bundle, &factors, prompt, &zs, &ts)?;
    Ok((loss, AdaptorGrads::from_site_grads(grads)))
}

/// Mutable state of a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub adaptors: AdaptorSet,
    pub optimizer: AdamW,
    pub rngs: TrainRngs,
    pub step: u64,
    /// Loss of every completed step.
    pub losses: Vec<f64>,
    target_cache: HashMap<String, LatentGrid>,
}

impl TrainState {
    pub fn new(bundle: &BackboneBundle, cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            adaptors: init_adaptor_set(bundle, cfg.rank, cfg.alpha, cfg.seed)?,
            optimizer: AdamW::new(cfg.optimizer()),
            rngs: TrainRngs::from_seed(cfg.seed),
            step: 0,
            losses: Vec::new(),
            target_cache: HashMap::new(),
        })
    }
}

/// One optimization step on `batch`; returns the batch loss.
pub fn training_step(
    batch: &[&ImageSample],
    bundle: &BackboneBundle,
    prompt: &PromptEmbedding,
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    if !bundle.is_frozen() {
        return Err(Error::Config("training requires a frozen bundle".into()));
    }
    let policy = &cfg.augment;
    let mixed = augment_batch(batch, policy, &mut state.rngs.mix)?;

    let mut inputs = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for (sample, (x, m)) in batch.iter().zip(&mixed) {
        let z = encode(x, bundle)?;
        inputs.push(if policy.latent_noise {
            inject_latent_noise(&z, policy.sigma, &mut state.rngs.noise)
        } else {
            z
        });
        let target = if policy.mixup {
            encode(&mask_to_rgb(m), bundle)?
        } else if let Some(t) = state.target_cache.get(&sample.id) {
            t.clone()
        } else {
            let t = encode(&mask_to_rgb(m), bundle)?;
            state.target_cache.insert(sample.id.clone(), t.clone());
            t
        };
        targets.push(target);
    }

    let (loss, grads) = objective(bundle, &state.adaptors, prompt, &inputs, &targets)?;
    if !loss.is_finite() {
        let ids: Vec<&str> = batch.iter().map(|s| s.id.as_str()).collect();
        return Err(Error::Numerical(format!(
            "non-finite loss {loss} at step {} (seed {}, batch {ids:?})",
            state.step, cfg.seed
        )));
    }
    state.optimizer.step(&mut state.adaptors, &grads)?;
    state.step += 1;
    state.losses.push(loss);
    Ok(loss)
}

/// Sample order of one epoch; a pure function of seed, epoch and dataset size.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1_000 + epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Hash of the full sample order a run consumes.
pub fn data_order_hash(cfg: &TrainConfig, n: usize) -> String {
    let mut h = Sha256::new();
    for e in 0..cfg.epochs as u64 {
        for i in epoch_order(cfg.seed, e, n) {
            h.update((i as u64).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Mean loss of one completed epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Global step count at the end of the epoch.
    pub step: u64,
    pub loss: f64,
}

/// Epoch means from a per-step loss history.
pub fn epoch_losses(losses: &[f64], steps_per_epoch: u64) -> Vec<EpochLoss> {
    losses
        .chunks(steps_per_epoch as usize)
        .enumerate()
        .filter(|(_, c)| c.len() as u64 == steps_per_epoch)
        .map(|(e, c)| EpochLoss {
            epoch: e + 1,
            step: (e as u64 + 1) * steps_per_epoch,
            loss: c.iter().sum::<f64>() / c.len() as f64,
        })
        .collect()
}

/// Writes the `epoch,step,loss` CSV.
pub fn write_loss_csv(path: &Path, epochs: &[EpochLoss]) -> Result<()> {
    let mut out = String::from("epoch,step,loss\n");
    for e in epochs {
        out.push_str(&format!("{},{},{}\n", e.epoch, e.step, e.loss));
    }
    write_file(path, out.as_bytes())
}

/// Drives [`training_step`] over a dataset.
pub struct Trainer<'b> {
    bundle: &'b BackboneBundle,
    cfg: TrainConfig,
    bundle_hash: String,
    prompt: Arc<PromptEmbedding>,
    state: TrainState,
}

impl<'b> Trainer<'b> {
    pub fn new(bundle: &'b BackboneBundle, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let state = TrainState::new(bundle, &cfg)?;
        Ok(Self {
            bundle,
            prompt: embed_prompt(&cfg.prompt, bundle)?,
            bundle_hash: bundle.content_hash(),
            cfg,
            state,
        })
    }

    /// Continues a run from a checkpoint taken against the same bundle.
    pub fn resume(bundle: &'b BackboneBundle, ckpt: Checkpoint) -> Result<Self> {
        let bundle_hash = ckpt.verify_bundle(bundle)?;
        let cfg = ckpt.config;
        let rngs = TrainRngs::restore(cfg.seed, ckpt.rng_positions);
        let optimizer = AdamW::from_state(cfg.optimizer(), ckpt.optimizer_steps, ckpt.moments);
        Ok(Self {
            bundle,
            prompt: embed_prompt(&cfg.prompt, bundle)?,
            bundle_hash,
            state: TrainState {
                adaptors: ckpt.adaptors,
                optimizer,
                rngs,
                step: ckpt.step,
                losses: ckpt.losses,
                target_cache: HashMap::new(),
            },
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn adaptors(&self) -> &AdaptorSet {
        &self.state.adaptors
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        self.cfg.steps_per_epoch(n) * self.cfg.epochs as u64
    }

    /// Trains until `until_step` (or the configured number of epochs) is reached.
    /// `on_epoch` runs after each completed epoch.
    pub fn run(
        &mut self,
        dataset: &[ImageSample],
        until_step: Option<u64>,
        mut on_epoch: impl FnMut(&EpochLoss, &Trainer<'b>) -> Result<()>,
    ) -> Result<()> {
        if dataset.is_empty() {
            return Err(Error::Argument("cannot train on an empty dataset".into()));
        }
        let spe = self.cfg.steps_per_epoch(dataset.len());
        let end = until_step.unwrap_or(u64::MAX).min(self.total_steps(dataset.len()));
        let mut order = Vec::new();
        let mut order_epoch = u64::MAX;
        while self.state.step < end {
            let epoch = self.state.step / spe;
            if epoch != order_epoch {
                order = epoch_order(self.cfg.seed, epoch, dataset.len());
                order_epoch = epoch;
            }
            let pos = (self.state.step % spe) as usize * self.cfg.batch_size;
            let batch: Vec<&ImageSample> = order[pos..(pos + self.cfg.batch_size).min(order.len())]
                .iter()
                .map(|&i| &dataset[i])
                .collect();
            training_step(&batch, self.bundle, &self.prompt, &self.cfg, &mut self.state)?;
            if self.state.step.is_multiple_of(spe) {
                let done = epoch_losses(&self.state.losses, spe);
                let last = *done.last().expect("an epoch just finished");
                log::info!("epoch {} step {} loss {:.6}", last.epoch, last.step, last.loss);
                on_epoch(&last, self)?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            adaptors: self.state.adaptors.clone(),
            config: self.cfg.clone(),
            bundle_hash: self.bundle_hash.clone(),
            step: self.state.step,
            rng_positions: self.state.rngs.positions(),
            losses: self.state.losses.clone(),
            optimizer_steps: self.state.optimizer.steps(),
            moments: self.state.optimizer.moments().to_vec(),
        }
    }
}

/// Full training run with the configured number of epochs.
pub fn train(dataset: &[ImageSample], bundle: &BackboneBundle, cfg: &TrainConfig) -> Result<Checkpoint> {
    let mut t = Trainer::new(bundle, cfg.clone())?;
    t.run(dataset, None, |_, _| Ok(()))?;
    Ok(t.checkpoint())
}

const CKPT_MAGIC: &[u8] = b"SILORA-CK";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    bundle_hash: String,
    step: u64,
    rng_mix_word_pos: u128,
    rng_noise_word_pos: u128,
    optimizer_steps: u64,
    losses: Vec<f64>,
}

/// Everything needed to continue or reproduce a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub adaptors: AdaptorSet,
    pub config: TrainConfig,
    pub bundle_hash: String,
    pub step: u64,
    pub rng_positions: (u128, u128),
    pub losses: Vec<f64>,
    pub optimizer_steps: u64,
    pub moments: Vec<Moments>,
}

impl Checkpoint {
    pub fn epoch_losses(&self, n: usize) -> Vec<EpochLoss> {
        epoch_losses(&self.losses, self.config.steps_per_epoch(n))
    }

    /// Errors unless `bundle` is the one this checkpoint was trained against.
    pub fn verify_bundle(&self, bundle: &BackboneBundle) -> Result<String> {
        let hash = bundle.content_hash();
        if hash != self.bundle_hash {
            return Err(Error::Incompatible(format!(
                "checkpoint was trained against bundle {}, got {hash}",
                self.bundle_hash
            )));
        }
        Ok(hash)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            bundle_hash: self.bundle_hash.clone(),
            step: self.step,
            rng_mix_word_pos: self.rng_positions.0,
            rng_noise_word_pos: self.rng_positions.1,
            optimizer_steps: self.optimizer_steps,
            losses: self.losses.clone(),
        };
        let mut w = Writer::new(CKPT_MAGIC, CKPT_VERSION);
        w.bytes(&serde_json::to_vec(&meta).expect("checkpoint metadata serializes"));
        w.bytes(&self.adaptors.to_bytes());
        w.u32(self.moments.len() as u32);
        for m in &self.moments {
            w.str(&m.name);
            w.f64s(&m.m);
            w.f64s(&m.v);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (mut r, version) = Reader::open(bytes, CKPT_MAGIC, path)?;
        if version != CKPT_VERSION {
            return Err(Error::Incompatible(format!(
                "checkpoint format version {version}, expected {CKPT_VERSION}"
            )));
        }
        let meta: CheckpointMeta =
            serde_json::from_slice(r.bytes()?).map_err(|e| r.err(format!("bad metadata: {e}")))?;
        let adaptors = AdaptorSet::from_bytes(r.bytes()?, path)?;
        let n = r.u32()? as usize;
        let mut moments = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let name = r.str()?;
            let m = r.f64s()?;
            let v = r.f64s()?;
            moments.push(Moments { name, m, v });
        }
        r.finish()?;
        Ok(Self {
            adaptors,
            config: meta.config,
            bundle_hash: meta.bundle_hash,
            step: meta.step,
            rng_positions: (meta.rng_mix_word_pos, meta.rng_noise_word_pos),
            losses: meta.losses,
            optimizer_steps: meta.optimizer_steps,
            moments,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_file(path, &ckpt.to_bytes())
}

/// Loads a checkpoint and checks it against `bundle`; nothing is returned on mismatch.
pub fn load_checkpoint(path: &Path, bundle: &BackboneBundle) -> Result<Checkpoint> {
    let ckpt = Checkpoint::from_bytes(&read_file(path)?, path)?;
    ckpt.verify_bundle(bundle)?;
    Ok(ckpt)
}

/// Decoded soft mask: encode → U-Net → decode → channel mean. No augmentation.
pub fn predict_soft_mask(
    x: &ImageGrid,
    bundle: &BackboneBundle,
    adaptors: &AdaptorSet,
    prompt: &str,
) -> Result<SoftMask> {
    let p = embed_prompt(prompt, bundle)?;
    let z = encode(x, bundle)?;
    let zu = predict_latent(&z, &p, bundle, adaptors)?;
    Ok(rgb_to_mask(&decode(&zu, bundle)?))
}

/// Binary mask from a soft prediction by per-image Otsu, with the fixed
/// fallback when the prediction is flat.
pub fn threshold_prediction(soft: &SoftMask) -> BinaryMask {
    let thr = match otsu_threshold(soft, OTSU_BINS) {
        Ok(t) => t,
        Err(Error::Degenerate(why)) => {
            log::warn!("Otsu threshold undefined ({why}); using {FALLBACK_THRESHOLD}");
            FALLBACK_THRESHOLD
        }
        Err(e) => unreachable!("otsu with valid bins: {e}"),
    };
    binarize(soft, thr)
}

pub fn predict_mask(x: &ImageGrid, bundle: &BackboneBundle, adaptors: &AdaptorSet, prompt: &str) -> Result<BinaryMask> {
    Ok(threshold_prediction(&predict_soft_mask(x, bundle, adaptors, prompt)?))
}

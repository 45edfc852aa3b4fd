//! Frozen latent autoencoder, prompt embedder and single-step conditioned U-Net.
//!
//! [`BackboneBundle`] is the adapted model's fixed part. A deterministic toy
//! bundle for desk-scale runs comes from [`build_toy_backbone`]: its
//! autoencoder is fitted to a synthetic calibration set, its U-Net weights
//! are drawn from the seed, and the U-Net output projection is then fitted so
//! the base model reproduces its input latent on that set.

mod autoencoder;
mod grid;
pub mod unet;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use grid::{BinaryMask, ImageGrid, LatentGrid, SoftMask};

use crate::codec::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::lora::AdaptorSet;
use crate::maskops::mask_to_rgb;
use crate::tensor::{Mat, Tensor32};
use nalgebra::DMatrix;
use unet::{SiteFactors, UnetWeights, SITES};

/// Prompt the toy read-out is calibrated under.
const READOUT_PROMPT: &str = "photo";
const READOUT_RIDGE: f64 = 1e-3;

const BUNDLE_MAGIC: &[u8] = b"SILORA-BB";
const BUNDLE_VERSION: u32 = 1;

/// One attention projection that can carry a low-rank adaptor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

/// Shape record of a bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    /// Spatial reduction factor `f` of the autoencoder.
    pub factor: usize,
    pub latent_channels: usize,
    pub prompt_dim: usize,
    pub prompt_len: usize,
    pub attn_width: usize,
    /// Expected square input size in pixels.
    pub image_size: usize,
    /// Global multiplier bringing encoder outputs to unit variance.
    pub latent_scale: f32,
    pub prompt_seed: u64,
    pub sites: Vec<SiteSpec>,
}

impl Geometry {
    pub fn latent_size(&self) -> usize {
        self.image_size / self.factor
    }

    pub fn site(&self, name: &str) -> Option<&SiteSpec> {
        self.sites.iter().find(|s| s.name == name)
    }
}

/// Deterministic prompt embedding, `L × d_t` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    len: usize,
    dim: usize,
    data: Vec<f32>,
}

impl PromptEmbedding {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn to_mat(&self) -> Mat {
        Mat::from_f32(self.len, self.dim, &self.data)
    }
}

/// Knobs of the toy backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyBackboneConfig {
    pub factor: usize,
    pub latent_channels: usize,
    pub attn_width: usize,
    pub prompt_dim: usize,
    pub prompt_len: usize,
    pub image_size: usize,
    pub calibration_images: usize,
}

impl Default for ToyBackboneConfig {
    fn default() -> Self {
        Self {
            factor: 4,
            latent_channels: 4,
            attn_width: 32,
            prompt_dim: 32,
            prompt_len: 8,
            image_size: 64,
            calibration_images: 64,
        }
    }
}

impl ToyBackboneConfig {
    fn validate(&self) -> Result<()> {
        if ![2, 4, 8].contains(&self.factor) {
            return Err(Error::Config(format!(
                "reduction factor must be 2, 4 or 8, got {}",
                self.factor
            )));
        }
        let patch = self.factor * self.factor * 3;
        if self.latent_channels == 0 || self.latent_channels > patch {
            return Err(Error::Config(format!(
                "latent channels must be in 1..={patch}, got {}",
                self.latent_channels
            )));
        }
        if self.attn_width == 0 || self.prompt_dim == 0 || self.prompt_len == 0 {
            return Err(Error::Config(
                "attention width, prompt dim and prompt length must be positive".into(),
            ));
        }
        if self.calibration_images == 0 {
            return Err(Error::Config("calibration set must be nonempty".into()));
        }
        Ok(())
    }

    /// Image size actually used: the configured size rounded down to a multiple of `f`.
    fn calibration_size(&self) -> usize {
        (self.image_size / self.factor).max(1) * self.factor
    }
}

/// 64-bit working copies derived from the stored weights.
struct Compute {
    enc_w: Mat,
    enc_b: Vec<f64>,
    dec_w: Mat,
    dec_b: Vec<f64>,
    unet: UnetWeights,
}

/// The frozen backbone: encoder `E`, decoder `D`, prompt encoder `T` and base U-Net.
pub struct BackboneBundle {
    geometry: Geometry,
    weights: BTreeMap<String, Tensor32>,
    frozen: bool,
    compute: OnceLock<Compute>,
    prompt_cache: Mutex<HashMap<String, Arc<PromptEmbedding>>>,
    unet_forwards: AtomicU64,
}

impl std::fmt::Debug for BackboneBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackboneBundle")
            .field("geometry", &self.geometry)
            .field("weights", &self.weights.keys().collect::<Vec<_>>())
            .field("frozen", &self.frozen)
            .finish()
    }
}

fn required_shapes(g: &Geometry) -> Vec<(String, Vec<usize>)> {
    let p = g.factor * g.factor * 3;
    let (c, d) = (g.latent_channels, g.attn_width);
    let mut v = vec![
        ("encoder.weight".to_string(), vec![c, p]),
        ("encoder.bias".to_string(), vec![c]),
        ("decoder.weight".to_string(), vec![p, c]),
        ("decoder.bias".to_string(), vec![p]),
        ("unet.in.weight".to_string(), vec![d, c]),
        ("unet.in.bias".to_string(), vec![d]),
        ("unet.out.weight".to_string(), vec![c, d]),
        ("unet.out.bias".to_string(), vec![c]),
    ];
    for s in &g.sites {
        v.push((format!("{}.weight", s.name), vec![s.d_out, s.d_in]));
    }
    v
}

fn site_specs(d: usize, dt: usize) -> Vec<SiteSpec> {
    SITES
        .iter()
        .map(|&name| {
            let d_in = if name == "unet.cross_attn.k" || name == "unet.cross_attn.v" {
                dt
            } else {
                d
            };
            SiteSpec {
                name: name.to_string(),
                d_in,
                d_out: d,
            }
        })
        .collect()
}

impl BackboneBundle {
    /// Assembles a bundle from a geometry and its named weights, checking shapes.
    pub fn from_parts(geometry: Geometry, weights: BTreeMap<String, Tensor32>, frozen: bool) -> Result<Self> {
        let expected_sites = site_specs(geometry.attn_width, geometry.prompt_dim);
        if geometry.sites != expected_sites {
            return Err(Error::Config(
                "attention site list does not match the U-Net layout".into(),
            ));
        }
        if geometry.image_size == 0 || !geometry.image_size.is_multiple_of(geometry.factor) {
            return Err(Error::Config(format!(
                "image size {} is not a positive multiple of {}",
                geometry.image_size, geometry.factor
            )));
        }
        let required = required_shapes(&geometry);
        for (name, shape) in &required {
            match weights.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Shape(format!(
                        "weight {name}: expected {shape:?}, found {:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("missing weight {name}"))),
            }
        }
        if weights.len() != required.len() {
            return Err(Error::Config("unexpected extra weights in bundle".into()));
        }
        if weights.values().any(|t| t.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical("non-finite bundle weight".into()));
        }
        Ok(Self {
            geometry,
            weights,
            frozen,
            compute: OnceLock::new(),
            prompt_cache: Mutex::new(HashMap::new()),
            unet_forwards: AtomicU64::new(0),
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn weight(&self, name: &str) -> Option<&Tensor32> {
        self.weights.get(name)
    }

    /// Names of every stored weight array.
    pub fn weight_names(&self) -> impl Iterator<Item = &str> {
        self.weights.keys().map(String::as_str)
    }

    /// Mutable access for unfrozen bundles only.
    pub fn weight_mut(&mut self, name: &str) -> Result<&mut Tensor32> {
        if self.frozen {
            return Err(Error::Config(format!("bundle is frozen; cannot modify {name}")));
        }
        self.compute = OnceLock::new();
        self.weights
            .get_mut(name)
            .ok_or_else(|| Error::Argument(format!("no weight named {name}")))
    }

    /// Number of U-Net forward passes run through [`predict_latent`] so far.
    pub fn unet_forward_count(&self) -> u64 {
        self.unet_forwards.load(Ordering::Relaxed)
    }

    pub(crate) fn note_unet_forwards(&self, n: u64) {
        self.unet_forwards.fetch_add(n, Ordering::Relaxed);
    }

    fn compute(&self) -> &Compute {
        self.compute.get_or_init(|| {
            let m = |n: &str| self.weights[n].to_mat().expect("validated matrix");
            let v = |n: &str| self.weights[n].to_f64();
            Compute {
                enc_w: m("encoder.weight"),
                enc_b: v("encoder.bias"),
                dec_w: m("decoder.weight"),
                dec_b: v("decoder.bias"),
                unet: UnetWeights {
                    w_in: m("unet.in.weight"),
                    b_in: v("unet.in.bias"),
                    proj: SITES.iter().map(|s| m(&format!("{s}.weight"))).collect(),
                    w_out: m("unet.out.weight"),
                    b_out: v("unet.out.bias"),
                },
            }
        })
    }

    pub(crate) fn unet(&self) -> &UnetWeights {
        &self.compute().unet
    }

    /// Serialized bundle bytes (`SILORA-BB` container).
    pub fn to_bytes(&self) -> Vec<u8> {
        let g = &self.geometry;
        let mut w = Writer::new(BUNDLE_MAGIC, BUNDLE_VERSION);
        for v in [
            g.factor,
            g.latent_channels,
            g.prompt_dim,
            g.prompt_len,
            g.attn_width,
            g.image_size,
        ] {
            w.u32(v as u32);
        }
        w.f32(g.latent_scale);
        w.u64(g.prompt_seed);
        w.u32(g.sites.len() as u32);
        for s in &g.sites {
            w.str(&s.name);
            w.u32(s.d_in as u32);
            w.u32(s.d_out as u32);
        }
        w.u32(self.weights.len() as u32);
        for (name, t) in &self.weights {
            w.str(name);
            w.tensor(t);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (mut r, version) = Reader::open(bytes, BUNDLE_MAGIC, path)?;
        if version != BUNDLE_VERSION {
            return Err(Error::Incompatible(format!(
                "bundle format version {version}, expected {BUNDLE_VERSION}"
            )));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let latent_scale = r.f32()?;
        let prompt_seed = r.u64()?;
        let n_sites = r.u32()? as usize;
        let mut sites = Vec::with_capacity(n_sites.min(64));
        for _ in 0..n_sites {
            let name = r.str()?;
            let d_in = r.u32()? as usize;
            let d_out = r.u32()? as usize;
            sites.push(SiteSpec { name, d_in, d_out });
        }
        let n = r.u32()? as usize;
        let mut weights = BTreeMap::new();
        for _ in 0..n {
            let name = r.str()?;
            let t = r.tensor()?;
            weights.insert(name, t);
        }
        r.finish()?;
        let [factor, latent_channels, prompt_dim, prompt_len, attn_width, image_size] = dims;
        let geometry = Geometry {
            factor,
            latent_channels,
            prompt_dim,
            prompt_len,
            attn_width,
            image_size,
            latent_scale,
            prompt_seed,
            sites,
        };
        Self::from_parts(geometry, weights, true)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }

    /// Hex SHA-256 of the serialized bundle; checkpoints reference bundles by it.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    fn check_image(&self, x: &ImageGrid) -> Result<()> {
        let s = self.geometry.image_size;
        if x.height() != s || x.width() != s {
            return Err(Error::Shape(format!(
                "bundle expects {s}x{s} images, got {}x{}",
                x.height(),
                x.width()
            )));
        }
        Ok(())
    }

    fn check_latent(&self, z: &LatentGrid) -> Result<()> {
        let g = &self.geometry;
        let n = g.latent_size();
        if (z.channels(), z.height(), z.width()) != (g.latent_channels, n, n) {
            return Err(Error::Shape(format!(
                "bundle expects {n}x{n}x{} latents, got {}x{}x{}",
                g.latent_channels,
                z.height(),
                z.width(),
                z.channels()
            )));
        }
        Ok(())
    }

    pub(crate) fn encode_mat(&self, x: &ImageGrid) -> Result<Mat> {
        self.check_image(x)?;
        Ok(self.encode_unchecked(x))
    }

    fn encode_unchecked(&self, x: &ImageGrid) -> Mat {
        let c = self.compute();
        let patches = autoencoder::extract_patches(x, self.geometry.factor);
        let mut z = patches.matmul_t(&c.enc_w);
        z.add_row_bias(&c.enc_b);
        z.scale(f64::from(self.geometry.latent_scale));
        z
    }
}

fn latent_from_mat(m: &Mat, h: usize, w: usize) -> Result<LatentGrid> {
    LatentGrid::new(m.cols(), h, w, m.as_slice().iter().map(|&v| v as f32).collect())
}

pub(crate) fn latent_to_mat(z: &LatentGrid) -> Mat {
    Mat::from_f32(z.tokens(), z.channels(), z.data())
}

/// `z = E(x)`, scaled to unit variance on the calibration set.
pub fn encode(x: &ImageGrid, bundle: &BackboneBundle) -> Result<LatentGrid> {
    let z = bundle.encode_mat(x)?;
    let n = bundle.geometry.latent_size();
    latent_from_mat(&z, n, n)
}

/// `ŷ = D(z)`, clamped to `[0, 1]`.
pub fn decode(z: &LatentGrid, bundle: &BackboneBundle) -> Result<ImageGrid> {
    bundle.check_latent(z)?;
    let c = bundle.compute();
    let mut zm = latent_to_mat(z);
    zm.scale(1.0 / f64::from(bundle.geometry.latent_scale));
    let mut patches = zm.matmul_t(&c.dec_w);
    patches.add_row_bias(&c.dec_b);
    Ok(autoencoder::assemble_patches(
        &patches,
        z.height(),
        z.width(),
        bundle.geometry.factor,
    ))
}

/// `T(t)`: deterministic, cached per distinct prompt string.
pub fn embed_prompt(t: &str, bundle: &BackboneBundle) -> Result<Arc<PromptEmbedding>> {
    if t.is_empty() {
        return Err(Error::Argument("prompt must be nonempty".into()));
    }
    let mut cache = bundle.prompt_cache.lock().expect("prompt cache poisoned");
    if let Some(p) = cache.get(t) {
        return Ok(Arc::clone(p));
    }
    let g = &bundle.geometry;
    let digest = Sha256::digest(t.as_bytes());
    let word = u64::from_le_bytes(digest[..8].try_into().unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(word ^ g.prompt_seed);
    let data = (0..g.prompt_len * g.prompt_dim)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    let p = Arc::new(PromptEmbedding {
        len: g.prompt_len,
        dim: g.prompt_dim,
        data,
    });
    cache.insert(t.to_string(), Arc::clone(&p));
    Ok(p)
}

/// `U_θ(z, T(t))`: exactly one U-Net forward pass, no timestep loop.
pub fn predict_latent(
    z: &LatentGrid,
    p: &PromptEmbedding,
    bundle: &BackboneBundle,
    adaptors: &AdaptorSet,
) -> Result<LatentGrid> {
    bundle.check_latent(z)?;
    let g = &bundle.geometry;
    if (p.len(), p.dim()) != (g.prompt_len, g.prompt_dim) {
        return Err(Error::Shape(format!(
            "prompt embedding {}x{} does not match bundle {}x{}",
            p.len(),
            p.dim(),
            g.prompt_len,
            g.prompt_dim
        )));
    }
    let factors = adaptors.factors_for(bundle)?;
    bundle.note_unet_forwards(1);
    let (out, _) = bundle.unet().forward(&latent_to_mat(z), &p.to_mat(), &factors);
    latent_from_mat(&out, z.height(), z.width())
}

/// The synthetic images a toy bundle with this config and seed is calibrated on.
pub fn toy_calibration_set(cfg: &ToyBackboneConfig, seed: u64) -> Vec<crate::data::ImageSample> {
    crate::data::synth_generate(
        cfg.calibration_images,
        cfg.calibration_size(),
        seed ^ 0xCA11_B8A7_E5E7_0000,
    )
    .expect("calibration set size is positive")
}

/// Builds a frozen toy bundle whose weights are fully determined by `seed`.
pub fn build_toy_backbone(cfg: &ToyBackboneConfig, seed: u64) -> Result<BackboneBundle> {
    cfg.validate()?;
    let (f, c, d, dt) = (cfg.factor, cfg.latent_channels, cfg.attn_width, cfg.prompt_dim);
    let p = f * f * 3;

    // Autoencoder: principal patch subspace of calibration images and their masks.
    let calib = toy_calibration_set(cfg, seed);
    let image_patches: Vec<Mat> = calib
        .iter()
        .map(|s| autoencoder::extract_patches(&s.image, f))
        .collect();
    let mut corpus = image_patches.clone();
    corpus.extend(
        calib
            .iter()
            .map(|s| autoencoder::extract_patches(&mask_to_rgb(&SoftMask::from(&s.mask)), f)),
    );
    let (enc, mean) = autoencoder::fit_pca(&corpus, c);
    let enc_b: Vec<f64> = (0..c).map(|k| -crate::tensor::dot(enc.row(k), &mean)).collect();

    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for patches in &image_patches {
        let mut z = patches.matmul_t(&enc);
        z.add_row_bias(&enc_b);
        for v in z.as_slice() {
            sum += v;
            sum_sq += v * v;
        }
        count += z.as_slice().len();
    }
    let mean_z = sum / count as f64;
    let var = sum_sq / count as f64 - mean_z * mean_z;
    let latent_scale = (1.0 / var.sqrt()) as f32;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |rows: usize, cols: usize, std: f64| {
        let data = (0..rows * cols)
            .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
            .collect();
        Tensor32::new(vec![rows, cols], data).expect("shape matches")
    };

    let mut weights = BTreeMap::new();
    weights.insert("encoder.weight".into(), Tensor32::from_mat(&enc));
    weights.insert(
        "encoder.bias".into(),
        Tensor32::new(vec![c], enc_b.iter().map(|&v| v as f32).collect())?,
    );
    weights.insert("decoder.weight".into(), Tensor32::from_mat(&enc.transpose()));
    weights.insert(
        "decoder.bias".into(),
        Tensor32::new(vec![p], mean.iter().map(|&v| v as f32).collect())?,
    );
    weights.insert("unet.in.weight".into(), normal(d, c, (8.0 / c as f64).sqrt()));
    let b_in = normal(d, 1, 0.5);
    weights.insert("unet.in.bias".into(), Tensor32::new(vec![d], b_in.data().to_vec())?);
    let sites = site_specs(d, dt);
    for s in &sites {
        weights.insert(
            format!("{}.weight", s.name),
            normal(s.d_out, s.d_in, (1.0 / s.d_in as f64).sqrt()),
        );
    }
    weights.insert("unet.out.weight".into(), Tensor32::zeros(vec![c, d]));
    weights.insert("unet.out.bias".into(), Tensor32::zeros(vec![c]));

    let geometry = Geometry {
        factor: f,
        latent_channels: c,
        prompt_dim: dt,
        prompt_len: cfg.prompt_len,
        attn_width: d,
        image_size: cfg.calibration_size(),
        latent_scale,
        prompt_seed: rng.random(),
        sites,
    };
    let mut bundle = BackboneBundle::from_parts(geometry, weights, false)?;
    fit_readout(&mut bundle, &calib)?;
    bundle.freeze();
    Ok(bundle)
}

/// Fits the U-Net output projection by ridge regression so that the base
/// model maps each calibration latent back onto itself.
fn fit_readout(bundle: &mut BackboneBundle, calib: &[crate::data::ImageSample]) -> Result<()> {
    let prompt = embed_prompt(READOUT_PROMPT, bundle)?.to_mat();
    let (c, d) = (bundle.geometry.latent_channels, bundle.geometry.attn_width);
    let none: SiteFactors = vec![None; SITES.len()];
    let mut xtx = DMatrix::<f64>::zeros(d + 1, d + 1);
    let mut xty = DMatrix::<f64>::zeros(d + 1, c);
    let mut row = vec![1.0; d + 1];
    for s in calib {
        let z = latent_to_mat(&encode(&s.image, bundle)?);
        let hidden = bundle.unet().trunk(&z, &prompt, &none).hidden;
        for t in 0..hidden.rows() {
            row[..d].copy_from_slice(hidden.row(t));
            for i in 0..=d {
                for j in i..=d {
                    xtx[(i, j)] += row[i] * row[j];
                }
                for k in 0..c {
                    xty[(i, k)] += row[i] * z[(t, k)];
                }
            }
        }
    }
    for i in 0..=d {
        for j in 0..i {
            xtx[(i, j)] = xtx[(j, i)];
        }
        xtx[(i, i)] += READOUT_RIDGE;
    }
    let sol = xtx
        .cholesky()
        .ok_or_else(|| Error::Numerical("read-out normal equations are not positive definite".into()))?
        .solve(&xty);
    let w = bundle.weight_mut("unet.out.weight")?.data_mut();
    for k in 0..c {
        for i in 0..d {
            w[k * d + i] = sol[(i, k)] as f32;
        }
    }
    let b = bundle.weight_mut("unet.out.bias")?.data_mut();
    for (k, v) in b.iter_mut().enumerate() {
        *v = sol[(d, k)] as f32;
    }
    Ok(())
}

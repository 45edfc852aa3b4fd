//! Image/mask datasets: manifest-driven loading, the synthetic blade generator
//! and seeded train/test splitting.
//!
//! On-disk layout:
//!
//! ```text
//! <root>/manifest.csv      id,group,split
//! <root>/images/<id>.png   RGB (any PNG colour type is accepted)
//! <root>/masks/<id>.png    8-bit grey, 0 = background, 255 = blade
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{BinaryMask, ImageGrid};
use crate::error::{Error, Result};

/// Number of synthetic windfarm groups.
pub const SYNTH_GROUPS: usize = 5;

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub image: ImageGrid,
    pub mask: BinaryMask,
    pub id: String,
    /// Windfarm (site-of-origin) label.
    pub group: String,
}

impl ImageSample {
    pub fn new(image: ImageGrid, mask: BinaryMask, id: impl Into<String>, group: impl Into<String>) -> Result<Self> {
        let (id, group) = (id.into(), group.into());
        if (image.height(), image.width()) != (mask.height(), mask.width()) {
            return Err(Error::Shape(format!(
                "sample {id}: image {}x{} vs mask {}x{}",
                image.height(),
                image.width(),
                mask.height(),
                mask.width()
            )));
        }
        if group.is_empty() {
            return Err(Error::Data(format!("sample {id}: empty group label")));
        }
        Ok(Self { image, mask, id, group })
    }
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub group: String,
    pub split: String,
}

/// Parsed `manifest.csv` of a dataset root.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join("manifest.csv");
        let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let headers = reader
            .headers()
            .map_err(|e| Error::format(&path, e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["id", "group", "split"] {
            return Err(Error::format(&path, "header must be `id,group,split`"));
        }
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for row in reader.deserialize::<ManifestRecord>() {
            let rec = row.map_err(|e| Error::format(&path, e.to_string()))?;
            if !seen.insert(rec.id.clone()) {
                return Err(Error::Data(format!("duplicate id {} in {}", rec.id, path.display())));
            }
            records.push(rec);
        }
        Ok(Self {
            root: root.to_path_buf(),
            records,
        })
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join("images").join(format!("{id}.png"))
    }

    pub fn mask_path(&self, id: &str) -> PathBuf {
        self.root.join("masks").join(format!("{id}.png"))
    }
}

/// Options for [`load_dataset`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadOptions {
    /// Square size every image and mask is resized to.
    pub image_size: usize,
    /// Map grey mask values `>= 128` to foreground instead of rejecting them.
    pub tolerate_gray: bool,
}

/// Loads every record of `split`, in manifest order.
pub fn load_dataset(root: &Path, split: &str, opts: LoadOptions) -> Result<Vec<ImageSample>> {
    let manifest = DatasetManifest::read(root)?;
    manifest
        .records
        .iter()
        .filter(|r| r.split == split)
        .map(|r| load_record(&manifest, r, opts))
        .collect()
}

fn load_record(manifest: &DatasetManifest, rec: &ManifestRecord, opts: LoadOptions) -> Result<ImageSample> {
    let id = &rec.id;
    let img_path = manifest.image_path(id);
    let mask_path = manifest.mask_path(id);
    for p in [&img_path, &mask_path] {
        if !p.is_file() {
            return Err(Error::Data(format!("record {id}: missing file {}", p.display())));
        }
    }
    let rgb = image::open(&img_path)
        .map_err(|e| Error::Data(format!("record {id}: cannot decode {}: {e}", img_path.display())))?
        .to_rgb8();
    let grey = image::open(&mask_path)
        .map_err(|e| Error::Data(format!("record {id}: cannot decode {}: {e}", mask_path.display())))?
        .to_luma8();
    if rgb.width() == 0 || rgb.height() == 0 || grey.width() == 0 || grey.height() == 0 {
        return Err(Error::Data(format!("record {id}: zero-sized image or mask")));
    }
    let mask = mask_from_grey(&grey, opts.tolerate_gray).map_err(|e| Error::Data(format!("record {id}: {e}")))?;
    let image = image_from_rgb(&resize_rgb(&rgb, opts.image_size));
    let mask = resize_mask_nearest(&mask, opts.image_size, opts.image_size);
    ImageSample::new(image, mask, id.clone(), rec.group.clone())
}

/// Maps `{0, 255}` to `{0, 1}`; other values are rejected unless `tolerate_gray`.
pub fn mask_from_grey(grey: &GrayImage, tolerate_gray: bool) -> Result<BinaryMask> {
    let mut data = Vec::with_capacity(grey.as_raw().len());
    for &v in grey.as_raw() {
        let bit = match v {
            0 => 0,
            255 => 1,
            v if tolerate_gray => u8::from(v >= 128),
            v => {
                return Err(Error::Data(format!(
                    "mask value {v} is neither 0 nor 255 (use --tolerate-gray to threshold at 128)"
                )))
            }
        };
        data.push(bit);
    }
    BinaryMask::new(grey.height() as usize, grey.width() as usize, data)
}

pub fn mask_to_grey(m: &BinaryMask) -> GrayImage {
    let data = m.data().iter().map(|&v| v * 255).collect();
    GrayImage::from_raw(m.width() as u32, m.height() as u32, data).expect("buffer size matches")
}

pub fn image_from_rgb(rgb: &RgbImage) -> ImageGrid {
    let data = rgb.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
    ImageGrid::new(rgb.height() as usize, rgb.width() as usize, data).expect("u8 values map into [0, 1]")
}

pub fn image_to_rgb(x: &ImageGrid) -> RgbImage {
    let data = x.data().iter().map(|&v| (v * 255.0).round() as u8).collect();
    RgbImage::from_raw(x.width() as u32, x.height() as u32, data).expect("buffer size matches")
}

/// Bilinear (triangle-filter) resize to a square; identity when already sized.
fn resize_rgb(rgb: &RgbImage, size: usize) -> RgbImage {
    if rgb.width() as usize == size && rgb.height() as usize == size {
        return rgb.clone();
    }
    image::imageops::resize(rgb, size as u32, size as u32, FilterType::Triangle)
}

/// Nearest-neighbour resize; the value set never grows.
pub fn resize_mask_nearest(m: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    BinaryMask::from_fn(height, width, |y, x| {
        let sy = ((y as f64 + 0.5) * m.height() as f64 / height as f64).floor() as usize;
        let sx = ((x as f64 + 0.5) * m.width() as f64 / width as f64).floor() as usize;
        m.get(sy.min(m.height() - 1), sx.min(m.width() - 1))
    })
    .expect("nonzero target size")
}

/// Writes samples in the standard layout; `splits[i]` is the split of `samples[i]`.
pub fn write_dataset(root: &Path, samples: &[ImageSample], splits: &[&str]) -> Result<()> {
    if samples.len() != splits.len() {
        return Err(Error::Argument("one split label per sample required".into()));
    }
    for dir in ["images", "masks"] {
        let p = root.join(dir);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let manifest_path = root.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest_path).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    for (s, split) in samples.iter().zip(splits) {
        let ip = root.join("images").join(format!("{}.png", s.id));
        image_to_rgb(&s.image)
            .save(&ip)
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", ip.display())))?;
        let mp = root.join("masks").join(format!("{}.png", s.id));
        mask_to_grey(&s.mask)
            .save(&mp)
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", mp.display())))?;
        w.serialize(ManifestRecord {
            id: s.id.clone(),
            group: s.group.clone(),
            split: split.to_string(),
        })
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&manifest_path, e))
}

/// Seeded shuffle, then partition by `(train, test)` fractions.
pub fn split_dataset(
    samples: Vec<ImageSample>,
    fractions: (f64, f64),
    seed: u64,
) -> Result<(Vec<ImageSample>, Vec<ImageSample>)> {
    let (ft, fe) = fractions;
    if ft < 0.0 || fe < 0.0 || ((ft + fe) - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!(
            "split fractions must be non-negative and sum to 1, got ({ft}, {fe})"
        )));
    }
    let n = samples.len();
    let n_train = (n as f64 * ft).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Argument(format!(
            "fractions ({ft}, {fe}) leave an empty split for {n} samples"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<ImageSample>> = samples.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<ImageSample> {
        idx.iter().map(|&i| slots[i].take().expect("each index once")).collect()
    };
    let train = take(&order[..n_train]);
    let test = take(&order[n_train..]);
    Ok((train, test))
}

type Rgb = [f32; 3];

struct Palette {
    top: Rgb,
    bottom: Rgb,
}

const PALETTES: [Palette; SYNTH_GROUPS] = [
    Palette {
        top: [0.12, 0.26, 0.55],
        bottom: [0.40, 0.56, 0.78],
    },
    Palette {
        top: [0.32, 0.35, 0.40],
        bottom: [0.50, 0.52, 0.56],
    },
    Palette {
        top: [0.22, 0.17, 0.36],
        bottom: [0.56, 0.40, 0.40],
    },
    Palette {
        top: [0.28, 0.42, 0.62],
        bottom: [0.22, 0.36, 0.20],
    },
    Palette {
        top: [0.36, 0.45, 0.55],
        bottom: [0.52, 0.58, 0.64],
    },
];

/// Convex quadrilateral, corners in order.
#[derive(Clone, Copy, Debug)]
struct Quad([(f64, f64); 4]);

impl Quad {
    fn contains(&self, x: f64, y: f64) -> bool {
        let mut sign = 0.0f64;
        for k in 0..4 {
            let (ax, ay) = self.0[k];
            let (bx, by) = self.0[(k + 1) % 4];
            let cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
            if cross != 0.0 {
                if sign != 0.0 && cross.signum() != sign {
                    return false;
                }
                sign = cross.signum();
            }
        }
        true
    }
}

struct Blade {
    quad: Quad,
    hub: (f64, f64),
    dir: (f64, f64),
    length: f64,
    shade: f32,
}

fn random_blades(rng: &mut ChaCha8Rng, size: f64) -> Vec<Blade> {
    let count = rng.random_range(1..=3usize);
    let hub = (rng.random_range(0.25..0.75) * size, rng.random_range(0.25..0.75) * size);
    let start = rng.random_range(0.0..std::f64::consts::TAU);
    (0..count)
        .map(|k| {
            let theta = start + k as f64 * std::f64::consts::TAU / 3.0 + rng.random_range(-0.15..0.15);
            let dir = (theta.cos(), theta.sin());
            let normal = (-dir.1, dir.0);
            let length = rng.random_range(0.35..0.65) * size;
            let root = rng.random_range(0.06..0.10) * size;
            let tip = rng.random_range(0.02..0.04) * size;
            let at = |t: f64, w: f64| (hub.0 + t * dir.0 + w * normal.0, hub.1 + t * dir.1 + w * normal.1);
            Blade {
                quad: Quad([at(0.0, root), at(length, tip), at(length, -tip), at(0.0, -root)]),
                hub,
                dir,
                length,
                shade: rng.random_range(0.82..0.95),
            }
        })
        .collect()
}

fn synth_sample(index: usize, size: usize, seed: u64) -> Result<ImageSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let group = index % SYNTH_GROUPS;
    let pal = &PALETTES[group];
    let jitter: Rgb = std::array::from_fn(|_| rng.random_range(-0.04..0.04));
    let wave = (
        rng.random_range(1.0..3.0),
        rng.random_range(1.0..3.0),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let s = size as f64;

    let (blades, mask) = loop {
        let blades = random_blades(&mut rng, s);
        let mask = BinaryMask::from_fn(size, size, |y, x| {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            blades.iter().any(|b| b.quad.contains(px, py))
        })?;
        let fg = mask.foreground_fraction();
        if fg > 0.02 && fg < 0.6 {
            break (blades, mask);
        }
    };

    let noise = Normal::new(0.0f32, 0.02).expect("valid std");
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = (py / s) as f32;
            let cloud = (0.04
                * ((wave.0 * px / s * std::f64::consts::TAU + wave.2).sin()
                    * (wave.1 * py / s * std::f64::consts::TAU).cos())) as f32;
            let mut rgb: Rgb =
                std::array::from_fn(|c| pal.top[c] + (pal.bottom[c] - pal.top[c]) * t + jitter[c] + cloud);
            if mask.get(y, x) {
                let blade = blades
                    .iter()
                    .find(|b| b.quad.contains(px, py))
                    .expect("mask pixel lies in a blade");
                let along = ((px - blade.hub.0) * blade.dir.0 + (py - blade.hub.1) * blade.dir.1) / blade.length;
                let v = blade.shade * (1.0 - 0.08 * along.clamp(0.0, 1.0) as f32);
                rgb = [v, v, v * 0.98];
            }
            for c in rgb {
                data.push((c + noise.sample(&mut rng)).clamp(0.0, 1.0));
            }
        }
    }
    let image = ImageGrid::new(size, size, data)?;
    ImageSample::new(
        image,
        mask,
        format!("synth-{index:05}"),
        format!("windfarm-{}", group + 1),
    )
}

/// Synthetic blade images over sky-gradient backgrounds, round-robin over
/// [`SYNTH_GROUPS`] groups. Each mask is the exact blade rasterization used to
/// paint its image.
pub fn synth_generate(n: usize, size: usize, seed: u64) -> Result<Vec<ImageSample>> {
    if n == 0 {
        return Err(Error::Argument("need at least one sample".into()));
    }
    if size < 8 {
        return Err(Error::Argument(format!("image size {size} is too small")));
    }
    (0..n).map(|i| synth_sample(i, size, seed)).collect()
}

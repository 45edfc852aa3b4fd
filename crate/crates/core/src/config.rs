//! Run configuration: a TOML file read as flat dotted keys.
//!
//! ```toml
//! seed = 7
//! prompt = "segmentation map"
//! train.lr = 1e-4
//! train.epochs = 30
//! lora.rank = 8
//! augment.beta = [0.4, 0.4]
//! data.root = "data/synth"
//! ```
//!
//! Nested tables are accepted too; `[train]\nlr = 1e-4` is the same key as
//! `train.lr`. Every problem in a file is reported in one error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::augment::AugmentPolicy;
use crate::backbone::ToyBackboneConfig;
use crate::codec::read_file;
use crate::data::LoadOptions;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

/// Where the data lives and how it is loaded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub train_split: String,
    pub test_split: String,
    pub tolerate_gray: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            train_split: "train".into(),
            test_split: "test".into(),
            tolerate_gray: false,
        }
    }
}

/// Which backbone a run adapts: a saved bundle, or the toy one built from a seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub path: Option<PathBuf>,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
}

impl RunConfig {
    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            image_size: self.train.image_size,
            tolerate_gray: self.data.tolerate_gray,
        }
    }

    pub fn toy_backbone(&self) -> ToyBackboneConfig {
        ToyBackboneConfig {
            image_size: self.train.image_size,
            ..ToyBackboneConfig::default()
        }
    }

    pub fn data_root(&self) -> Result<&Path> {
        self.data
            .root
            .as_deref()
            .ok_or_else(|| Error::Config("data.root: required key is missing".into()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = String::from_utf8(read_file(path)?).map_err(|_| Error::format(path, "not UTF-8"))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Parses and validates; `data.root` is required.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("not valid TOML: {}", e.message())))?;
        let mut flat = BTreeMap::new();
        flatten("", &table, &mut flat);
        Self::from_flat(&flat)
    }

    pub fn from_flat(flat: &BTreeMap<String, Value>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut errors: Vec<String> = Vec::new();
        for (key, v) in flat {
            if let Err(msg) = cfg.set(key, v) {
                errors.push(format!("{key}: {msg}"));
            }
        }
        if cfg.data.root.is_none() {
            errors.push("data.root: required key is missing".into());
        }
        errors.extend(cfg.train.problems().into_iter().map(|(k, m)| format!("{k}: {m}")));
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors.join("; ")))
        }
    }

    fn set(&mut self, key: &str, v: &Value) -> std::result::Result<(), String> {
        let t = &mut self.train;
        match key {
            "seed" => t.seed = uint(v)?,
            "prompt" => t.prompt = string(v)?,
            "train.lr" => t.lr = float(v)?,
            "train.weight_decay" => t.weight_decay = float(v)?,
            "train.batch_size" => t.batch_size = uint(v)? as usize,
            "train.epochs" => t.epochs = uint(v)? as usize,
            "train.checkpoint_every" => t.checkpoint_every = uint(v)? as usize,
            "lora.rank" => t.rank = uint(v)? as usize,
            "lora.alpha" => t.alpha = float(v)? as f32,
            "augment.mixup" => t.augment.mixup = boolean(v)?,
            "augment.latent_noise" => t.augment.latent_noise = boolean(v)?,
            "augment.beta" => t.augment.beta = pair(v)?,
            "augment.sigma" => t.augment.sigma = float(v)?,
            "data.root" => self.data.root = Some(PathBuf::from(string(v)?)),
            "data.image_size" => t.image_size = uint(v)? as usize,
            "data.train_split" => self.data.train_split = string(v)?,
            "data.test_split" => self.data.test_split = string(v)?,
            "data.tolerate_gray" => self.data.tolerate_gray = boolean(v)?,
            "backbone.path" => self.backbone.path = Some(PathBuf::from(string(v)?)),
            "backbone.seed" => self.backbone.seed = uint(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// The regime-specific copy used by the ablation.
    pub fn with_policy(&self, mixup: bool, latent_noise: bool) -> Self {
        let mut c = self.clone();
        c.train.augment = AugmentPolicy {
            mixup,
            latent_noise,
            ..self.train.augment.clone()
        };
        c
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn float(v: &Value) -> std::result::Result<f64, String> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        other => Err(format!("expected a number, got {}", other.type_str())),
    }
}

fn uint(v: &Value) -> std::result::Result<u64, String> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        Value::Integer(i) => Err(format!("expected a non-negative integer, got {i}")),
        other => Err(format!("expected an integer, got {}", other.type_str())),
    }
}

fn string(v: &Value) -> std::result::Result<String, String> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| format!("expected a string, got {}", v.type_str()))
}

fn boolean(v: &Value) -> std::result::Result<bool, String> {
    v.as_bool()
        .ok_or_else(|| format!("expected true or false, got {}", v.type_str()))
}

fn pair(v: &Value) -> std::result::Result<(f64, f64), String> {
    match v.as_array().map(Vec::as_slice) {
        Some([a, b]) => Ok((float(a)?, float(b)?)),
        _ => Err("expected a two-element array".into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_protocol() {
        let c = RunConfig::from_toml("data.root = \"d\"").unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.train.weight_decay, 1e-2);
        assert_eq!(c.train.batch_size, 2);
        assert_eq!(c.train.epochs, 30);
        assert_eq!(c.train.rank, 8);
        assert_eq!(c.train.prompt, "segmentation map");
    }

    #[test]
    fn dotted_and_nested_keys_agree() {
        let a = RunConfig::from_toml("data.root = \"d\"\ntrain.lr = 0.01\naugment.beta = [0.2, 0.3]").unwrap();
        let b = RunConfig::from_toml("[data]\nroot = \"d\"\n[train]\nlr = 0.01\n[augment]\nbeta = [0.2, 0.3]").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.augment.beta, (0.2, 0.3));
    }

    #[test]
    fn missing_root_is_named() {
        let e = RunConfig::from_toml("seed = 3").unwrap_err().to_string();
        assert!(e.contains("data.root"), "{e}");
    }

    #[test]
    fn all_problems_reported_together() {
        let e = RunConfig::from_toml("train.lr = \"fast\"\ntrain.batch_size = 0\nbogus = 1\naugment.sigma = -1")
            .unwrap_err()
            .to_string();
        for key in ["train.lr", "train.batch_size", "bogus", "augment.sigma", "data.root"] {
            assert!(e.contains(key), "{key} missing from {e}");
        }
    }

    #[test]
    fn policy_override_keeps_parameters() {
        let c = RunConfig::from_toml("data.root = \"d\"\naugment.sigma = 0.5").unwrap();
        let p = c.with_policy(false, true).train.augment;
        assert!(!p.mixup && p.latent_noise);
        assert_eq!(p.sigma, 0.5);
    }
}

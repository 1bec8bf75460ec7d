//! Run configuration: a flat TOML file with strictly validated keys,
//! command-line overrides, and per-value provenance.
//!
//! Recognised keys (defaults in parentheses):
//!
//! - `epochs` (400), `lr` (1e-4), `lr_neg` (1e-4), `decay_start` (200)
//! - `crop` (256), `negatives` (256), `queries` (64), `tau` (0.07)
//! - `lambda1`..`lambda5` (1, 1, 0.1, 1e-3, 1e-2)
//! - `negative_source` ("adversarial" | "random_sampled")
//! - `dual_cycle` ("on" | "off")
//! - `seed` (0)
//! - `base_width` (64), `disc_width` (64), `resblocks` (9),
//!   `taps` ([1,5,9,13,17]), `embed_dim` (256), `noise_dim` (16)
//! - `dc_radius` (7), `max_steps` (0 = unlimited),
//!   `checkpoint_interval` (0 = final only), `threads` (0 = all cores)
//! - `data.hazy_dir`, `data.clean_dir`, `out_dir` (required for training)
//!
//! Unknown keys are rejected by name. Overrides (`key=value`) win over file
//! values, which win over defaults; the provenance of every key is kept.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::GeneratorSpec;

/// Where the negative bank comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeSource {
    /// Trained negative generators (the adversarial path).
    Adversarial,
    /// Projections of other spatial locations of the input features.
    RandomSampled,
}

/// Where a config value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Default,
    File,
    Override,
}

/// Full training configuration.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_neg: f64,
    pub decay_start: usize,
    pub crop: usize,
    pub negatives: usize,
    pub queries: usize,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub negative_source: NegativeSource,
    pub dual_cycle: bool,
    pub seed: u64,
    pub base_width: usize,
    pub disc_width: usize,
    pub resblocks: usize,
    pub taps: Vec<usize>,
    pub embed_dim: usize,
    pub noise_dim: usize,
    pub dc_radius: usize,
    pub max_steps: u64,
    pub checkpoint_interval: u64,
    pub threads: usize,
    pub hazy_dir: PathBuf,
    pub clean_dir: PathBuf,
    pub out_dir: PathBuf,
    provenance: BTreeMap<String, Provenance>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 400,
            lr: 1e-4,
            lr_neg: 1e-4,
            decay_start: 200,
            crop: 256,
            negatives: 256,
            queries: 64,
            tau: 0.07,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.1,
            lambda4: 1e-3,
            lambda5: 1e-2,
            negative_source: NegativeSource::Adversarial,
            dual_cycle: true,
            seed: 0,
            base_width: 64,
            disc_width: 64,
            resblocks: 9,
            taps: vec![1, 5, 9, 13, 17],
            embed_dim: 256,
            noise_dim: 16,
            dc_radius: 7,
            max_steps: 0,
            checkpoint_interval: 0,
            threads: 0,
            hazy_dir: PathBuf::new(),
            clean_dir: PathBuf::new(),
            out_dir: PathBuf::new(),
            provenance: BTreeMap::new(),
        }
    }
}

const KEYS: &[&str] = &[
    "epochs",
    "lr",
    "lr_neg",
    "decay_start",
    "crop",
    "negatives",
    "queries",
    "tau",
    "lambda1",
    "lambda2",
    "lambda3",
    "lambda4",
    "lambda5",
    "negative_source",
    "dual_cycle",
    "seed",
    "base_width",
    "disc_width",
    "resblocks",
    "taps",
    "embed_dim",
    "noise_dim",
    "dc_radius",
    "max_steps",
    "checkpoint_interval",
    "threads",
    "data.hazy_dir",
    "data.clean_dir",
    "out_dir",
];

fn as_usize(key: &str, v: &toml::Value) -> Result<usize> {
    v.as_integer()
        .filter(|&i| i >= 0)
        .map(|i| i as usize)
        .ok_or_else(|| Error::Config(format!("key `{key}` must be a non-negative integer")))
}

fn as_u64(key: &str, v: &toml::Value) -> Result<u64> {
    v.as_integer()
        .filter(|&i| i >= 0)
        .map(|i| i as u64)
        .ok_or_else(|| Error::Config(format!("key `{key}` must be a non-negative integer")))
}

fn as_f64(key: &str, v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(Error::Config(format!("key `{key}` must be a number"))),
    }
}

fn as_str<'v>(key: &str, v: &'v toml::Value) -> Result<&'v str> {
    v.as_str()
        .ok_or_else(|| Error::Config(format!("key `{key}` must be a string")))
}

fn as_taps(key: &str, v: &toml::Value) -> Result<Vec<usize>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::Config(format!("key `{key}` must be an array of integers")))?;
    arr.iter().map(|e| as_usize(key, e)).collect()
}

impl TrainConfig {
    /// Parse a TOML file, then apply `key=value` overrides.
    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    /// Parse TOML text, then apply `key=value` overrides.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        let mut cfg = TrainConfig::default();
        for (key, value) in &table {
            if key == "data" {
                let sub = value
                    .as_table()
                    .ok_or_else(|| Error::Config("`data` must be a table".into()))?;
                for (k, v) in sub {
                    cfg.set(&format!("data.{k}"), v, Provenance::File)?;
                }
            } else {
                cfg.set(key, value, Provenance::File)?;
            }
        }
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{ov}` must be key=value")))?;
            let value = parse_override_value(key.trim(), raw.trim())?;
            cfg.set(key.trim(), &value, Provenance::Override)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &toml::Value, src: Provenance) -> Result<()> {
        match key {
            "epochs" => self.epochs = as_usize(key, v)?,
            "lr" => self.lr = as_f64(key, v)?,
            "lr_neg" => self.lr_neg = as_f64(key, v)?,
            "decay_start" => self.decay_start = as_usize(key, v)?,
            "crop" => self.crop = as_usize(key, v)?,
            "negatives" => self.negatives = as_usize(key, v)?,
            "queries" => self.queries = as_usize(key, v)?,
            "tau" => self.tau = as_f64(key, v)?,
            "lambda1" => self.lambda1 = as_f64(key, v)?,
            "lambda2" => self.lambda2 = as_f64(key, v)?,
            "lambda3" => self.lambda3 = as_f64(key, v)?,
            "lambda4" => self.lambda4 = as_f64(key, v)?,
            "lambda5" => self.lambda5 = as_f64(key, v)?,
            "negative_source" => {
                self.negative_source = match as_str(key, v)? {
                    "adversarial" => NegativeSource::Adversarial,
                    "random_sampled" => NegativeSource::RandomSampled,
                    other => {
                        return Err(Error::Config(format!(
                            "negative_source must be `adversarial` or `random_sampled`, got `{other}`"
                        )))
                    }
                }
            }
            "dual_cycle" => {
                self.dual_cycle = match as_str(key, v)? {
                    "on" => true,
                    "off" => false,
                    other => {
                        return Err(Error::Config(format!(
                            "dual_cycle must be `on` or `off`, got `{other}`"
                        )))
                    }
                }
            }
            "seed" => self.seed = as_u64(key, v)?,
            "base_width" => self.base_width = as_usize(key, v)?,
            "disc_width" => self.disc_width = as_usize(key, v)?,
            "resblocks" => self.resblocks = as_usize(key, v)?,
            "taps" => self.taps = as_taps(key, v)?,
            "embed_dim" => self.embed_dim = as_usize(key, v)?,
            "noise_dim" => self.noise_dim = as_usize(key, v)?,
            "dc_radius" => self.dc_radius = as_usize(key, v)?,
            "max_steps" => self.max_steps = as_u64(key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = as_u64(key, v)?,
            "threads" => self.threads = as_usize(key, v)?,
            "data.hazy_dir" => self.hazy_dir = PathBuf::from(as_str(key, v)?),
            "data.clean_dir" => self.clean_dir = PathBuf::from(as_str(key, v)?),
            "out_dir" => self.out_dir = PathBuf::from(as_str(key, v)?),
            unknown => {
                return Err(Error::Config(format!("unknown config key `{unknown}`")));
            }
        }
        self.provenance.insert(key.to_string(), src);
        Ok(())
    }

    /// Where the value of `key` came from.
    pub fn provenance(&self, key: &str) -> Provenance {
        if !KEYS.contains(&key) {
            return Provenance::Default; // unknown keys never get this far
        }
        *self.provenance.get(key).unwrap_or(&Provenance::Default)
    }

    /// Structural validation; data-path presence is checked separately by
    /// [`TrainConfig::validate_for_train`].
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.lr <= 0.0 || self.lr_neg <= 0.0 {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if self.decay_start > self.epochs {
            return Err(Error::Config("decay_start must be <= epochs".into()));
        }
        if self.crop < 32 || self.crop % 4 != 0 {
            return Err(Error::Config(
                "crop must be >= 32 and divisible by 4".into(),
            ));
        }
        if self.negatives < 1 {
            return Err(Error::Config("negatives must be >= 1".into()));
        }
        if self.queries < 1 || self.embed_dim < 1 || self.noise_dim < 1 {
            return Err(Error::Config(
                "queries, embed_dim and noise_dim must be >= 1".into(),
            ));
        }
        self.loss_weights().validate().map_err(to_config)?;
        self.generator_spec().validate().map_err(to_config)?;
        // every tap grid must offer enough distinct sample locations
        let min_cells = self
            .taps
            .iter()
            .map(|&t| {
                let s = self.generator_spec().tap_scale(t);
                (self.crop / s) * (self.crop / s)
            })
            .min()
            .unwrap_or(0);
        let needed = match self.negative_source {
            NegativeSource::Adversarial => self.queries,
            NegativeSource::RandomSampled => self.queries + self.negatives,
        };
        if needed > min_cells {
            return Err(Error::Config(format!(
                "queries{} exceed the smallest tap grid ({min_cells} cells)",
                if self.negative_source == NegativeSource::RandomSampled {
                    " + negatives"
                } else {
                    ""
                }
            )));
        }
        Ok(())
    }

    /// Additional requirements for `train`: data directories and output.
    pub fn validate_for_train(&self) -> Result<()> {
        self.validate()?;
        if self.hazy_dir.as_os_str().is_empty() || self.clean_dir.as_os_str().is_empty() {
            return Err(Error::Config(
                "data.hazy_dir and data.clean_dir are required".into(),
            ));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::Config("out_dir is required".into()));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            lambda4: self.lambda4,
            lambda5: self.lambda5,
            tau: self.tau,
        }
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            base_width: self.base_width,
            resblocks: self.resblocks,
            taps: self.taps.clone(),
        }
    }

    /// Hash of the architecture-determining fields; stored in checkpoint
    /// manifests and verified on resume.
    pub fn spec_hash(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "bw={};dw={};rb={};taps={:?};ed={};nd={}",
            self.base_width,
            self.disc_width,
            self.resblocks,
            self.taps,
            self.embed_dim,
            self.noise_dim
        );
        let mut hasher = Sha256::new();
        hasher.update(s.as_bytes());
        hex_string(&hasher.finalize())
    }
}

fn to_config(e: Error) -> Error {
    Error::Config(e.to_string())
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Parse an override string into the TOML value shape its key expects.
fn parse_override_value(key: &str, raw: &str) -> Result<toml::Value> {
    if !KEYS.contains(&key) {
        return Err(Error::Config(format!("unknown config key `{key}`")));
    }
    let value = match key {
        "lr" | "lr_neg" | "tau" | "lambda1" | "lambda2" | "lambda3" | "lambda4" | "lambda5" => {
            toml::Value::Float(raw.parse::<f64>().map_err(|_| {
                Error::Config(format!("override for `{key}` must be a number, got `{raw}`"))
            })?)
        }
        "negative_source" | "dual_cycle" | "data.hazy_dir" | "data.clean_dir" | "out_dir" => {
            toml::Value::String(raw.to_string())
        }
        "taps" => {
            let items: Result<Vec<toml::Value>> = raw
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<i64>()
                        .map(toml::Value::Integer)
                        .map_err(|_| {
                            Error::Config(format!(
                                "override for `taps` must be comma-separated integers"
                            ))
                        })
                })
                .collect();
            toml::Value::Array(items?)
        }
        _ => toml::Value::Integer(raw.parse::<i64>().map_err(|_| {
            Error::Config(format!("override for `{key}` must be an integer, got `{raw}`"))
        })?),
    };
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_documented_defaults() {
        let cfg = TrainConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(cfg.lr, 1e-4);
        assert_eq!(cfg.negatives, 256);
        assert_eq!(cfg.tau, 0.07);
        assert_eq!(cfg.epochs, 400);
        assert_eq!(cfg.decay_start, 200);
        assert_eq!(cfg.taps, vec![1, 5, 9, 13, 17]);
        assert_eq!(cfg.lambda3, 0.1);
        assert!(cfg.dual_cycle);
        assert_eq!(cfg.negative_source, NegativeSource::Adversarial);
        assert_eq!(cfg.provenance("lr"), Provenance::Default);
        assert_eq!(cfg.provenance("negatives"), Provenance::Default);
    }

    #[test]
    fn override_beats_file_beats_default() {
        let cfg = TrainConfig::from_toml_str(
            "negatives = 128\nlr = 0.0002",
            &["negatives=64".to_string()],
        )
        .unwrap();
        assert_eq!(cfg.negatives, 64);
        assert_eq!(cfg.lr, 2e-4);
        assert_eq!(cfg.provenance("negatives"), Provenance::Override);
        assert_eq!(cfg.provenance("lr"), Provenance::File);
        assert_eq!(cfg.provenance("tau"), Provenance::Default);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::from_toml_str("negitives = 64", &[]).unwrap_err();
        assert!(err.to_string().contains("negitives"), "{err}");
        let err = TrainConfig::from_toml_str("", &["negitives=64".to_string()]).unwrap_err();
        assert!(err.to_string().contains("negitives"), "{err}");
    }

    #[test]
    fn type_and_value_errors() {
        assert!(TrainConfig::from_toml_str("epochs = \"many\"", &[]).is_err());
        assert!(TrainConfig::from_toml_str("epochs = 0", &[]).is_err());
        assert!(TrainConfig::from_toml_str("tau = 0.0", &[]).is_err());
        assert!(TrainConfig::from_toml_str("crop = 30", &[]).is_err());
        assert!(TrainConfig::from_toml_str("negative_source = \"magic\"", &[]).is_err());
        assert!(TrainConfig::from_toml_str("dual_cycle = \"maybe\"", &[]).is_err());
        // taps beyond the encoder depth
        assert!(TrainConfig::from_toml_str("resblocks = 4", &[]).is_err());
        assert!(
            TrainConfig::from_toml_str("resblocks = 4\ntaps = [1, 5, 9, 13]", &[]).is_ok()
        );
    }

    #[test]
    fn data_paths_table_and_dotted() {
        let cfg = TrainConfig::from_toml_str(
            "data.hazy_dir = \"/tmp/h\"\ndata.clean_dir = \"/tmp/c\"\nout_dir = \"/tmp/o\"",
            &[],
        )
        .unwrap();
        assert_eq!(cfg.hazy_dir, PathBuf::from("/tmp/h"));
        assert!(cfg.validate_for_train().is_ok());

        let cfg2 = TrainConfig::from_toml_str("[data]\nhazy_dir = \"/a\"\nclean_dir = \"/b\"", &[])
            .unwrap();
        assert_eq!(cfg2.hazy_dir, PathBuf::from("/a"));
        assert!(cfg2.validate_for_train().is_err()); // out_dir missing

        let cfg3 = TrainConfig::from_toml_str(
            "",
            &["data.hazy_dir=/x".to_string(), "out_dir=/y".to_string()],
        )
        .unwrap();
        assert_eq!(cfg3.hazy_dir, PathBuf::from("/x"));
        assert_eq!(cfg3.provenance("data.hazy_dir"), Provenance::Override);
    }

    #[test]
    fn spec_hash_tracks_architecture() {
        let a = TrainConfig::from_toml_str("", &[]).unwrap();
        let b = TrainConfig::from_toml_str("base_width = 32", &[]).unwrap();
        let c = TrainConfig::from_toml_str("lr = 0.5", &[]).unwrap();
        assert_ne!(a.spec_hash(), b.spec_hash());
        assert_eq!(a.spec_hash(), c.spec_hash()); // lr is not architectural
    }

    #[test]
    fn query_budget_checked_against_tap_grid() {
        // crop 32 -> deepest tap grid 8x8 = 64 cells
        let ok = TrainConfig::from_toml_str("crop = 32\nqueries = 64", &[]);
        assert!(ok.is_ok());
        let too_many = TrainConfig::from_toml_str("crop = 32\nqueries = 65", &[]);
        assert!(too_many.is_err());
        // random_sampled also reserves bank locations
        let random = TrainConfig::from_toml_str(
            "crop = 32\nqueries = 32\nnegatives = 33\nnegative_source = \"random_sampled\"",
            &[],
        );
        assert!(random.is_err());
    }
}

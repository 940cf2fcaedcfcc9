//! Run configuration as flat `key = value` text.
//!
//! Every key has a typed default. Parsing rejects unknown keys, duplicate
//! keys and out-of-range values. [`RunConfig::to_text`] writes every key in
//! a fixed order, so `parse(to_text(c)) == c` and the hash of that text
//! identifies a resolved configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{DomainSpec, GeneratorConfig};
use crate::domains::StyleSettings;
use crate::meta::{GradientOrder, Hyperparams, OptimizerKind};
use crate::model::Architecture;
use crate::style::ClusterMethod;

pub const SEED_ENV: &str = "PDL_SEED";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("duplicate config key {0:?}")]
    Duplicate(String),
    #[error("{key}: cannot parse {value:?}: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// How training domains are labeled each epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Clustered feature statistics.
    #[default]
    Pseudo,
    /// The generator's domain ids (diagnostic baseline).
    GeneratorTruth,
    /// Pooled ERM without meta-learning.
    Single,
}

impl FromStr for LabelMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pseudo" => Ok(Self::Pseudo),
            "generator-truth" => Ok(Self::GeneratorTruth),
            "single" => Ok(Self::Single),
            other => Err(format!("unknown mode {other:?} (expected pseudo|generator-truth|single)")),
        }
    }
}

impl fmt::Display for LabelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pseudo => "pseudo",
            Self::GeneratorTruth => "generator-truth",
            Self::Single => "single",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub n_domains: usize,
    pub per_domain_batch: usize,
    pub epochs: usize,
    /// 0 means one pass over the training set per epoch.
    pub steps_per_epoch: usize,
    pub optimizer: OptimizerKind,
    pub gradient_order: GradientOrder,
    pub mode: LabelMode,
    pub held_out_domain: usize,
    pub cluster_method: ClusterMethod,
    pub pca_dim: usize,
    pub image_size: usize,
    pub depth_size: usize,
    pub conv_layers: usize,
    pub base_width: usize,
    pub taps: Vec<usize>,
    pub head_hidden: usize,
    pub depth_width: usize,
    pub per_domain: usize,
    pub live_fraction: f64,
    pub generator_domains: usize,
    /// Epoch interval between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            alpha: 0.001,
            beta: 0.001,
            n_domains: 3,
            per_domain_batch: 7,
            epochs: 8,
            steps_per_epoch: 0,
            optimizer: OptimizerKind::Sgd,
            gradient_order: GradientOrder::First,
            mode: LabelMode::Pseudo,
            held_out_domain: 0,
            cluster_method: ClusterMethod::Kmeans,
            pca_dim: 256,
            image_size: 32,
            depth_size: 16,
            conv_layers: 9,
            base_width: 16,
            taps: vec![5, 9],
            head_hidden: 32,
            depth_width: 16,
            per_domain: 200,
            live_fraction: 0.5,
            generator_domains: 4,
            checkpoint_every: 1,
            threads: 1,
        }
    }
}

/// Keys in serialization order.
pub const KEYS: &[&str] = &[
    "seed",
    "alpha",
    "beta",
    "n_domains",
    "per_domain_batch",
    "epochs",
    "steps_per_epoch",
    "optimizer",
    "gradient_order",
    "mode",
    "held_out_domain",
    "cluster_method",
    "pca_dim",
    "image_size",
    "depth_size",
    "conv_layers",
    "base_width",
    "taps",
    "head_hidden",
    "depth_width",
    "per_domain",
    "live_fraction",
    "generator_domains",
    "checkpoint_every",
    "threads",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| parse_value::<usize>(key, v.trim()))
        .collect()
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "alpha" => self.alpha = parse_value(key, v)?,
            "beta" => self.beta = parse_value(key, v)?,
            "n_domains" => self.n_domains = parse_value(key, v)?,
            "per_domain_batch" => self.per_domain_batch = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "steps_per_epoch" => self.steps_per_epoch = parse_value(key, v)?,
            "optimizer" => self.optimizer = parse_value(key, v)?,
            "gradient_order" => self.gradient_order = parse_value(key, v)?,
            "mode" => self.mode = parse_value(key, v)?,
            "held_out_domain" => self.held_out_domain = parse_value(key, v)?,
            "cluster_method" => self.cluster_method = parse_value(key, v)?,
            "pca_dim" => self.pca_dim = parse_value(key, v)?,
            "image_size" => self.image_size = parse_value(key, v)?,
            "depth_size" => self.depth_size = parse_value(key, v)?,
            "conv_layers" => self.conv_layers = parse_value(key, v)?,
            "base_width" => self.base_width = parse_value(key, v)?,
            "taps" => self.taps = parse_list(key, v)?,
            "head_hidden" => self.head_hidden = parse_value(key, v)?,
            "depth_width" => self.depth_width = parse_value(key, v)?,
            "per_domain" => self.per_domain = parse_value(key, v)?,
            "live_fraction" => self.live_fraction = parse_value(key, v)?,
            "generator_domains" => self.generator_domains = parse_value(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, v)?,
            "threads" => self.threads = parse_value(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    /// Text form of one key. Floats use the shortest round-tripping representation.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "alpha" => format!("{:?}", self.alpha),
            "beta" => format!("{:?}", self.beta),
            "n_domains" => self.n_domains.to_string(),
            "per_domain_batch" => self.per_domain_batch.to_string(),
            "epochs" => self.epochs.to_string(),
            "steps_per_epoch" => self.steps_per_epoch.to_string(),
            "optimizer" => self.optimizer.to_string(),
            "gradient_order" => self.gradient_order.to_string(),
            "mode" => self.mode.to_string(),
            "held_out_domain" => self.held_out_domain.to_string(),
            "cluster_method" => self.cluster_method.to_string(),
            "pca_dim" => self.pca_dim.to_string(),
            "image_size" => self.image_size.to_string(),
            "depth_size" => self.depth_size.to_string(),
            "conv_layers" => self.conv_layers.to_string(),
            "base_width" => self.base_width.to_string(),
            "taps" => self.taps.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(","),
            "head_hidden" => self.head_hidden.to_string(),
            "depth_width" => self.depth_width.to_string(),
            "per_domain" => self.per_domain.to_string(),
            "live_fraction" => format!("{:?}", self.live_fraction),
            "generator_domains" => self.generator_domains.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "threads" => self.threads.to_string(),
            _ => return None,
        })
    }

    /// Parses text starting from defaults. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.into(),
                });
            };
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(ConfigError::Duplicate(k.into()));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    /// SHA-256 of [`RunConfig::to_text`], first 16 hex digits.
    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.to_text().as_bytes())[..8])
    }

    /// Replaces the seed with `PDL_SEED` when that variable is set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = parse_value(SEED_ENV, v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be finite and > 0, got {}", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be finite and > 0, got {}", self.beta));
        }
        if self.mode != LabelMode::Single && self.n_domains < 2 {
            return bad(format!("n_domains must be >= 2 for meta-learning, got {}", self.n_domains));
        }
        if self.per_domain_batch < 2 {
            return bad(format!("per_domain_batch must be >= 2, got {}", self.per_domain_batch));
        }
        if self.per_domain < 2 {
            return bad(format!("per_domain must be >= 2, got {}", self.per_domain));
        }
        if !(self.live_fraction > 0.0 && self.live_fraction < 1.0) {
            return bad(format!("live_fraction must be in (0,1), got {}", self.live_fraction));
        }
        let max_domains = DomainSpec::defaults().len();
        if self.generator_domains < 2 || self.generator_domains > max_domains {
            return bad(format!(
                "generator_domains must be in 2..={max_domains}, got {}",
                self.generator_domains
            ));
        }
        if self.held_out_domain >= self.generator_domains {
            return bad(format!(
                "held_out_domain {} outside 0..{}",
                self.held_out_domain, self.generator_domains
            ));
        }
        if self.pca_dim == 0 {
            return bad("pca_dim must be >= 1".into());
        }
        if self.threads == 0 {
            return bad("threads must be >= 1".into());
        }
        self.architecture()
            .validate()
            .or_else(|e| bad(e.to_string()))?;
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            in_channels: 6,
            image_size: self.image_size,
            conv_layers: self.conv_layers,
            base_width: self.base_width,
            taps: self.taps.clone(),
            head_hidden: self.head_hidden,
            depth_size: self.depth_size,
            depth_width: self.depth_width,
        }
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            domains: DomainSpec::defaults().into_iter().take(self.generator_domains).collect(),
            per_domain: self.per_domain,
            live_fraction: self.live_fraction,
            image_size: self.image_size,
            depth_size: self.depth_size,
            seed: self.seed,
        }
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            alpha: self.alpha,
            beta: self.beta,
            n_domains: self.n_domains,
            per_domain_batch: self.per_domain_batch,
            epochs: self.epochs,
            seed: self.seed,
        }
    }

    pub fn style_settings(&self) -> StyleSettings {
        StyleSettings {
            n_domains: self.n_domains,
            method: self.cluster_method,
            pca_dim: self.pca_dim,
            threads: self.threads,
        }
    }
}

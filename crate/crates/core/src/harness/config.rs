//! Flat `key = value` pipeline configuration.
//!
//! ```text
//! # desk-scale run
//! preset = desk
//! scales = 3
//! pool = nfk
//! svm_lambda = auto
//! ```
//!
//! A `preset` line resets every key to that preset, so it belongs first.
//! Later lines and command-line overrides win.

use std::path::{Path, PathBuf};

use crate::error::{config, Error, Result};
use crate::pooling::Strategy;
use crate::pyramid::ScaleStep;

pub const CACHE_ENV: &str = "MPP_CACHE_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    /// `toy` for the built-in toy network, else a network file or manifest.
    pub net: String,
    pub net_seed: u64,
    pub scales: usize,
    pub scale_step: ScaleStep,
    /// l2-normalize raw activations before PCA.
    pub descriptor_l2: bool,
    pub pca_dim: usize,
    pub pca_whiten: bool,
    pub pca_samples: usize,
    pub gmm_k: usize,
    pub gmm_samples: usize,
    pub gmm_max_iter: usize,
    pub pool: Strategy,
    /// `None` means cross-validated.
    pub svm_lambda: Option<f64>,
    /// Manifest path or `synth:<kind>:train=N:test=M:seed=S`.
    pub dataset: String,
    pub cache_dir: Option<PathBuf>,
}

pub const KEYS: [&str; 16] = [
    "seed",
    "net",
    "net_seed",
    "scales",
    "scale_step",
    "descriptor_l2",
    "pca_dim",
    "pca_whiten",
    "pca_samples",
    "gmm_k",
    "gmm_samples",
    "gmm_max_iter",
    "pool",
    "svm_lambda",
    "dataset",
    "cache_dir",
];

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::desk_defaults()
    }
}

impl PipelineConfig {
    /// Small enough for a laptop: toy network, 3 octave scales, PCA 16, K 8.
    pub fn desk_defaults() -> Self {
        Self {
            seed: 0,
            net: "toy".into(),
            net_seed: 0,
            scales: 3,
            scale_step: ScaleStep::Octave,
            descriptor_l2: false,
            pca_dim: 16,
            pca_whiten: false,
            pca_samples: 100_000,
            gmm_k: 8,
            gmm_samples: 100_000,
            gmm_max_iter: 200,
            pool: Strategy::Mpp,
            svm_lambda: None,
            dataset: "synth:noise-fine-scale:train=300:test=300:seed=0".into(),
            cache_dir: None,
        }
    }

    /// Full-size setting: 7 half-octave scales, PCA 128, K 256. Needs a
    /// network file whose descriptors have at least 128 dimensions.
    pub fn full_defaults() -> Self {
        Self {
            net: "net.mppn".into(),
            scales: 7,
            scale_step: ScaleStep::HalfOctave,
            pca_dim: 128,
            gmm_k: 256,
            pca_samples: 1_000_000,
            gmm_samples: 1_000_000,
            ..Self::desk_defaults()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk_defaults()),
            "full" => Ok(Self::full_defaults()),
            _ => config(format!("unknown preset `{name}` (desk, full)")),
        }
    }

    /// Length of one Fisher vector, `2 K d`.
    pub fn fv_len(&self) -> usize {
        2 * self.gmm_k * self.pca_dim
    }

    /// Pooled representation length for the configured strategy.
    pub fn representation_len(&self) -> usize {
        self.pool.payload_len(self.gmm_k, self.pca_dim, self.scales)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = |what: &str| Error::Config(format!("`{key}` expects {what}, got `{v}`"));
        let uint = || v.parse::<u64>().map_err(|_| bad("a non-negative integer"));
        let count = || {
            v.parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| bad("a positive integer"))
        };
        let flag = || match v {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            _ => Err(bad("true or false")),
        };
        match key {
            "preset" => *self = Self::preset(v)?,
            "seed" => self.seed = uint()?,
            "net" => self.net = v.to_string(),
            "net_seed" => self.net_seed = uint()?,
            "scales" => self.scales = count()?,
            "scale_step" => self.scale_step = ScaleStep::parse(v)?,
            "descriptor_l2" => self.descriptor_l2 = flag()?,
            "pca_dim" => self.pca_dim = count()?,
            "pca_whiten" => self.pca_whiten = flag()?,
            "pca_samples" => self.pca_samples = count()?,
            "gmm_k" => self.gmm_k = count()?,
            "gmm_samples" => self.gmm_samples = count()?,
            "gmm_max_iter" => self.gmm_max_iter = count()?,
            "pool" => self.pool = Strategy::parse(v)?,
            "svm_lambda" => {
                self.svm_lambda = match v {
                    "auto" => None,
                    _ => Some(
                        v.parse::<f64>()
                            .ok()
                            .filter(|l| *l > 0.0 && l.is_finite())
                            .ok_or_else(|| bad("`auto` or a positive number"))?,
                    ),
                }
            }
            "dataset" => self.dataset = v.to_string(),
            "cache_dir" => self.cache_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => return config(format!("unknown config key `{key}`")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "net" => self.net.clone(),
            "net_seed" => self.net_seed.to_string(),
            "scales" => self.scales.to_string(),
            "scale_step" => self.scale_step.name().to_string(),
            "descriptor_l2" => self.descriptor_l2.to_string(),
            "pca_dim" => self.pca_dim.to_string(),
            "pca_whiten" => self.pca_whiten.to_string(),
            "pca_samples" => self.pca_samples.to_string(),
            "gmm_k" => self.gmm_k.to_string(),
            "gmm_samples" => self.gmm_samples.to_string(),
            "gmm_max_iter" => self.gmm_max_iter.to_string(),
            "pool" => self.pool.name().to_string(),
            "svm_lambda" => self
                .svm_lambda
                .map_or("auto".to_string(), |l| format!("{l:e}")),
            "dataset" => self.dataset.clone(),
            "cache_dir" => self
                .cache_dir
                .as_ref()
                .map_or(String::new(), |p| p.display().to_string()),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return config(format!("config line {}: expected `key = value`", no + 1));
            };
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("config line {}: {e}", no + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::desk_defaults();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key in a fixed order; parses back to an equal config.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    pub fn echo(&self) -> std::collections::BTreeMap<String, String> {
        KEYS.iter()
            .filter(|&&k| k != "cache_dir")
            .map(|&k| (k.to_string(), self.get(k).unwrap_or_default()))
            .collect()
    }

    /// Config value, then the environment, then `.mpp-cache`.
    pub fn resolved_cache_dir(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .or_else(|| {
                std::env::var_os(CACHE_ENV)
                    .filter(|v| !v.is_empty())
                    .map(PathBuf::from)
            })
            .unwrap_or_else(|| PathBuf::from(".mpp-cache"))
    }
}

//! Experiment configuration: one sectioned TOML file per experiment whose keys
//! mirror the reference hyperparameter list.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{InitConfig, KMeansConfig};
use crate::nn::AdamWConfig;
use crate::quantizer::CodebookUpdate;
use crate::synth::{GaussianMixtureSpec, MeanLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// VQ-VAE from scratch, codebook from the untrained encoder.
    BaselineVq,
    /// Continuous autoencoder, no quantization.
    AePretrain,
    /// Autoencoder pretraining, then VQ fine-tuning with a codebook from the pretrained encoder.
    DeferredVq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub num_components: usize,
    pub points_per_component: usize,
    pub dim: usize,
    pub std: f64,
    pub separation: f64,
    pub layout: MeanLayout,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            num_components: 10,
            points_per_component: 1000,
            dim: 2,
            std: 1.0,
            separation: 5.0,
            layout: MeanLayout::Diagonal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden_dim: usize,
    /// Defaults to the data dimension.
    pub latent_dim: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            latent_dim: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerSection {
    pub codebook_size: usize,
    pub beta: f64,
    pub decay: f64,
    pub codebook_update: CodebookUpdate,
}

impl Default for QuantizerSection {
    fn default() -> Self {
        Self {
            codebook_size: 128,
            beta: 0.25,
            decay: 0.9,
            codebook_update: CodebookUpdate::Ema,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitSection {
    pub embedding_ratio: f64,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    pub kmeans_restarts: usize,
    pub initial_count: f64,
}

impl Default for InitSection {
    fn default() -> Self {
        Self {
            embedding_ratio: 10.0,
            kmeans_max_iters: 100,
            kmeans_tol: 1e-6,
            kmeans_restarts: 10,
            initial_count: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub regime: Regime,
    /// VQ epochs (baseline, deferred fine-tuning) or autoencoder epochs (ae_pretrain).
    pub epochs: usize,
    /// Autoencoder epochs run first by `deferred_vq` when no checkpoint is given.
    pub ae_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub pretrained_checkpoint: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            regime: Regime::BaselineVq,
            epochs: 200,
            ae_epochs: 100,
            batch_size: 256,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            pretrained_checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSection {
    pub histogram_bins: usize,
    /// Fraction of reconstructions a component needs to count as covered.
    pub coverage_threshold: f64,
    /// Points used for the pairwise reconstruction distance (exact below this).
    pub pairwise_sample: usize,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            histogram_bins: 50,
            coverage_threshold: 0.001,
            pairwise_sample: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub quantizer: QuantizerSection,
    pub init: InitSection,
    pub train: TrainSection,
    pub diagnostics: DiagnosticsSection,
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| {
            let key = e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or("<document>")
                .to_string();
            Error::config(key, e.to_string().trim_end().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config; a relative `pretrained_checkpoint` resolves against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let (Some(ckpt), Some(dir)) = (&cfg.train.pretrained_checkpoint, path.parent()) {
            if ckpt.is_relative() {
                cfg.train.pretrained_checkpoint = Some(dir.join(ckpt));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: usize| {
            if v == 0 {
                Err(Error::config(key, "must be >= 1"))
            } else {
                Ok(())
            }
        };
        positive("data.num_components", self.data.num_components)?;
        positive("data.points_per_component", self.data.points_per_component)?;
        positive("data.dim", self.data.dim)?;
        positive("model.hidden_dim", self.model.hidden_dim)?;
        positive("quantizer.codebook_size", self.quantizer.codebook_size)?;
        positive("train.batch_size", self.train.batch_size)?;
        positive("init.kmeans_max_iters", self.init.kmeans_max_iters)?;
        positive("diagnostics.pairwise_sample", self.diagnostics.pairwise_sample)?;
        if self.model.latent_dim == Some(0) {
            return Err(Error::config("model.latent_dim", "must be >= 1"));
        }
        if !(self.data.std > 0.0) {
            return Err(Error::config("data.std", "must be positive"));
        }
        if !(self.data.separation > 0.0) {
            return Err(Error::config("data.separation", "must be positive"));
        }
        if !(self.quantizer.decay > 0.0 && self.quantizer.decay < 1.0) {
            return Err(Error::config("quantizer.decay", "must lie in (0, 1)"));
        }
        if !(self.quantizer.beta >= 0.0) {
            return Err(Error::config("quantizer.beta", "must be >= 0"));
        }
        if !(self.train.lr > 0.0) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(self.train.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be >= 0"));
        }
        if !(self.init.embedding_ratio >= 1.0) {
            return Err(Error::config("init.embedding_ratio", "must be >= 1"));
        }
        let needed = (self.init.embedding_ratio * self.quantizer.codebook_size as f64).ceil();
        let available = (self.data.num_components * self.data.points_per_component) as f64;
        if self.train.regime != Regime::AePretrain && needed > available {
            return Err(Error::config(
                "init.embedding_ratio",
                format!("needs {needed} embeddings but the dataset has {available} points"),
            ));
        }
        if !(self.diagnostics.coverage_threshold >= 0.0 && self.diagnostics.coverage_threshold < 1.0) {
            return Err(Error::config("diagnostics.coverage_threshold", "must lie in [0, 1)"));
        }
        if self.diagnostics.histogram_bins < 10 {
            return Err(Error::config("diagnostics.histogram_bins", "must be >= 10"));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.model.latent_dim.unwrap_or(self.data.dim)
    }

    pub fn mixture_spec(&self) -> Result<GaussianMixtureSpec> {
        GaussianMixtureSpec::with_layout(
            self.data.num_components,
            self.data.points_per_component,
            self.data.dim,
            self.data.separation,
            self.data.std,
            self.seed,
            self.data.layout,
        )
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.train.lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps: self.train.eps,
            weight_decay: self.train.weight_decay,
        }
    }

    pub fn init_config(&self) -> InitConfig {
        InitConfig {
            codebook_size: self.quantizer.codebook_size,
            embedding_ratio: self.init.embedding_ratio,
            batch_size: self.train.batch_size,
            kmeans: KMeansConfig {
                max_iters: self.init.kmeans_max_iters,
                tol: self.init.kmeans_tol,
                restarts: self.init.kmeans_restarts,
                seed: self.seed,
            },
            decay: self.quantizer.decay,
            beta: self.quantizer.beta,
            initial_count: self.init.initial_count,
            ..InitConfig::default()
        }
    }
}

//! The single JSON configuration document shared by training, editing and
//! serving. Every section has defaults, so `{}` is a valid desk-scale config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::toy::toy_bundle;
use crate::backends::{BackendBundle, ToyBackendConfig};
use crate::error::{Error, Result};
use crate::latent::{LatentCode, LatentPartition};
use crate::losses::LossConfig;
use crate::mapper::MapperConfig;

pub const OUTPUT_DIR_ENV: &str = "HAIRMAP_OUTPUT_DIR";
pub const PORT_ENV: &str = "HAIRMAP_PORT";

/// Latent, embedding and image sizes of one pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub layers: usize,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self::desk()
    }
}

impl Dims {
    pub fn desk() -> Self {
        Self {
            layers: 6,
            latent_dim: 32,
            embed_dim: 32,
            height: 32,
            width: 32,
        }
    }

    /// 18 x 512 latents and 512-dimensional embeddings.
    pub fn full_scale(height: usize, width: usize) -> Self {
        Self {
            layers: 18,
            latent_dim: 512,
            embed_dim: 512,
            height,
            width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < LatentCode::MIN_LAYERS {
            return Err(Error::Config(format!(
                "need at least {} latent layers, got {}",
                LatentCode::MIN_LAYERS,
                self.layers
            )));
        }
        if self.latent_dim == 0 || self.embed_dim == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("all dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Toy(ToyBackendConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self::Toy(ToyBackendConfig::default())
    }
}

/// Where training latents come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatentSource {
    /// Seeded standard-normal draws.
    #[default]
    Prior,
    /// Inversions of the PNG files in `dir`, optionally restricted to the
    /// file names listed one per line in `split`.
    Images {
        dir: PathBuf,
        #[serde(default)]
        split: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Probabilities of (style only, color only, both).
    pub task_probs: [f64; 3],
    /// Probabilities of (text, reference image) for each active side.
    pub modality_probs: [f64; 2],
    pub checkpoint_every: u64,
    /// Prompt corpus file; the bundled corpus when absent.
    pub prompts: Option<PathBuf>,
    /// Directory of reference PNGs; generated from prior latents when absent.
    pub reference_dir: Option<PathBuf>,
    /// Number of generated references when `reference_dir` is absent.
    pub reference_pool_size: usize,
    pub latent_source: LatentSource,
    /// Smoothing factor of the logged exponential moving average.
    pub ema_alpha: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0005,
            batch_size: 1,
            iterations: 2000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            task_probs: [1.0 / 3.0; 3],
            modality_probs: [0.5; 2],
            checkpoint_every: 500,
            prompts: None,
            reference_dir: None,
            reference_pool_size: 32,
            latent_source: LatentSource::Prior,
            ema_alpha: 0.1,
        }
    }
}

fn check_probs(name: &str, probs: &[f64]) -> Result<()> {
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Config(format!("{name} entries must lie in [0, 1]")));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("{name} sums to {sum}, expected 1")));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_probs("task_probs", &self.task_probs)?;
        check_probs("modality_probs", &self.modality_probs)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) || self.ema_alpha == 0.0 {
            return Err(Error::Config("ema_alpha must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub port: u16,
    pub cache_capacity: usize,
    /// Static web client directory served under `/ui`.
    pub ui_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            port: 8080,
            cache_capacity: 64,
            ui_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub dims: Dims,
    /// Coarse/medium/fine layer counts; proportional default when absent.
    pub partition: Option<LatentPartition>,
    pub backend: BackendConfig,
    pub mapper: MapperConfig,
    pub losses: LossConfig,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    pub service: ServiceConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: Dims::desk(),
            partition: None,
            backend: BackendConfig::default(),
            mapper: MapperConfig::default(),
            losses: LossConfig::default(),
            train: TrainConfig::default(),
            output_dir: PathBuf::from("runs/desk"),
            service: ServiceConfig::default(),
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Config = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Applies `HAIRMAP_OUTPUT_DIR` and `HAIRMAP_PORT`, the only overrides.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            self.output_dir = PathBuf::from(dir);
        }
        if let Ok(port) = std::env::var(PORT_ENV) {
            self.service.port = port
                .parse()
                .map_err(|_| Error::Config(format!("{PORT_ENV}={port} is not a port")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let partition = self.partition()?;
        if partition.total() != self.dims.layers {
            return Err(Error::Config(format!(
                "partition covers {} layers but dims.layers = {}",
                partition.total(),
                self.dims.layers
            )));
        }
        self.train.validate()?;
        self.losses.weights.validate()?;
        self.mapper.validate()?;
        Ok(())
    }

    /// Builds the configured backend stack.
    pub fn backends(&self) -> Result<BackendBundle> {
        match &self.backend {
            BackendConfig::Toy(t) => toy_bundle(self.seed, &self.dims, t),
        }
    }

    pub fn partition(&self) -> Result<LatentPartition> {
        match self.partition {
            Some(p) => LatentPartition::new(p.n_coarse, p.n_medium, p.n_fine),
            None => LatentPartition::default_for(self.dims.layers),
        }
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Hash of everything except the iteration budget, checkpoint cadence,
    /// output directory and service settings, which may change between a run
    /// and its resumption.
    pub fn resume_hash(&self) -> String {
        let mut c = self.clone();
        c.train.iterations = 0;
        c.train.checkpoint_every = 1;
        c.output_dir = PathBuf::new();
        c.service = ServiceConfig::default();
        c.hash()
    }
}

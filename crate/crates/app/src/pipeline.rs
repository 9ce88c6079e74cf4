//! The edit pipeline shared by the CLI and the service, so both produce the
//! same bytes from the same inputs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use hairmap_core::backends::BackendBundle;
use hairmap_core::checkpoint::{self, Checkpoint};
use hairmap_core::conditions::{condition_from_reference, condition_from_text, Condition, ConditionPair};
use hairmap_core::config::{Config, LatentSource};
use hairmap_core::editing::{self, EditResult};
use hairmap_core::latent::LatentCode;
use hairmap_core::losses::LossBreakdown;
use hairmap_core::metrics::MetricRecord;
use hairmap_core::training::{generated_references, LatentPool, TaskSampler};
use hairmap_core::{HairMapperParams, Image, PromptCorpus};

use crate::error::{AppError, AppResult};
use crate::png;

/// Trained parameters with the backends and config they belong to.
pub struct Model {
    pub config: Config,
    pub params: HairMapperParams,
    pub backends: BackendBundle,
    /// Hex SHA-256 of the checkpoint file.
    pub checkpoint_hash: String,
}

impl Model {
    pub fn load(path: &Path) -> AppResult<Self> {
        if !path.exists() {
            return Err(AppError::Input(format!("checkpoint {} does not exist", path.display())));
        }
        let hash = checkpoint::file_hash(path)?;
        Self::from_checkpoint(Checkpoint::load(path)?, hash)
    }

    pub fn from_checkpoint(ck: Checkpoint, checkpoint_hash: String) -> AppResult<Self> {
        let backends = ck.meta.config.backends()?;
        Ok(Self {
            config: ck.meta.config,
            params: ck.params,
            backends,
            checkpoint_hash,
        })
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.backends.resolution()
    }

    pub fn decode(&self, bytes: &[u8]) -> AppResult<Image> {
        let (h, w) = self.resolution();
        png::decode(bytes, h, w)
    }
}

/// Raw inputs of one edit; images are PNG bytes.
#[derive(Clone, Debug, Default)]
pub struct EditInputs {
    pub image: Vec<u8>,
    pub style_text: Option<String>,
    pub color_text: Option<String>,
    pub style_ref: Option<Vec<u8>>,
    pub color_ref: Option<Vec<u8>>,
}

impl EditInputs {
    /// Hex SHA-256 over the checkpoint hash and every input field.
    pub fn edit_id(&self, checkpoint_hash: &str) -> String {
        let mut h = Sha256::new();
        let mut field = |tag: &str, bytes: Option<&[u8]>| {
            h.update(tag.as_bytes());
            match bytes {
                Some(b) => {
                    h.update([1u8]);
                    h.update((b.len() as u64).to_le_bytes());
                    h.update(b);
                }
                None => h.update([0u8]),
            }
        };
        field("checkpoint", Some(checkpoint_hash.as_bytes()));
        field("image", Some(&self.image));
        field("style_text", self.style_text.as_deref().map(str::as_bytes));
        field("color_text", self.color_text.as_deref().map(str::as_bytes));
        field("style_ref", self.style_ref.as_deref());
        field("color_ref", self.color_ref.as_deref());
        hex::encode(h.finalize())
    }
}

fn side(
    model: &Model,
    name: &str,
    text: Option<&str>,
    reference: Option<&[u8]>,
) -> AppResult<Condition> {
    match (text, reference) {
        (Some(_), Some(_)) => Err(AppError::Usage(format!(
            "{name}: give either text or a reference image, not both"
        ))),
        (Some(t), None) => {
            if t.trim().is_empty() {
                return Err(AppError::Usage(format!("{name} text is empty")));
            }
            Ok(condition_from_text(t, model.backends.text_encoder.as_ref())?)
        }
        (None, Some(bytes)) => {
            let img = model.decode(bytes)?;
            Ok(condition_from_reference(
                &img,
                &format!("{name}_ref"),
                model.backends.parser.as_ref(),
                model.backends.image_encoder.as_ref(),
            )?)
        }
        (None, None) => Ok(Condition::None),
    }
}

pub fn conditions(model: &Model, inputs: &EditInputs) -> AppResult<ConditionPair> {
    let pair = ConditionPair::new(
        side(model, "style", inputs.style_text.as_deref(), inputs.style_ref.as_deref())?,
        side(model, "color", inputs.color_text.as_deref(), inputs.color_ref.as_deref())?,
    );
    if pair.is_empty() {
        return Err(AppError::Usage(
            "at least one hairstyle or hair-color condition is required".into(),
        ));
    }
    Ok(pair)
}

pub struct EditOutput {
    pub edit_id: String,
    pub png: Vec<u8>,
    pub pair: ConditionPair,
    pub result: EditResult,
}

pub fn run_edit(model: &Model, inputs: &EditInputs) -> AppResult<EditOutput> {
    let pair = conditions(model, inputs)?;
    let img = model.decode(&inputs.image)?;
    let result = editing::edit(&img, &pair, &model.params, &model.backends, &model.config.losses)?;
    Ok(EditOutput {
        edit_id: inputs.edit_id(&model.checkpoint_hash),
        png: png::encode(&result.image)?,
        pair,
        result,
    })
}

/// The JSON sidecar written next to an edited PNG.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditSidecar {
    pub edit_id: String,
    pub checkpoint_hash: String,
    pub style: String,
    pub color: String,
    pub untrained: bool,
    pub breakdown: Option<LossBreakdown>,
    pub metrics: MetricRecord,
    pub source_latent: LatentCode,
    pub edited_latent: LatentCode,
}

impl EditOutput {
    pub fn sidecar(&self, checkpoint_hash: &str) -> EditSidecar {
        EditSidecar {
            edit_id: self.edit_id.clone(),
            checkpoint_hash: checkpoint_hash.to_string(),
            style: self.pair.style.describe(),
            color: self.pair.color.describe(),
            untrained: self.result.untrained,
            breakdown: self.result.breakdown,
            metrics: self.result.metrics.clone(),
            source_latent: self.result.source_latent.clone(),
            edited_latent: self.result.edited_latent.clone(),
        }
    }
}

/// Renders the blend of two edited latents.
pub fn blend(model: &Model, a: &LatentCode, b: &LatentCode, lambda: f64) -> AppResult<Vec<u8>> {
    let w = hairmap_core::latent::interpolate_latent(a, b, lambda)?;
    png::encode(&model.backends.generator.generate(&w)?)
}

/// Task sampler for `config`, loading image directories when configured.
pub fn build_sampler(config: &Config, backends: &BackendBundle) -> AppResult<TaskSampler> {
    let (h, w) = backends.resolution();
    let corpus = match &config.train.prompts {
        Some(path) => PromptCorpus::parse(&std::fs::read_to_string(path).map_err(|e| {
            AppError::Input(format!("{}: {e}", path.display()))
        })?)?,
        None => PromptCorpus::bundled(),
    };
    let references = match &config.train.reference_dir {
        Some(dir) => png::list_dir(dir)?
            .into_iter()
            .map(|p| {
                let id = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                Ok((id, png::load(&p, h, w)?))
            })
            .collect::<AppResult<Vec<_>>>()?,
        None => generated_references(config.seed, config.train.reference_pool_size, backends)?,
    };
    let latents = match &config.train.latent_source {
        LatentSource::Prior => {
            let (layers, dim) = backends.latent_shape();
            LatentPool::Prior { layers, dim }
        }
        LatentSource::Images { dir, split } => {
            let files = match split {
                Some(list) => std::fs::read_to_string(list)
                    .map_err(|e| AppError::Input(format!("{}: {e}", list.display())))?
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty() && !l.starts_with('#'))
                    .map(|l| dir.join(l))
                    .collect(),
                None => png::list_dir(dir)?,
            };
            LatentPool::Inverted(
                files
                    .iter()
                    .map(|p| Ok(backends.inverter.invert(&png::load(p, h, w)?)?))
                    .collect::<AppResult<Vec<_>>>()?,
            )
        }
    };
    Ok(TaskSampler::new(&corpus, &references, latents, &config.train, backends)?)
}

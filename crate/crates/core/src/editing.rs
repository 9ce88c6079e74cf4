//! Inference: invert, map, apply, generate; and blending between two edits.

use serde::{Deserialize, Serialize};

use crate::backends::{BackendBundle, Generator};
use crate::conditions::ConditionPair;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent::{interpolate_latent, LatentCode, LatentDelta};
use crate::losses::{self, LossBreakdown, LossConfig, LossContext};
use crate::mapper::{apply_edit, mapper_forward, HairMapperParams};
use crate::metrics::{evaluate_pair, MetricRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditResult {
    pub source_latent: LatentCode,
    pub delta: LatentDelta,
    pub edited_latent: LatentCode,
    pub image: Image,
    /// `G(source_latent)`, the baseline the edit is measured against.
    pub reconstruction: Image,
    pub metrics: MetricRecord,
    /// Loss terms of this edit; absent for an unconditioned pair.
    pub breakdown: Option<LossBreakdown>,
    /// The parameters had never been trained.
    pub untrained: bool,
}

/// Edits an already inverted latent.
pub fn edit_latent(
    w: &LatentCode,
    pair: &ConditionPair,
    params: &HairMapperParams,
    backends: &BackendBundle,
    losses: &LossConfig,
) -> Result<EditResult> {
    let delta = mapper_forward(w, pair, params)?;
    let edited_latent = apply_edit(w, &delta)?;
    let image = backends.generator.generate(&edited_latent)?;
    let reconstruction = backends.generator.generate(w)?;
    let breakdown = if pair.is_empty() {
        None
    } else {
        Some(losses::total_loss(
            LossContext {
                pair,
                edited: &image,
                reconstruction: &reconstruction,
                delta: &delta,
            },
            backends,
            losses,
        )?)
    };
    let metrics = evaluate_pair("edit", &reconstruction, &image, backends)?;
    Ok(EditResult {
        source_latent: w.clone(),
        delta,
        edited_latent,
        image,
        reconstruction,
        metrics,
        breakdown,
        untrained: params.iterations_trained == 0,
    })
}

/// The full pipeline on an input image.
pub fn edit(
    img: &Image,
    pair: &ConditionPair,
    params: &HairMapperParams,
    backends: &BackendBundle,
    losses: &LossConfig,
) -> Result<EditResult> {
    let (h, w) = backends.resolution();
    img.expect_resolution(h, w)?;
    let latent = backends.inverter.invert(img)?;
    edit_latent(&latent, pair, params, backends, losses)
}

fn compatible(a: &EditResult, b: &EditResult) -> Result<()> {
    if a.edited_latent.shape() != b.edited_latent.shape() {
        return Err(Error::Shape(format!(
            "edits have latent shapes {:?} and {:?}",
            a.edited_latent.shape(),
            b.edited_latent.shape()
        )));
    }
    Ok(())
}

/// `G((1 - lambda) a' + lambda b')` for the edited latents of two results.
pub fn interpolate(a: &EditResult, b: &EditResult, lambda: f64, generator: &dyn Generator) -> Result<Image> {
    compatible(a, b)?;
    generator.generate(&interpolate_latent(&a.edited_latent, &b.edited_latent, lambda)?)
}

/// Frames at `lambda = k / (steps - 1)` for `k = 0..steps`.
pub fn interpolation_sequence(
    a: &EditResult,
    b: &EditResult,
    steps: usize,
    generator: &dyn Generator,
) -> Result<Vec<Image>> {
    if steps < 2 {
        return Err(Error::Domain(format!("need at least 2 interpolation steps, got {steps}")));
    }
    compatible(a, b)?;
    (0..steps)
        .map(|k| interpolate(a, b, k as f64 / (steps - 1) as f64, generator))
        .collect()
}

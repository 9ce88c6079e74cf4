//! Training objectives: text manipulation, image manipulation and attribute
//! preservation, and their weighted total.
//!
//! Each term has a value function and a gradient with respect to the edited
//! image (or, for the norm term, the latent delta). Parsed masks are
//! constants for differentiation.

use serde::{Deserialize, Serialize};

use crate::backends::{BackendBundle, FaceParser, IdentityEmbedder};
use crate::conditions::{Condition, ConditionKind, ConditionPair};
use crate::embedding::{cosine_grad_a, l2_norm, Embedding};
use crate::error::{shape_err, Error, Result};
use crate::image::{Image, Mask, CHANNELS};
use crate::latent::LatentDelta;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_si: f64,
    pub lambda_ci: f64,
    pub lambda_id: f64,
    pub lambda_smc: f64,
    pub lambda_bg: f64,
    pub lambda_norm: f64,
    pub lambda_t: f64,
    pub lambda_i: f64,
    pub lambda_ap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_si: 5.0,
            lambda_ci: 0.02,
            lambda_id: 0.3,
            lambda_smc: 0.02,
            lambda_bg: 1.0,
            lambda_norm: 0.8,
            lambda_t: 2.0,
            lambda_i: 1.0,
            lambda_ap: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_si,
            self.lambda_ci,
            self.lambda_id,
            self.lambda_smc,
            self.lambda_bg,
            self.lambda_norm,
            self.lambda_t,
            self.lambda_i,
            self.lambda_ap,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// How the masked background difference is reduced to a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackgroundNorm {
    /// Use the squared norm instead of the norm.
    pub squared: bool,
    /// Divide the sum of squares by the number of values (pixels x channels)
    /// before taking the root.
    pub normalized: bool,
}

impl Default for BackgroundNorm {
    fn default() -> Self {
        Self {
            squared: false,
            normalized: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub background: BackgroundNorm,
}

/// `1 - cos(a, b)`, in `[0, 2]`.
pub fn clip_cosine_loss(a: &Embedding, b: &Embedding) -> Result<f64> {
    Ok(1.0 - a.cosine(b)?)
}

fn cosine_loss_grad(a: &Embedding, b: &Embedding) -> Result<Vec<f64>> {
    Ok(cosine_grad_a(a.as_slice(), b.as_slice())?
        .into_iter()
        .map(|g| -g)
        .collect())
}

/// Per-channel hair-mask-weighted mean color.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HairColor {
    pub rgb: [f64; 3],
    /// The hair mask was empty; `rgb` is zero.
    pub empty: bool,
}

fn masked_mean_color(img: &Image, mask: &Mask) -> Result<HairColor> {
    mask.check_matches(img)?;
    let total = mask.sum();
    if total == 0.0 {
        return Ok(HairColor {
            rgb: [0.0; 3],
            empty: true,
        });
    }
    let mut rgb = [0.0; 3];
    for (px, m) in img.as_slice().chunks(CHANNELS).zip(mask.as_slice()) {
        for (acc, v) in rgb.iter_mut().zip(px) {
            *acc += v * m;
        }
    }
    rgb.iter_mut().for_each(|v| *v /= total);
    Ok(HairColor { rgb, empty: false })
}

pub fn average_hair_color(img: &Image, parser: &dyn FaceParser) -> Result<HairColor> {
    masked_mean_color(img, &parser.hair_mask(img)?)
}

/// A loss that contributes zero when a hair mask it needs is empty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedLoss {
    pub value: f64,
    pub empty_mask: bool,
}

fn color_l1(edited: &HairColor, target: &HairColor) -> MaskedLoss {
    if edited.empty || target.empty {
        return MaskedLoss {
            value: 0.0,
            empty_mask: true,
        };
    }
    MaskedLoss {
        value: edited
            .rgb
            .iter()
            .zip(&target.rgb)
            .map(|(a, b)| (a - b).abs())
            .sum(),
        empty_mask: false,
    }
}

/// Gradient of `|avg(x * m) - target|_1` with respect to `x`.
fn color_l1_grad(edited: &HairColor, target: &HairColor, mask: &Mask) -> Vec<f64> {
    if edited.empty || target.empty {
        return vec![0.0; mask.as_slice().len() * CHANNELS];
    }
    let total = mask.sum();
    let signs: Vec<f64> = edited
        .rgb
        .iter()
        .zip(&target.rgb)
        .map(|(a, b)| (a - b).signum() * f64::from(u8::from(a != b)))
        .collect();
    mask.as_slice()
        .iter()
        .flat_map(|m| signs.iter().map(move |s| s * m / total))
        .collect()
}

/// Sum of `1 - cos(E_i(x_M), e^t)` over the text conditions of the pair.
pub fn text_manipulation_loss(
    edited: &Image,
    pair: &ConditionPair,
    backends: &BackendBundle,
) -> Result<f64> {
    let texts = text_embeddings(pair);
    if texts.is_empty() {
        return Err(Error::Contract(
            "text manipulation loss needs at least one text condition".into(),
        ));
    }
    let e_img = backends.image_encoder.encode(edited)?;
    texts
        .iter()
        .map(|t| clip_cosine_loss(&e_img, t))
        .sum()
}

fn text_embeddings(pair: &ConditionPair) -> Vec<&Embedding> {
    [&pair.style, &pair.color]
        .into_iter()
        .filter_map(|c| match c {
            Condition::Text { embedding, .. } => Some(embedding),
            _ => None,
        })
        .collect()
}

/// `1 - cos(E_i(x_M * P_h(x_M)), E_i(x * P_h(x)))`.
pub fn style_image_loss(edited: &Image, reference: &Image, backends: &BackendBundle) -> Result<f64> {
    let enc = backends.image_encoder.as_ref();
    let parser = backends.parser.as_ref();
    let a = enc.encode(&edited.masked(&parser.hair_mask(edited)?)?)?;
    let b = enc.encode(&reference.masked(&parser.hair_mask(reference)?)?)?;
    clip_cosine_loss(&a, &b)
}

/// L1 distance between the average hair colors of the edit and the reference.
pub fn color_image_loss(edited: &Image, reference: &Image, parser: &dyn FaceParser) -> Result<MaskedLoss> {
    Ok(color_l1(
        &average_hair_color(edited, parser)?,
        &average_hair_color(reference, parser)?,
    ))
}

/// `1 - cos(R(x_M), R(x_w))`.
pub fn identity_loss(edited: &Image, reconstruction: &Image, embedder: &dyn IdentityEmbedder) -> Result<f64> {
    clip_cosine_loss(&embedder.embed(edited)?, &embedder.embed(reconstruction)?)
}

/// Hair-color drift from the reconstruction; used when only the hairstyle is edited.
pub fn style_keeps_color_loss(
    edited: &Image,
    reconstruction: &Image,
    parser: &dyn FaceParser,
) -> Result<MaskedLoss> {
    color_image_loss(edited, reconstruction, parser)
}

fn background_parts(
    edited: &Image,
    reconstruction: &Image,
    parser: &dyn FaceParser,
) -> Result<(Vec<f64>, Mask)> {
    if edited.resolution() != reconstruction.resolution() {
        return Err(shape_err("background loss needs equally sized images"));
    }
    let region = parser
        .non_hair_mask(edited)?
        .intersect(&parser.non_hair_mask(reconstruction)?)?;
    let diff = edited
        .as_slice()
        .chunks(CHANNELS)
        .zip(reconstruction.as_slice().chunks(CHANNELS))
        .zip(region.as_slice())
        .flat_map(|((a, b), m)| a.iter().zip(b).map(move |(x, y)| (x - y) * m))
        .collect();
    Ok((diff, region))
}

fn reduce_background(diff: &[f64], norm: BackgroundNorm) -> f64 {
    let mut ss: f64 = diff.iter().map(|d| d * d).sum();
    if norm.normalized {
        ss /= diff.len() as f64;
    }
    if norm.squared {
        ss
    } else {
        ss.sqrt()
    }
}

/// Norm of `(x_M - x_w)` over the intersection of both non-hair masks.
pub fn background_loss(
    edited: &Image,
    reconstruction: &Image,
    parser: &dyn FaceParser,
    norm: BackgroundNorm,
) -> Result<f64> {
    let (diff, _) = background_parts(edited, reconstruction, parser)?;
    Ok(reduce_background(&diff, norm))
}

fn background_grad(diff: &[f64], region: &Mask, norm: BackgroundNorm) -> Vec<f64> {
    let n = diff.len() as f64;
    let scale = if norm.normalized { 1.0 / n } else { 1.0 };
    let ss: f64 = diff.iter().map(|d| d * d).sum::<f64>() * scale;
    // d/dd of the reduced value, per unit of diff.
    let coeff = if norm.squared {
        2.0 * scale
    } else if ss > 0.0 {
        scale / ss.sqrt()
    } else {
        0.0
    };
    diff.chunks(CHANNELS)
        .zip(region.as_slice())
        .flat_map(|(d, m)| d.iter().map(move |v| coeff * v * m))
        .collect()
}

/// Euclidean norm of the latent step.
pub fn norm_loss(delta: &LatentDelta) -> f64 {
    l2_norm(delta.as_slice())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    StyleOnly,
    ColorOnly,
    Both,
}

impl TaskType {
    pub const ALL: [TaskType; 3] = [TaskType::StyleOnly, TaskType::ColorOnly, TaskType::Both];

    pub fn of(pair: &ConditionPair) -> Option<TaskType> {
        match (pair.style.is_present(), pair.color.is_present()) {
            (true, false) => Some(TaskType::StyleOnly),
            (false, true) => Some(TaskType::ColorOnly),
            (true, true) => Some(TaskType::Both),
            (false, false) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct TermValue {
    pub value: f64,
    pub active: bool,
    /// Active, but a needed hair mask was empty so the term contributed zero.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub empty_mask: bool,
}

impl TermValue {
    fn active(value: f64) -> Self {
        Self {
            value,
            active: true,
            empty_mask: false,
        }
    }

    fn masked(loss: MaskedLoss) -> Self {
        Self {
            value: loss.value,
            active: true,
            empty_mask: loss.empty_mask,
        }
    }
}

/// Every term of one loss evaluation and the weighted composition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub style_text: TermValue,
    pub color_text: TermValue,
    pub style_image: TermValue,
    pub color_image: TermValue,
    pub identity: TermValue,
    pub style_keeps_color: TermValue,
    pub background: TermValue,
    pub norm: TermValue,
    /// `L_st + L_ct`.
    pub text: f64,
    /// `lambda_si L_si + lambda_ci L_ci`.
    pub image: f64,
    /// `lambda_id L_id + lambda_smc L_smc + lambda_bg L_bg + lambda_norm L_norm`.
    pub preservation: f64,
    /// `lambda_t L_t + lambda_i L_i + lambda_ap L_ap`.
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, TermValue); 8] {
        [
            ("style_text", self.style_text),
            ("color_text", self.color_text),
            ("style_image", self.style_image),
            ("color_image", self.color_image),
            ("identity", self.identity),
            ("style_keeps_color", self.style_keeps_color),
            ("background", self.background),
            ("norm", self.norm),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.terms().iter().all(|(_, t)| t.value.is_finite())
    }

    fn compose(&mut self, w: &LossWeights) {
        self.text = self.style_text.value + self.color_text.value;
        self.image = w.lambda_si * self.style_image.value + w.lambda_ci * self.color_image.value;
        self.preservation = w.lambda_id * self.identity.value
            + w.lambda_smc * self.style_keeps_color.value
            + w.lambda_bg * self.background.value
            + w.lambda_norm * self.norm.value;
        self.total = w.lambda_t * self.text + w.lambda_i * self.image + w.lambda_ap * self.preservation;
    }
}

/// Which terms a pair of conditions switches on, in [`LossBreakdown::terms`] order.
pub fn active_terms(pair: &ConditionPair) -> [bool; 8] {
    let style = pair.style.kind();
    let color = pair.color.kind();
    [
        style == ConditionKind::Text,
        color == ConditionKind::Text,
        style == ConditionKind::Image,
        color == ConditionKind::Image,
        true,
        style != ConditionKind::None && color == ConditionKind::None,
        true,
        true,
    ]
}

/// Inputs of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossContext<'a> {
    pub pair: &'a ConditionPair,
    /// `x_M = G(w + delta)`.
    pub edited: &'a Image,
    /// `x_w = G(w)`.
    pub reconstruction: &'a Image,
    pub delta: &'a LatentDelta,
}

#[derive(Clone, Debug)]
pub struct LossEvaluation {
    pub breakdown: LossBreakdown,
    /// `dL/dx_M`, `HWC` layout.
    pub grad_image: Vec<f64>,
    /// `dL/d delta` from the terms that read the delta directly.
    pub grad_delta: Vec<f64>,
}

fn axpy(acc: &mut [f64], scale: f64, g: &[f64]) {
    if scale == 0.0 {
        return;
    }
    for (a, v) in acc.iter_mut().zip(g) {
        *a += scale * v;
    }
}

/// Evaluates every active term and the gradient of the weighted total.
pub fn evaluate(ctx: LossContext<'_>, backends: &BackendBundle, config: &LossConfig) -> Result<LossEvaluation> {
    if ctx.pair.is_empty() {
        return Err(Error::Contract(
            "no manipulation term is active: both conditions are absent".into(),
        ));
    }
    if ctx.edited.resolution() != ctx.reconstruction.resolution() {
        return Err(shape_err("edited and reconstructed images differ in size"));
    }
    let w = &config.weights;
    let enc = backends.image_encoder.as_ref();
    let parser = backends.parser.as_ref();
    let x_m = ctx.edited;
    let mut bd = LossBreakdown::default();
    let mut grad_image = vec![0.0; x_m.as_slice().len()];

    let text_scale = w.lambda_t;
    let image_scale = w.lambda_i;
    let ap_scale = w.lambda_ap;

    let hair_m = parser.hair_mask(x_m)?;
    let needs_text = text_embeddings(ctx.pair);
    if !needs_text.is_empty() {
        let e_img = enc.encode(x_m)?;
        let mut g_emb = vec![0.0; e_img.dim()];
        for (side, term) in [(&ctx.pair.style, &mut bd.style_text), (&ctx.pair.color, &mut bd.color_text)] {
            if let Condition::Text { embedding, .. } = side {
                *term = TermValue::active(clip_cosine_loss(&e_img, embedding)?);
                axpy(&mut g_emb, 1.0, &cosine_loss_grad(&e_img, embedding)?);
            }
        }
        axpy(&mut grad_image, text_scale, &enc.backward(x_m, &g_emb)?);
    }

    let edited_color = masked_mean_color(x_m, &hair_m)?;
    if let Some(reference) = ctx.pair.style.reference() {
        let masked = x_m.masked(&hair_m)?;
        let a = enc.encode(&masked)?;
        let b = enc.encode(&reference.masked(&parser.hair_mask(reference)?)?)?;
        bd.style_image = TermValue::active(clip_cosine_loss(&a, &b)?);
        let g_masked = enc.backward(&masked, &cosine_loss_grad(&a, &b)?)?;
        let g: Vec<f64> = g_masked
            .chunks(CHANNELS)
            .zip(hair_m.as_slice())
            .flat_map(|(px, m)| px.iter().map(move |v| v * m))
            .collect();
        axpy(&mut grad_image, image_scale * w.lambda_si, &g);
    }
    if let Some(reference) = ctx.pair.color.reference() {
        let target = average_hair_color(reference, parser)?;
        bd.color_image = TermValue::masked(color_l1(&edited_color, &target));
        axpy(
            &mut grad_image,
            image_scale * w.lambda_ci,
            &color_l1_grad(&edited_color, &target, &hair_m),
        );
    }

    let rid = backends.identity_embedder.as_ref();
    let id_m = rid.embed(x_m)?;
    let id_w = rid.embed(ctx.reconstruction)?;
    bd.identity = TermValue::active(clip_cosine_loss(&id_m, &id_w)?);
    axpy(
        &mut grad_image,
        ap_scale * w.lambda_id,
        &rid.backward(x_m, &cosine_loss_grad(&id_m, &id_w)?)?,
    );

    if ctx.pair.style.is_present() && !ctx.pair.color.is_present() {
        let target = average_hair_color(ctx.reconstruction, parser)?;
        bd.style_keeps_color = TermValue::masked(color_l1(&edited_color, &target));
        axpy(
            &mut grad_image,
            ap_scale * w.lambda_smc,
            &color_l1_grad(&edited_color, &target, &hair_m),
        );
    }

    let (diff, region) = background_parts(x_m, ctx.reconstruction, parser)?;
    bd.background = TermValue::active(reduce_background(&diff, config.background));
    axpy(
        &mut grad_image,
        ap_scale * w.lambda_bg,
        &background_grad(&diff, &region, config.background),
    );

    let norm = norm_loss(ctx.delta);
    bd.norm = TermValue::active(norm);
    let grad_delta = if norm > 0.0 {
        let scale = ap_scale * w.lambda_norm / norm;
        ctx.delta.as_slice().iter().map(|d| scale * d).collect()
    } else {
        vec![0.0; ctx.delta.as_slice().len()]
    };

    bd.compose(w);
    Ok(LossEvaluation {
        breakdown: bd,
        grad_image,
        grad_delta,
    })
}

/// Value-only evaluation of the weighted total.
pub fn total_loss(ctx: LossContext<'_>, backends: &BackendBundle, config: &LossConfig) -> Result<LossBreakdown> {
    Ok(evaluate(ctx, backends, config)?.breakdown)
}

//! Seeded stand-ins for every network role.
//!
//! Each toy is a fixed linear map followed by a smooth squashing or a
//! normalization, so every differentiable path is exact to first order and
//! fully determined by the master seed.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    BackendBundle, FaceParser, Generator, IdentityEmbedder, ImageEncoder, Inverter, TextEncoder,
};
use crate::config::Dims;
use crate::embedding::{dot, l2_norm, Embedding};
use crate::error::{shape_err, Error, Result};
use crate::image::{Image, Mask, CHANNELS};
use crate::latent::LatentCode;
use crate::rng::{component_rng, fnv1a};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ToyInverterKind {
    /// Pseudo-inverse of the toy generator, so `invert(generate(w)) = w`.
    #[default]
    Matched,
    /// Independent seeded projection.
    Projection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyBackendConfig {
    /// Pre-activation scale of the generator.
    pub generator_gain: f64,
    /// Side of the average-pooling grid the encoders project from.
    pub encoder_grid: usize,
    /// Fraction of rows, from the top, the parser labels as hair.
    pub hair_fraction: f64,
    pub inverter: ToyInverterKind,
}

impl Default for ToyBackendConfig {
    fn default() -> Self {
        Self {
            generator_gain: 1.0,
            encoder_grid: 8,
            hair_fraction: 0.4,
            inverter: ToyInverterKind::Matched,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `G(w) = sigmoid(A vec(w) + b)`.
#[derive(Clone, Debug)]
pub struct ToyGenerator {
    layers: usize,
    dim: usize,
    height: usize,
    width: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl ToyGenerator {
    pub fn new(seed: u64, dims: &Dims, gain: f64) -> Self {
        let mut rng = component_rng(seed, "toy.generator");
        let inputs = dims.layers * dims.latent_dim;
        let outputs = dims.height * dims.width * CHANNELS;
        let weight = gaussian(&mut rng, inputs * outputs, gain / (inputs as f64).sqrt());
        let bias = gaussian(&mut rng, outputs, 0.5);
        Self {
            layers: dims.layers,
            dim: dims.latent_dim,
            height: dims.height,
            width: dims.width,
            weight,
            bias,
        }
    }

    fn inputs(&self) -> usize {
        self.layers * self.dim
    }

    fn check(&self, w: &LatentCode) -> Result<()> {
        if w.shape() != (self.layers, self.dim) {
            return Err(shape_err(format!(
                "generator expects a {}x{} latent, got {:?}",
                self.layers,
                self.dim,
                w.shape()
            )));
        }
        Ok(())
    }

    fn pre_activation(&self, w: &LatentCode) -> Vec<f64> {
        let x = w.as_slice();
        self.weight
            .chunks(self.inputs())
            .zip(&self.bias)
            .map(|(row, b)| dot(row, x) + b)
            .collect()
    }

    /// The squashed bias, i.e. the image of the zero latent.
    pub fn bias_image(&self) -> Vec<f64> {
        self.bias.iter().map(|&b| sigmoid(b)).collect()
    }
}

impl Generator for ToyGenerator {
    fn latent_shape(&self) -> (usize, usize) {
        (self.layers, self.dim)
    }

    fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn generate(&self, w: &LatentCode) -> Result<Image> {
        self.check(w)?;
        let data = self.pre_activation(w).into_iter().map(sigmoid).collect();
        Image::new(self.height, self.width, data)
    }

    fn backward(&self, w: &LatentCode, grad_image: &[f64]) -> Result<Vec<f64>> {
        self.check(w)?;
        if grad_image.len() != self.bias.len() {
            return Err(shape_err("generator gradient has the wrong length"));
        }
        let mut grad = vec![0.0; self.inputs()];
        for ((row, pre), g) in self
            .weight
            .chunks(self.inputs())
            .zip(self.pre_activation(w))
            .zip(grad_image)
        {
            let s = sigmoid(pre);
            let gp = g * s * (1.0 - s);
            if gp == 0.0 {
                continue;
            }
            for (acc, a) in grad.iter_mut().zip(row) {
                *acc += gp * a;
            }
        }
        Ok(grad)
    }
}

/// Seeded bag-of-tokens text encoder: each lowercase alphanumeric token maps
/// to a fixed Gaussian vector; the prompt embedding is their normalized sum.
#[derive(Clone, Debug)]
pub struct ToyTextEncoder {
    seed: u64,
    embed_dim: usize,
}

impl ToyTextEncoder {
    pub fn new(seed: u64, embed_dim: usize) -> Self {
        Self { seed, embed_dim }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = component_rng(self.seed ^ fnv1a(token.as_bytes()), "toy.text_encoder");
        gaussian(&mut rng, self.embed_dim, 1.0)
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl TextEncoder for ToyTextEncoder {
    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn encode(&self, text: &str) -> Result<Embedding> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::Input("text prompt has no tokens".into()));
        }
        let mut acc = vec![0.0; self.embed_dim];
        for token in &tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(token)) {
                *a += v;
            }
        }
        Embedding::normalized(acc)
    }
}

/// Average-pools the centered image onto a grid, projects linearly and
/// normalizes: `e = z / |z|`, `z = P (pool(x) - 0.5) + c`.
#[derive(Clone, Debug)]
pub struct ToyProjectionEncoder {
    embed_dim: usize,
    height: usize,
    width: usize,
    grid: usize,
    projection: Vec<f64>,
    offset: Vec<f64>,
}

impl ToyProjectionEncoder {
    pub fn new(seed: u64, label: &str, dims: &Dims, grid: usize) -> Result<Self> {
        if grid == 0 || dims.height % grid != 0 || dims.width % grid != 0 {
            return Err(Error::Config(format!(
                "encoder grid {grid} must divide the {}x{} resolution",
                dims.height, dims.width
            )));
        }
        let features = grid * grid * CHANNELS;
        let mut rng = component_rng(seed, label);
        let projection = gaussian(&mut rng, dims.embed_dim * features, 1.0 / (features as f64).sqrt());
        let offset = gaussian(&mut rng, dims.embed_dim, 0.05);
        Ok(Self {
            embed_dim: dims.embed_dim,
            height: dims.height,
            width: dims.width,
            grid,
            projection,
            offset,
        })
    }

    fn features(&self) -> usize {
        self.grid * self.grid * CHANNELS
    }

    fn cell(&self, row: usize, col: usize) -> usize {
        let bh = self.height / self.grid;
        let bw = self.width / self.grid;
        (row / bh) * self.grid + col / bw
    }

    fn pooled(&self, img: &Image) -> Result<Vec<f64>> {
        img.expect_resolution(self.height, self.width)?;
        let area = ((self.height / self.grid) * (self.width / self.grid)) as f64;
        let mut u = vec![0.0; self.features()];
        for r in 0..self.height {
            for c in 0..self.width {
                let base = self.cell(r, c) * CHANNELS;
                for (ch, v) in img.pixel(r, c).into_iter().enumerate() {
                    u[base + ch] += v / area;
                }
            }
        }
        u.iter_mut().for_each(|v| *v -= 0.5);
        Ok(u)
    }

    fn raw(&self, img: &Image) -> Result<Vec<f64>> {
        let u = self.pooled(img)?;
        Ok(self
            .projection
            .chunks(self.features())
            .zip(&self.offset)
            .map(|(row, c)| dot(row, &u) + c)
            .collect())
    }

    fn encode_impl(&self, img: &Image) -> Result<Embedding> {
        Embedding::normalized(self.raw(img)?)
    }

    fn backward_impl(&self, img: &Image, grad_embedding: &[f64]) -> Result<Vec<f64>> {
        if grad_embedding.len() != self.embed_dim {
            return Err(shape_err("embedding gradient has the wrong length"));
        }
        let z = self.raw(img)?;
        let norm = l2_norm(&z);
        let e: Vec<f64> = z.iter().map(|v| v / norm).collect();
        let proj = dot(&e, grad_embedding);
        let grad_z: Vec<f64> = grad_embedding
            .iter()
            .zip(&e)
            .map(|(g, ei)| (g - ei * proj) / norm)
            .collect();
        let mut grad_u = vec![0.0; self.features()];
        for (row, gz) in self.projection.chunks(self.features()).zip(&grad_z) {
            for (acc, p) in grad_u.iter_mut().zip(row) {
                *acc += gz * p;
            }
        }
        let area = ((self.height / self.grid) * (self.width / self.grid)) as f64;
        let mut grad = Vec::with_capacity(self.height * self.width * CHANNELS);
        for r in 0..self.height {
            for c in 0..self.width {
                let base = self.cell(r, c) * CHANNELS;
                grad.extend((0..CHANNELS).map(|ch| grad_u[base + ch] / area));
            }
        }
        Ok(grad)
    }
}

impl ImageEncoder for ToyProjectionEncoder {
    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn encode(&self, img: &Image) -> Result<Embedding> {
        self.encode_impl(img)
    }

    fn backward(&self, img: &Image, grad_embedding: &[f64]) -> Result<Vec<f64>> {
        self.backward_impl(img, grad_embedding)
    }
}

impl IdentityEmbedder for ToyProjectionEncoder {
    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn embed(&self, img: &Image) -> Result<Embedding> {
        self.encode_impl(img)
    }

    fn backward(&self, img: &Image, grad_embedding: &[f64]) -> Result<Vec<f64>> {
        self.backward_impl(img, grad_embedding)
    }
}

/// Content-independent parser: the top rows are hair, the rest is not.
#[derive(Clone, Debug)]
pub struct ToyFaceParser {
    height: usize,
    width: usize,
    hair_rows: usize,
}

impl ToyFaceParser {
    pub fn new(dims: &Dims, hair_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&hair_fraction) {
            return Err(Error::Config(format!(
                "hair fraction {hair_fraction} outside [0, 1]"
            )));
        }
        Ok(Self {
            height: dims.height,
            width: dims.width,
            hair_rows: ((dims.height as f64) * hair_fraction).round() as usize,
        })
    }

    pub fn hair_rows(&self) -> usize {
        self.hair_rows
    }
}

impl FaceParser for ToyFaceParser {
    fn hair_mask(&self, img: &Image) -> Result<Mask> {
        img.expect_resolution(self.height, self.width)?;
        Mask::from_fn(self.height, self.width, |r, _| {
            if r < self.hair_rows {
                1.0
            } else {
                0.0
            }
        })
    }
}

#[derive(Clone, Debug)]
enum InverterMap {
    /// `w = pinv(A) (logit(x) - b)`.
    Matched { pinv: Vec<f64>, bias: Vec<f64> },
    /// `w = B (x - 0.5)`.
    Projection { weight: Vec<f64> },
}

#[derive(Clone, Debug)]
pub struct ToyInverter {
    layers: usize,
    dim: usize,
    height: usize,
    width: usize,
    map: InverterMap,
}

const LOGIT_CLAMP: f64 = 1e-6;

impl ToyInverter {
    pub fn projection(seed: u64, dims: &Dims) -> Self {
        let mut rng = component_rng(seed, "toy.inverter");
        let pixels = dims.height * dims.width * CHANNELS;
        let weight = gaussian(
            &mut rng,
            pixels * dims.layers * dims.latent_dim,
            4.0 / (pixels as f64).sqrt(),
        );
        Self {
            layers: dims.layers,
            dim: dims.latent_dim,
            height: dims.height,
            width: dims.width,
            map: InverterMap::Projection { weight },
        }
    }

    /// Pseudo-inverse of the generator's affine part; requires the generator
    /// map to have full column rank.
    pub fn matched(generator: &ToyGenerator) -> Result<Self> {
        let rows = generator.bias.len();
        let cols = generator.inputs();
        if rows < cols {
            return Err(Error::Config(format!(
                "matched inverter needs at least {cols} pixel values, resolution gives {rows}"
            )));
        }
        let a = DMatrix::from_row_slice(rows, cols, &generator.weight);
        let pinv = a
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::Numeric(format!("pseudo-inverse failed: {e}")))?;
        // nalgebra is column-major; store row-major (cols x rows).
        let pinv = pinv.transpose().as_slice().to_vec();
        Ok(Self {
            layers: generator.layers,
            dim: generator.dim,
            height: generator.height,
            width: generator.width,
            map: InverterMap::Matched {
                pinv,
                bias: generator.bias.clone(),
            },
        })
    }
}

impl Inverter for ToyInverter {
    fn invert(&self, img: &Image) -> Result<LatentCode> {
        img.expect_resolution(self.height, self.width)?;
        let pixels = img.as_slice();
        let data = match &self.map {
            InverterMap::Matched { pinv, bias } => {
                let target: Vec<f64> = pixels
                    .iter()
                    .zip(bias)
                    .map(|(&x, b)| {
                        let x = x.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
                        (x / (1.0 - x)).ln() - b
                    })
                    .collect();
                pinv.chunks(pixels.len()).map(|row| dot(row, &target)).collect()
            }
            InverterMap::Projection { weight } => {
                let centered: Vec<f64> = pixels.iter().map(|x| x - 0.5).collect();
                weight
                    .chunks(pixels.len())
                    .map(|row| dot(row, &centered))
                    .collect()
            }
        };
        LatentCode::new(self.layers, self.dim, data)
    }
}

/// Builds the full toy stack from one seed.
pub fn toy_bundle(seed: u64, dims: &Dims, config: &ToyBackendConfig) -> Result<BackendBundle> {
    dims.validate()?;
    let generator = ToyGenerator::new(seed, dims, config.generator_gain);
    let inverter = match config.inverter {
        ToyInverterKind::Matched => ToyInverter::matched(&generator)?,
        ToyInverterKind::Projection => ToyInverter::projection(seed, dims),
    };
    let bundle = BackendBundle {
        generator: Arc::new(generator),
        text_encoder: Arc::new(ToyTextEncoder::new(seed, dims.embed_dim)),
        image_encoder: Arc::new(ToyProjectionEncoder::new(
            seed,
            "toy.image_encoder",
            dims,
            config.encoder_grid,
        )?),
        parser: Arc::new(ToyFaceParser::new(dims, config.hair_fraction)?),
        identity_embedder: Arc::new(ToyProjectionEncoder::new(
            seed,
            "toy.identity_embedder",
            dims,
            config.encoder_grid,
        )?),
        inverter: Arc::new(inverter),
    };
    bundle.validate()?;
    Ok(bundle)
}

//! Interfaces for the pretrained network roles the editor relies on.
//!
//! Differentiable roles expose a vector-Jacobian product (`backward`) next to
//! their forward pass: given the input and the gradient of a scalar loss with
//! respect to the output, it returns the gradient with respect to the input.
//! Image gradients use the same `HWC` layout as [`Image`]; latent gradients the
//! row-major layout of [`LatentCode`].

use std::sync::Arc;

use crate::embedding::Embedding;
use crate::error::{shape_err, Result};
use crate::image::{Image, Mask};
use crate::latent::LatentCode;

pub mod toy;

pub use toy::{ToyBackendConfig, ToyInverterKind};

/// Synthesizes an image from an extended-space latent code.
pub trait Generator: Send + Sync {
    fn latent_shape(&self) -> (usize, usize);
    fn resolution(&self) -> (usize, usize);
    fn generate(&self, w: &LatentCode) -> Result<Image>;
    fn backward(&self, w: &LatentCode, grad_image: &[f64]) -> Result<Vec<f64>>;
}

/// Maps a text prompt to a unit-norm embedding in the shared space.
pub trait TextEncoder: Send + Sync {
    fn embed_dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Embedding>;
}

/// Maps an image to a unit-norm embedding in the shared text/image space.
pub trait ImageEncoder: Send + Sync {
    fn embed_dim(&self) -> usize;
    fn resolution(&self) -> (usize, usize);
    fn encode(&self, img: &Image) -> Result<Embedding>;
    fn backward(&self, img: &Image, grad_embedding: &[f64]) -> Result<Vec<f64>>;
}

/// Face-recognition embedding used for identity preservation and scoring.
pub trait IdentityEmbedder: Send + Sync {
    fn embed_dim(&self) -> usize;
    fn resolution(&self) -> (usize, usize);
    fn embed(&self, img: &Image) -> Result<Embedding>;
    fn backward(&self, img: &Image, grad_embedding: &[f64]) -> Result<Vec<f64>>;
}

/// Hair segmentation. Masks are treated as constants by every loss.
pub trait FaceParser: Send + Sync {
    fn hair_mask(&self, img: &Image) -> Result<Mask>;

    fn non_hair_mask(&self, img: &Image) -> Result<Mask> {
        Ok(self.hair_mask(img)?.complement())
    }
}

/// Projects a real image into the generator's latent space.
pub trait Inverter: Send + Sync {
    fn invert(&self, img: &Image) -> Result<LatentCode>;
}

/// Every network role the pipeline needs, shared immutably.
#[derive(Clone)]
pub struct BackendBundle {
    pub generator: Arc<dyn Generator>,
    pub text_encoder: Arc<dyn TextEncoder>,
    pub image_encoder: Arc<dyn ImageEncoder>,
    pub parser: Arc<dyn FaceParser>,
    pub identity_embedder: Arc<dyn IdentityEmbedder>,
    pub inverter: Arc<dyn Inverter>,
}

impl std::fmt::Debug for BackendBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendBundle")
            .field("latent_shape", &self.generator.latent_shape())
            .field("resolution", &self.generator.resolution())
            .field("embed_dim", &self.text_encoder.embed_dim())
            .finish()
    }
}

impl BackendBundle {
    /// Checks that all roles agree on embedding width and resolution.
    pub fn validate(&self) -> Result<()> {
        let de = self.text_encoder.embed_dim();
        if self.image_encoder.embed_dim() != de {
            return Err(shape_err(format!(
                "text encoder emits {de} dims but image encoder emits {}",
                self.image_encoder.embed_dim()
            )));
        }
        let res = self.generator.resolution();
        if self.image_encoder.resolution() != res || self.identity_embedder.resolution() != res {
            return Err(shape_err("encoders and generator disagree on resolution"));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.text_encoder.embed_dim()
    }

    pub fn latent_shape(&self) -> (usize, usize) {
        self.generator.latent_shape()
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.generator.resolution()
    }
}

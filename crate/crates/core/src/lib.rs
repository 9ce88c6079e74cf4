//! Conditional latent-space hair editing.
//!
//! A mapper network predicts a change of an extended-space latent code from
//! a hairstyle condition and a hair-color condition, each given as text, a
//! reference image, or left out. The crate holds the mapper, its training
//! objectives and loop, the inference pipeline, evaluation metrics, and
//! seeded toy stand-ins for the pretrained networks the pipeline talks to.

pub mod backends;
pub mod checkpoint;
pub mod conditions;
pub mod config;
pub mod editing;
pub mod embedding;
pub mod error;
pub mod image;
pub mod latent;
pub mod losses;
pub mod mapper;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod training;

pub use backends::BackendBundle;
pub use conditions::{Condition, ConditionKind, ConditionPair, PromptCorpus};
pub use config::{Config, Dims};
pub use embedding::Embedding;
pub use error::{Error, Result};
pub use image::{Image, Mask};
pub use latent::{LatentCode, LatentDelta, LatentPartition};
pub use losses::{LossBreakdown, LossWeights, TaskType};
pub use mapper::HairMapperParams;

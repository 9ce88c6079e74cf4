//! Command line and HTTP front ends over `hairmap_core`.

pub mod cli;
pub mod error;
pub mod pipeline;
pub mod png;
pub mod service;

pub use error::{AppError, AppResult};

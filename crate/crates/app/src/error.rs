use std::fmt;
use std::process::ExitCode;

use axum::http::StatusCode;

/// Failures surfaced by the CLI and the service.
#[derive(Debug)]
pub enum AppError {
    /// Bad arguments or a request without any condition.
    Usage(String),
    /// Unreadable, missing or malformed input.
    Input(String),
    NotFound(String),
    /// The model is still loading.
    Unavailable,
    Core(hairmap_core::Error),
}

pub type AppResult<T> = std::result::Result<T, AppError>;

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::Usage(m) => write!(f, "usage error: {m}"),
            AppError::Input(m) => write!(f, "input error: {m}"),
            AppError::NotFound(m) => write!(f, "not found: {m}"),
            AppError::Unavailable => write!(f, "model is not loaded yet"),
            AppError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for AppError {}

impl From<hairmap_core::Error> for AppError {
    fn from(e: hairmap_core::Error) -> Self {
        use hairmap_core::Error as E;
        match e {
            E::Io(io) => AppError::Input(io.to_string()),
            E::Json(j) => AppError::Input(format!("malformed JSON: {j}")),
            E::Input(m) | E::Shape(m) | E::Domain(m) => AppError::Input(m),
            E::Contract(m) => AppError::Usage(m),
            other => AppError::Core(other),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Input(e.to_string())
    }
}

impl From<serde_json::Error> for AppError {
    fn from(e: serde_json::Error) -> Self {
        AppError::Input(format!("malformed JSON: {e}"))
    }
}

impl AppError {
    /// 2 for anything the caller can fix by changing the invocation or its
    /// inputs, 1 otherwise.
    pub fn exit_code(&self) -> ExitCode {
        match self {
            AppError::Usage(_) | AppError::Input(_) | AppError::NotFound(_) => ExitCode::from(2),
            AppError::Core(hairmap_core::Error::Config(_) | hairmap_core::Error::Checkpoint(_)) => ExitCode::from(2),
            _ => ExitCode::from(1),
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            AppError::Usage(_) | AppError::Input(_) => StatusCode::BAD_REQUEST,
            AppError::NotFound(_) => StatusCode::NOT_FOUND,
            AppError::Unavailable => StatusCode::SERVICE_UNAVAILABLE,
            AppError::Core(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

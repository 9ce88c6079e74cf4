//! HTTP/JSON service. The schema is documented in `docs/api.md`.

use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use lru::LruCache;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use hairmap_core::latent::LatentCode;
use hairmap_core::losses::LossBreakdown;
use hairmap_core::metrics::MetricRecord;

use crate::error::{AppError, AppResult};
use crate::pipeline::{self, EditInputs, Model};

struct CachedEdit {
    edited_latent: LatentCode,
}

pub struct AppState {
    model: RwLock<Option<Arc<Model>>>,
    cache: Mutex<LruCache<String, Arc<CachedEdit>>>,
}

impl AppState {
    /// State with no model; every model endpoint answers 503 until
    /// [`AppState::set_model`].
    pub fn empty(cache_capacity: usize) -> Arc<Self> {
        let cap = NonZeroUsize::new(cache_capacity.max(1)).expect("non-zero");
        Arc::new(Self {
            model: RwLock::new(None),
            cache: Mutex::new(LruCache::new(cap)),
        })
    }

    pub fn with_model(model: Model) -> Arc<Self> {
        let state = Self::empty(model.config.service.cache_capacity);
        state.set_model(model);
        state
    }

    pub fn set_model(&self, model: Model) {
        *self.model.write().expect("model lock") = Some(Arc::new(model));
        self.cache.lock().expect("cache lock").clear();
    }

    fn model(&self) -> AppResult<Arc<Model>> {
        self.model.read().expect("model lock").clone().ok_or(AppError::Unavailable)
    }

    pub fn cached_edits(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }
}

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub image: String,
    #[serde(default)]
    pub style_text: Option<String>,
    #[serde(default)]
    pub color_text: Option<String>,
    #[serde(default)]
    pub style_ref: Option<String>,
    #[serde(default)]
    pub color_ref: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EditResponse {
    pub image: String,
    pub edit_id: String,
    pub breakdown: Option<LossBreakdown>,
    pub metrics: MetricRecord,
    pub untrained: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolateRequest {
    pub edit_id_a: String,
    pub edit_id_b: String,
    pub lambda: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InterpolateResponse {
    pub image: String,
}

fn parse<T: serde::de::DeserializeOwned>(body: &Bytes) -> AppResult<T> {
    serde_json::from_slice(body).map_err(|e| AppError::Input(format!("malformed request: {e}")))
}

fn unbase64(field: &str, s: &str) -> AppResult<Vec<u8>> {
    B64.decode(s.trim())
        .map_err(|e| AppError::Input(format!("{field} is not valid base64: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> AppResult<T> + Send + 'static) -> AppResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| AppError::Core(hairmap_core::Error::Numeric(format!("worker failed: {e}"))))?
}

async fn edit(State(state): State<Arc<AppState>>, body: Bytes) -> AppResult<Json<EditResponse>> {
    let model = state.model()?;
    let req: EditRequest = parse(&body)?;
    let inputs = EditInputs {
        image: unbase64("image", &req.image)?,
        style_text: req.style_text,
        color_text: req.color_text,
        style_ref: req.style_ref.as_deref().map(|s| unbase64("style_ref", s)).transpose()?,
        color_ref: req.color_ref.as_deref().map(|s| unbase64("color_ref", s)).transpose()?,
    };
    let out = blocking(move || pipeline::run_edit(&model, &inputs)).await?;
    state.cache.lock().expect("cache lock").put(
        out.edit_id.clone(),
        Arc::new(CachedEdit {
            edited_latent: out.result.edited_latent.clone(),
        }),
    );
    Ok(Json(EditResponse {
        image: B64.encode(&out.png),
        edit_id: out.edit_id,
        breakdown: out.result.breakdown,
        metrics: out.result.metrics,
        untrained: out.result.untrained,
    }))
}

async fn interpolate(State(state): State<Arc<AppState>>, body: Bytes) -> AppResult<Json<InterpolateResponse>> {
    let model = state.model()?;
    let req: InterpolateRequest = parse(&body)?;
    if !(0.0..=1.0).contains(&req.lambda) {
        return Err(AppError::Input(format!("lambda {} outside [0, 1]", req.lambda)));
    }
    let lookup = |id: &str| {
        state
            .cache
            .lock()
            .expect("cache lock")
            .get(id)
            .cloned()
            .ok_or_else(|| AppError::NotFound(format!("unknown edit_id {id}")))
    };
    let a = lookup(&req.edit_id_a)?;
    let b = lookup(&req.edit_id_b)?;
    let png = blocking(move || pipeline::blend(&model, &a.edited_latent, &b.edited_latent, req.lambda)).await?;
    Ok(Json(InterpolateResponse { image: B64.encode(png) }))
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    match state.model() {
        Ok(m) => Json(json!({ "status": "ok", "checkpoint_hash": m.checkpoint_hash })).into_response(),
        Err(_) => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({ "status": "loading", "checkpoint_hash": null })),
        )
            .into_response(),
    }
}

/// Routes `/edit`, `/interpolate`, `/health` and, when given, static files
/// under `/ui`.
pub fn router(state: Arc<AppState>, ui_dir: Option<&Path>) -> Router {
    let mut app = Router::new()
        .route("/edit", post(edit))
        .route("/interpolate", post(interpolate))
        .route("/health", get(health));
    if let Some(dir) = ui_dir {
        app = app.nest_service("/ui", ServeDir::new(dir));
    }
    app.with_state(state)
}

/// Binds `port`, then loads the checkpoint in the background.
pub async fn serve(checkpoint: PathBuf, port: u16, cache_capacity: usize, ui_dir: Option<PathBuf>) -> AppResult<()> {
    let state = AppState::empty(cache_capacity);
    let app = router(state.clone(), ui_dir.as_deref());
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    let loader = state.clone();
    tokio::task::spawn_blocking(move || match Model::load(&checkpoint) {
        Ok(model) => {
            eprintln!("loaded {} ({})", checkpoint.display(), model.checkpoint_hash);
            loader.set_model(model);
        }
        Err(e) => eprintln!("failed to load {}: {e}", checkpoint.display()),
    });
    axum::serve(listener, app).await?;
    Ok(())
}

//! HTTP captioning service.
//!
//! | method | path                        | body                                        |
//! |--------|-----------------------------|---------------------------------------------|
//! | POST   | `/v1/images`                | raw image bytes, or `{"image_base64": ...}` |
//! | POST   | `/v1/images/{id}/caption`   | `{region, aggregation?, return_weights?}`   |
//! | GET    | `/v1/health`                |                                             |
//! | GET    | `/v1/config`                |                                             |
//!
//! Image ids are the hex SHA-256 of the uploaded bytes. Each image is
//! encoded once and its patch grid kept in a byte-budgeted LRU cache, so any
//! number of regions can be captioned without another backbone pass.

mod cache;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use pioner_core::backbones::{build_backbone, content_hash, decode_image, Backbone, BackboneError};
use pioner_core::gap::GapMode;
use pioner_core::pipeline::{load_captioner, Captioner, PipelineError};
use pioner_core::regions::RegionError;
use pioner_core::types::{region_spec_from_value, Aggregation};
use pioner_core::{Config, ImageSize};
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub use cache::{CachedGrid, GridCache};

#[derive(Debug, Clone, Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    TooLarge(String),
    #[error("unknown image id {0}; upload the image again with POST /v1/images")]
    NotFound(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("server busy: caption queue is full")]
    Busy,
    #[error("{0}")]
    Unavailable(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::TooLarge(_) => StatusCode::PAYLOAD_TOO_LARGE,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Busy => StatusCode::TOO_MANY_REQUESTS,
            ApiError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({"error": self.to_string()}))).into_response()
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Region(r) => ApiError::Unprocessable(r.to_string()),
            PipelineError::Gap(g) => ApiError::Unprocessable(g.to_string()),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

/// Shared, immutable-after-start server state.
pub struct AppState {
    backbone: Option<Arc<dyn Backbone>>,
    captioner: Option<Captioner>,
    problems: Vec<String>,
    cache: GridCache,
    config: Config,
    admission: Arc<Semaphore>,
    workers: Arc<Semaphore>,
}

impl AppState {
    /// Missing components leave the server up in a degraded state.
    pub fn new(config: Config, backbone: Option<Arc<dyn Backbone>>, captioner: Option<Captioner>) -> Self {
        let mut problems = Vec::new();
        if backbone.is_none() {
            problems.push("backbone not loaded".to_string());
        }
        if captioner.is_none() {
            problems.push("decoder checkpoint not loaded".to_string());
        }
        let workers = config.service.workers.max(1);
        Self {
            backbone,
            captioner,
            problems,
            cache: GridCache::new(config.service.cache_bytes),
            admission: Arc::new(Semaphore::new(workers + config.service.queue)),
            workers: Arc::new(Semaphore::new(workers)),
            config,
        }
    }

    /// Loads backbone, checkpoint and memory bank as configured, recording
    /// failures for `/v1/health` instead of refusing to start.
    pub fn from_config(config: Config) -> Self {
        let mut problems = Vec::new();
        let backbone = build_backbone(&config.backbone).map_err(|e| problems.push(format!("backbone: {e}"))).ok();
        let captioner = load_captioner(&config).map_err(|e| problems.push(format!("decoder: {e}"))).ok();
        let mut state = Self::new(config, backbone, captioner);
        if !problems.is_empty() {
            state.problems = problems;
        }
        for p in &state.problems {
            log::warn!("service degraded: {p}");
        }
        state
    }

    pub fn cache(&self) -> &GridCache {
        &self.cache
    }

    pub fn config(&self) -> &Config {
        &self.config
    }
}

#[derive(Deserialize)]
struct Base64Upload {
    image_base64: String,
}

async fn upload(State(st): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Result<Json<Value>, ApiError> {
    let is_json = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"));
    let bytes: Vec<u8> = if is_json {
        let req: Base64Upload =
            serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(format!("expected {{\"image_base64\": ...}}: {e}")))?;
        base64::engine::general_purpose::STANDARD
            .decode(req.image_base64.trim())
            .map_err(|e| ApiError::BadRequest(format!("invalid base64: {e}")))?
    } else {
        body.to_vec()
    };
    if bytes.is_empty() {
        return Err(ApiError::BadRequest("empty image body".into()));
    }
    let max = st.config.service.max_image_bytes;
    if bytes.len() > max {
        return Err(ApiError::TooLarge(format!("image is {} bytes, limit is {max}", bytes.len())));
    }
    let backbone = st.backbone.clone().ok_or_else(|| ApiError::Unavailable("backbone unavailable".into()))?;
    let id = content_hash(&bytes);
    let (entry, cached) = st
        .cache
        .get_or_encode(&id, move || {
            let image = decode_image(&bytes).map_err(|e| match e {
                BackboneError::UnsupportedImage(m) => ApiError::BadRequest(format!("undecodable image: {m}")),
                other => ApiError::BadRequest(other.to_string()),
            })?;
            let grid = backbone.encode_image(&image).map_err(|e| ApiError::Internal(format!("encode failed: {e}")))?;
            Ok((grid, ImageSize::new(image.width(), image.height())))
        })
        .await?;
    Ok(Json(json!({
        "image_id": entry.id,
        "grid_rows": entry.grid.rows(),
        "grid_cols": entry.grid.cols(),
        "width": entry.image.width,
        "height": entry.image.height,
        "cached": cached,
    })))
}

async fn caption(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    // held until the response is built; a full queue is rejected, never awaited
    let _admitted = st.admission.clone().try_acquire_owned().map_err(|_| ApiError::Busy)?;
    let req: Value = serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(format!("invalid JSON body: {e}")))?;
    let region = req.get("region").cloned().ok_or_else(|| ApiError::Unprocessable("missing `region`".into()))?;
    let spec = region_spec_from_value(region).map_err(|e| ApiError::Unprocessable(e.to_string()))?;
    let base = st.captioner.as_ref().ok_or_else(|| ApiError::Unavailable("decoder checkpoint not loaded".into()))?;
    let mut captioner = base.clone();
    if let Some(a) = req.get("aggregation").filter(|v| !v.is_null()) {
        let name = a.as_str().ok_or_else(|| ApiError::Unprocessable("`aggregation` must be a string".into()))?;
        captioner.aggregation = name.parse::<Aggregation>().map_err(|e| ApiError::Unprocessable(e.to_string()))?;
    }
    let return_weights = match req.get("return_weights") {
        None | Some(Value::Null) => false,
        Some(Value::Bool(b)) => *b,
        Some(_) => return Err(ApiError::Unprocessable("`return_weights` must be a boolean".into())),
    };
    let entry = st.cache.get(&id).ok_or_else(|| ApiError::NotFound(id.clone()))?;

    let _running = st.workers.clone().acquire_owned().await.map_err(|e| ApiError::Internal(e.to_string()))?;
    let spec_for_task = spec.clone();
    let out = tokio::task::spawn_blocking(move || captioner.caption_grid(&entry.grid, entry.image, &spec_for_task))
        .await
        .map_err(|e| ApiError::Internal(format!("caption task failed: {e}")))?
        .map_err(|e| match e {
            PipelineError::Region(RegionError::Mode(m)) => ApiError::Unprocessable(m),
            other => ApiError::from(other),
        })?;
    let mut resp = json!({
        "image_id": id,
        "caption": out.caption.text,
        "region_kind": spec.kind().to_string(),
        "empty": out.caption.is_empty(),
    });
    if return_weights {
        resp["weights"] = json!({"indices": out.patch_indices, "weights": out.patch_weights});
    }
    Ok(Json(resp))
}

async fn health(State(st): State<Arc<AppState>>) -> Json<Value> {
    let status = if st.problems.is_empty() { "ok" } else { "degraded" };
    Json(json!({
        "status": status,
        "backbone": st.backbone.is_some(),
        "checkpoint": st.captioner.is_some(),
        "gap_mode": st.captioner.as_ref().map(|c| c.mode().to_string()),
        // a memory-mode captioner cannot be built without its bank
        "bank": st.captioner.as_ref().is_some_and(|c| c.mode() == GapMode::Memory),
        "problems": st.problems,
        "cached_images": st.cache.len(),
        "cache_bytes": st.cache.total_bytes(),
    }))
}

/// Config snapshot with secrets removed.
async fn config(State(st): State<Arc<AppState>>) -> Json<Value> {
    let mut snap = st.config.snapshot();
    for (k, v) in snap.iter_mut() {
        if k == "llm.url" || k.starts_with("metrics.plugin.") || k.contains("token") {
            *v = json!("<redacted>");
        }
    }
    Json(json!(snap))
}

pub fn router(state: Arc<AppState>) -> Router {
    let origin = &state.config.service.cors_origin;
    let allow = if origin == "*" {
        AllowOrigin::from(Any)
    } else {
        match HeaderValue::from_str(origin) {
            Ok(v) => AllowOrigin::exact(v),
            Err(_) => {
                log::warn!("invalid service.cors_origin {origin:?}; allowing any origin");
                AllowOrigin::from(Any)
            }
        }
    };
    let cors = CorsLayer::new().allow_origin(allow).allow_methods(Any).allow_headers(Any);
    // base64 bodies are 4/3 the image size; larger bodies get 413 from the limit layer
    let body_limit = state.config.service.max_image_bytes / 3 * 4 + 4096;
    Router::new()
        .route("/v1/images", post(upload))
        .route("/v1/images/{id}/caption", post(caption))
        .route("/v1/health", get(health))
        .route("/v1/config", get(config))
        .layer(DefaultBodyLimit::max(body_limit))
        .layer(cors)
        .with_state(state)
}

/// Binds `addr` and serves until the process is stopped. The bound address
/// is reported through `on_bound` (useful with port 0).
pub async fn serve(state: Arc<AppState>, addr: SocketAddr, on_bound: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

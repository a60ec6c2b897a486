//! Routes.
//!
//! `POST /api/colorize` accepts either
//!
//! * `application/json`: `{"image": "<base64 PNG/JPEG>", "description": "a red bird", "checkpoint": "id"}`
//! * `multipart/form-data` with parts `image` (file), `description` and optional `checkpoint`.
//!
//! and answers `{"image": "<base64 PNG>", "model": "id", "elapsed_ms": 12, "width": 256, "height": 256}`.
//! With `Accept: image/png` the body is the raw PNG and the model id and
//! timing travel in the `x-model-id` and `x-elapsed-ms` headers.
//!
//! Errors are `{"error": "..."}` with status 400 (bad image, missing or
//! overlong description, malformed body), 404 (unknown checkpoint id),
//! 415 (other content types), 422 (checkpoint rejected by the loader) or
//! 503 (no model loaded).

use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use candle_core::Device;
use serde::{Deserialize, Serialize};
use serde_json::json;
use textcolor::imageio;

use crate::config::MAX_DESCRIPTION_CHARS;
use crate::registry::{self, ModelInfo, Registry};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub struct AppState {
    pub registry: RwLock<Registry>,
    pub device: Device,
}

impl AppState {
    pub fn new(device: Device) -> Self {
        Self {
            registry: RwLock::new(Registry::default()),
            device,
        }
    }

    /// Loads and registers a checkpoint. The registry lock is held only for the insert.
    pub fn register(&self, path: &std::path::Path) -> textcolor::Result<String> {
        let colorizer = registry::load(path, &self.device)?;
        Ok(self.registry.write().expect("registry lock").insert(path, colorizer))
    }
}

pub type SharedState = Arc<AppState>;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

pub fn router(state: SharedState, max_body_bytes: usize) -> Router {
    Router::new()
        .route("/api/colorize", post(colorize))
        .route("/api/health", get(health))
        .route("/api/models", get(list_models).post(register_model))
        .layer(DefaultBodyLimit::max(max_body_bytes))
        .with_state(state)
}

#[derive(Debug, Default, Deserialize)]
struct JsonColorize {
    image: Option<String>,
    description: Option<String>,
    checkpoint: Option<String>,
}

#[derive(Debug, Serialize)]
struct ColorizeResponse {
    image: String,
    model: String,
    elapsed_ms: u64,
    width: usize,
    height: usize,
}

struct ColorizeRequest {
    image: Vec<u8>,
    description: String,
    checkpoint: Option<String>,
}

async fn read_request(req: Request) -> Result<ColorizeRequest, ApiError> {
    let ctype = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_ascii_lowercase();
    let (image, description, checkpoint) = if ctype.starts_with("multipart/form-data") {
        let mut mp = Multipart::from_request(req, &())
            .await
            .map_err(|e| ApiError::bad_request(e.body_text()))?;
        let (mut image, mut description, mut checkpoint) = (None, None, None);
        while let Some(field) = mp.next_field().await.map_err(|e| ApiError::bad_request(e.body_text()))? {
            let name = field.name().unwrap_or_default().to_string();
            match name.as_str() {
                "image" => image = Some(field.bytes().await.map_err(|e| ApiError::bad_request(e.body_text()))?.to_vec()),
                "description" => description = Some(field.text().await.map_err(|e| ApiError::bad_request(e.body_text()))?),
                "checkpoint" => checkpoint = Some(field.text().await.map_err(|e| ApiError::bad_request(e.body_text()))?),
                _ => {}
            }
        }
        (image, description, checkpoint)
    } else if ctype.starts_with("application/json") {
        let body = Bytes::from_request(req, &())
            .await
            .map_err(|e| ApiError::bad_request(e.body_text()))?;
        let parsed: JsonColorize =
            serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))?;
        let image = match parsed.image {
            Some(s) => Some(B64.decode(s.trim()).map_err(|e| ApiError::bad_request(format!("image is not base64: {e}")))?),
            None => None,
        };
        (image, parsed.description, parsed.checkpoint)
    } else {
        return Err(ApiError::new(
            StatusCode::UNSUPPORTED_MEDIA_TYPE,
            "expected application/json or multipart/form-data",
        ));
    };
    let description = description.ok_or_else(|| ApiError::bad_request("missing field: description"))?;
    if description.chars().count() > MAX_DESCRIPTION_CHARS {
        return Err(ApiError::bad_request(format!(
            "description longer than {MAX_DESCRIPTION_CHARS} characters"
        )));
    }
    let image = image.ok_or_else(|| ApiError::bad_request("missing field: image"))?;
    Ok(ColorizeRequest {
        image,
        description,
        checkpoint: checkpoint.filter(|c| !c.is_empty()),
    })
}

async fn colorize(State(state): State<SharedState>, headers: HeaderMap, req: Request) -> Result<Response, ApiError> {
    if state.registry.read().expect("registry lock").is_empty() {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no model loaded"));
    }
    let req = read_request(req).await?;
    let (model, colorizer) = {
        let reg = state.registry.read().expect("registry lock");
        let entry = reg.get(req.checkpoint.as_deref()).ok_or_else(|| match &req.checkpoint {
            Some(id) => ApiError::new(StatusCode::NOT_FOUND, format!("unknown checkpoint id {id:?}")),
            None => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no model loaded"),
        })?;
        (entry.id.clone(), entry.colorizer.clone())
    };
    let start = Instant::now();
    let (png, size) = tokio::task::spawn_blocking(move || -> Result<(Vec<u8>, usize), ApiError> {
        let image = imageio::decode(&req.image).map_err(|e| ApiError::bad_request(format!("undecodable image: {e}")))?;
        let out = colorizer
            .colorize(&image, &req.description)
            .and_then(|img| imageio::encode_png(&img))
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        Ok((out, colorizer.image_size()))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let elapsed_ms = start.elapsed().as_millis() as u64;
    log::info!("colorize model={model} {elapsed_ms} ms");

    let wants_png = headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|a| a.contains("image/png") && !a.contains("application/json"));
    if wants_png {
        let mut resp = png.into_response();
        let h = resp.headers_mut();
        h.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
        if let Ok(v) = HeaderValue::from_str(&model) {
            h.insert("x-model-id", v);
        }
        h.insert("x-elapsed-ms", HeaderValue::from(elapsed_ms));
        return Ok(resp);
    }
    Ok(Json(ColorizeResponse {
        image: B64.encode(&png),
        model,
        elapsed_ms,
        width: size,
        height: size,
    })
    .into_response())
}

async fn health(State(state): State<SharedState>) -> Json<serde_json::Value> {
    let ids = state.registry.read().expect("registry lock").ids();
    let status = if ids.is_empty() { "degraded" } else { "ok" };
    Json(json!({ "status": status, "models": ids, "version": VERSION }))
}

#[derive(Debug, Serialize)]
struct ModelList {
    default: Option<String>,
    models: Vec<ModelInfo>,
}

async fn list_models(State(state): State<SharedState>) -> Json<ModelList> {
    let reg = state.registry.read().expect("registry lock");
    Json(ModelList {
        default: reg.default_id().map(str::to_string),
        models: reg.list(),
    })
}

#[derive(Debug, Deserialize)]
struct RegisterRequest {
    path: PathBuf,
}

async fn register_model(State(state): State<SharedState>, body: Bytes) -> Result<Json<serde_json::Value>, ApiError> {
    let req: RegisterRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("expected {{\"path\": ...}}: {e}")))?;
    let st = state.clone();
    let path = req.path.clone();
    let id = tokio::task::spawn_blocking(move || st.register(&path))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    log::info!("registered {} as {id}", req.path.display());
    Ok(Json(json!({ "id": id })))
}

//! HTTP API over one frozen model.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ampn_core::checkpoint::Checkpoint;
use ampn_core::io::{decode_mask_png, decode_png, encode_png};
use ampn_core::model::Model;
use ampn_core::render::{render_png, RenderRequest, DEFAULT_FOCUS_THRESHOLD};
use ampn_core::Error as CoreError;
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde_json::json;
use sha2::{Digest, Sha256};
use tower_http::services::ServeDir;

use crate::error::CliError;

pub const DEFAULT_MAX_PIXELS: usize = 4096 * 4096;
const BODY_LIMIT: usize = 64 << 20;

pub const MASK_SOURCE_HEADER: &str = "x-ampn-mask-source";
/// Base64 PNG of the generator's mask, sent when `return_mask=1`.
pub const MASK_HEADER: &str = "x-ampn-mask";
pub const RESIZED_HEADER: &str = "x-ampn-resized-from";

pub struct AppState {
    pub model: Option<Model>,
    /// Hex SHA-256 of the checkpoint bytes.
    pub model_hash: Option<String>,
    pub max_pixels: usize,
}

impl AppState {
    pub fn unloaded(max_pixels: usize) -> Self {
        AppState { model: None, model_hash: None, max_pixels }
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], max_pixels: usize) -> Result<Self, CoreError> {
        let model = Checkpoint::from_bytes(bytes)?.to_model()?;
        let hash = hex::encode(Sha256::digest(bytes));
        Ok(AppState { model: Some(model), model_hash: Some(hash), max_pixels })
    }

    pub fn from_checkpoint_file(path: &Path, max_pixels: usize) -> Result<Self, CliError> {
        if !path.exists() {
            return Err(CoreError::MissingFile(path.to_path_buf()).into());
        }
        Ok(Self::from_checkpoint_bytes(&std::fs::read(path)?, max_pixels)?)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    detail: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, detail: impl Into<String>) -> Self {
        ApiError { status, code, detail: detail.into() }
    }

    fn bad_request(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", detail)
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let detail = e.to_string();
        match e {
            CoreError::ShapeMismatch { .. } => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "shape_mismatch", detail),
            CoreError::Config(_) | CoreError::Dimension(_) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "config_mismatch", detail)
            }
            CoreError::InvalidArgument(_)
            | CoreError::InvalidImage(_)
            | CoreError::UnsupportedFormat(_)
            | CoreError::Codec(_) => Self::bad_request(detail),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", detail),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.code, "detail": self.detail }))).into_response()
    }
}

pub fn router(state: AppState, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/render", post(render))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(Arc::new(state));
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    match &state.model_hash {
        Some(hash) => Json(json!({ "status": "ok", "model": hash })).into_response(),
        None => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded", "no checkpoint loaded").into_response(),
    }
}

#[derive(Default)]
struct RenderForm {
    image: Option<Bytes>,
    mask: Option<Bytes>,
    background_level: Option<f32>,
    focus_threshold: Option<f32>,
    return_mask: bool,
}

fn parse_number(name: &str, text: &str) -> Result<f32, ApiError> {
    text.trim().parse().map_err(|_| ApiError::bad_request(format!("{name} is not a number: {text:?}")))
}

async fn read_form(mut multipart: Multipart) -> Result<RenderForm, ApiError> {
    let mut form = RenderForm::default();
    let field_error = |e: axum::extract::multipart::MultipartError| {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large", e.body_text())
        } else {
            ApiError::bad_request(e.body_text())
        }
    };
    while let Some(field) = multipart.next_field().await.map_err(field_error)? {
        let name = field.name().unwrap_or_default().to_owned();
        match name.as_str() {
            "image" => form.image = Some(field.bytes().await.map_err(field_error)?),
            "mask" => form.mask = Some(field.bytes().await.map_err(field_error)?),
            "background_level" => {
                let text = field.text().await.map_err(field_error)?;
                if !text.trim().is_empty() {
                    form.background_level = Some(parse_number(&name, &text)?);
                }
            }
            "focus_threshold" => {
                let text = field.text().await.map_err(field_error)?;
                form.focus_threshold = Some(parse_number(&name, &text)?);
            }
            "return_mask" => {
                form.return_mask = match field.text().await.map_err(field_error)?.trim() {
                    "1" => true,
                    "0" | "" => false,
                    other => return Err(ApiError::bad_request(format!("return_mask must be 0 or 1, got {other:?}"))),
                }
            }
            other => return Err(ApiError::bad_request(format!("unknown field {other:?}"))),
        }
    }
    Ok(form)
}

fn check_size(what: &str, h: usize, w: usize, max_pixels: usize) -> Result<(), ApiError> {
    if h * w > max_pixels {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "payload_too_large",
            format!("{what} of {h}x{w} exceeds {max_pixels} pixels"),
        ));
    }
    Ok(())
}

async fn render(State(state): State<Arc<AppState>>, multipart: Multipart) -> Result<Response, ApiError> {
    if state.model.is_none() {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded", "no checkpoint loaded"));
    }
    let form = read_form(multipart).await?;
    let image_bytes = form.image.ok_or_else(|| ApiError::bad_request("missing image field"))?;
    let image = decode_png(&image_bytes)?;
    check_size("image", image.height(), image.width(), state.max_pixels)?;
    let mask = match &form.mask {
        Some(b) => {
            let m = decode_mask_png(b)?;
            check_size("mask", m.height(), m.width(), state.max_pixels)?;
            Some(m)
        }
        None => None,
    };
    let req = RenderRequest {
        image,
        mask,
        background_level: form.background_level,
        focus_threshold: form.focus_threshold.unwrap_or(DEFAULT_FOCUS_THRESHOLD),
    };
    let return_mask = form.return_mask;
    let worker = Arc::clone(&state);
    let (png, resp) = tokio::task::spawn_blocking(move || {
        let model = worker.model.as_ref().expect("checked above");
        render_png(model, &req)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;

    let mut headers = HeaderMap::new();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    headers.insert(MASK_SOURCE_HEADER, HeaderValue::from_static(resp.mask_source.as_str()));
    if let Some((h, w)) = resp.resized_from {
        headers.insert(RESIZED_HEADER, HeaderValue::from_str(&format!("{h}x{w}")).expect("ascii"));
    }
    if return_mask {
        let mask_png = encode_png(&resp.mask.to_image())?;
        let encoded = base64::engine::general_purpose::STANDARD.encode(mask_png);
        headers.insert(MASK_HEADER, HeaderValue::from_str(&encoded).expect("base64 is ascii"));
    }
    Ok((headers, png).into_response())
}

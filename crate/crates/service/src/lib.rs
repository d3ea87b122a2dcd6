//! HTTP inference service for the manual-guidance workflow.
//!
//! One generator is loaded at startup and shared read-only between requests.
//! Images travel as base64 PNG. LR grids may also travel as flat arrays of
//! `m * n * 3` values in `[-1, 1]`, row-major with interleaved channels
//! (`[r, g, b, r, g, b, ...]`), which is what an editor manipulates.
//!
//! | route | body | reply |
//! |---|---|---|
//! | `POST /api/generate` | `{source, lr_target, seed?}` | `{image, consistency, latency_ms, seed}` |
//! | `POST /api/downscale` | `{source, factor?}` | `{width, height, factor, values}` |
//! | `GET /api/info` | | model metadata |
//!
//! Anything else falls through to the static UI bundle when one is configured.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::RgbImage;
use lri2i::checkpoint::{self, CheckpointInfo};
use lri2i::imaging::{decode_rgb, downscale_consistency, downscale_tensor, encode_png, image_to_tensor, tensor_to_image};
use lri2i::networks::Generator;
use lri2i::{Error, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tower_http::services::ServeDir;

const BODY_LIMIT: usize = 32 * 1024 * 1024;

/// A generator of either precision.
enum Net {
    F32(Generator<f32>),
    F64(Generator<f64>),
}

fn run<T: Scalar>(g: &Generator<T>, source: &Tensor<f64>, lr: &Tensor<f64>) -> lri2i::Result<Tensor<f64>> {
    Ok(g.translate(&source.cast::<T>(), &lr.cast::<T>())?.cast::<f64>())
}

pub struct LoadedModel {
    net: Net,
    info: CheckpointInfo,
}

impl LoadedModel {
    pub fn from_checkpoint(path: &Path) -> lri2i::Result<Self> {
        let info = checkpoint::info(path)?;
        let net = match info.dtype.as_str() {
            "f32" => Net::F32(checkpoint::load_generator::<f32>(path)?.0),
            _ => Net::F64(checkpoint::load_generator::<f64>(path)?.0),
        };
        Ok(LoadedModel { net, info })
    }

    pub fn info(&self) -> &CheckpointInfo {
        &self.info
    }

    pub fn hr_size(&self) -> usize {
        self.info.config.hr_size
    }

    pub fn lr_size(&self) -> usize {
        self.info.config.lr_size
    }

    pub fn factor(&self) -> usize {
        self.info.config.downscale_factor()
    }

    /// `G(source | lr)` on `[B, 3, H, W]` tensors, computed in the
    /// checkpoint's precision.
    pub fn generate(&self, source: &Tensor<f64>, lr: &Tensor<f64>) -> lri2i::Result<Tensor<f64>> {
        match &self.net {
            Net::F32(g) => run(g, source, lr),
            Net::F64(g) => run(g, source, lr),
        }
    }
}

#[derive(Clone, Default)]
pub struct AppState {
    pub model: Option<Arc<LoadedModel>>,
    pub static_dir: Option<PathBuf>,
}

impl AppState {
    pub fn with_model(model: LoadedModel) -> Self {
        AppState {
            model: Some(Arc::new(model)),
            static_dir: None,
        }
    }
}

// ---------------------------------------------------------------------------
// errors

/// JSON error reply: `{"error": message, "field": name}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub field: Option<String>,
    pub message: String,
}

#[derive(Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub field: Option<String>,
}

impl ApiError {
    fn bad_request(field: &str, message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            field: Some(field.to_string()),
            message: message.into(),
        }
    }

    fn unprocessable(field: &str, message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            field: Some(field.to_string()),
            message: message.into(),
        }
    }

    fn no_model() -> Self {
        ApiError {
            status: StatusCode::SERVICE_UNAVAILABLE,
            field: None,
            message: "no model loaded".into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            field: None,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Shape(m) => ApiError {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                field: None,
                message: m,
            },
            Error::InvalidField { field, message } => ApiError::bad_request(&field, message),
            other => ApiError::internal(other.to_string()),
        }
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.field {
            Some(field) => write!(f, "{field}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ApiError {}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.message,
            field: self.field,
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

// ---------------------------------------------------------------------------
// payloads

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    /// Base64 PNG.
    pub image: String,
    /// `mean |DS(output) - lr_target|` before 8-bit encoding.
    pub consistency: f64,
    pub latency_ms: f64,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownscaleResponse {
    pub width: usize,
    pub height: usize,
    pub factor: usize,
    /// Row-major, channels interleaved.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfoResponse {
    pub hr_size: usize,
    pub lr_size: usize,
    pub downscale_factor: usize,
    pub color_step: f64,
    pub dtype: String,
    pub step: u64,
    pub config_hash: String,
    /// SHA-256 of the checkpoint file.
    pub checkpoint_hash: String,
    pub lr_layout: String,
}

fn parse_body(body: &[u8]) -> Result<serde_json::Map<String, Value>, ApiError> {
    match serde_json::from_slice::<Value>(body) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(ApiError::bad_request("body", "expected a JSON object")),
        Err(e) => Err(ApiError::bad_request("body", format!("invalid JSON: {e}"))),
    }
}

fn decode_png_field(value: Option<&Value>, field: &str) -> Result<RgbImage, ApiError> {
    let text = match value {
        Some(Value::String(s)) => s,
        Some(_) => return Err(ApiError::bad_request(field, "expected a base64 PNG string")),
        None => return Err(ApiError::bad_request(field, "missing")),
    };
    // tolerate data URLs as produced by browsers
    let text = text.split_once("base64,").map_or(text.as_str(), |(_, b)| b);
    let bytes = B64
        .decode(text.trim())
        .map_err(|e| ApiError::bad_request(field, format!("invalid base64: {e}")))?;
    decode_rgb(&bytes).map_err(|e| ApiError::bad_request(field, format!("undecodable image: {e}")))
}

/// Interleaved `m * n * 3` values to a `[1, 3, m, n]` tensor.
pub fn values_to_tensor(values: &[f64], height: usize, width: usize) -> lri2i::Result<Tensor<f64>> {
    if values.len() != height * width * 3 {
        return Err(Error::Shape(format!(
            "{} values cannot form a {height}x{width} RGB grid",
            values.len()
        )));
    }
    let plane = height * width;
    let mut data = vec![0.0; 3 * plane];
    for (k, v) in values.iter().enumerate() {
        data[(k % 3) * plane + k / 3] = *v;
    }
    Tensor::from_vec(&[1, 3, height, width], data)
}

/// Inverse of [`values_to_tensor`] for item 0 of a batch.
pub fn tensor_to_values(t: &Tensor<f64>) -> lri2i::Result<Vec<f64>> {
    let [_, c, h, w] = t.dims4()?;
    let plane = h * w;
    let d = t.data();
    Ok((0..c * plane).map(|k| d[(k % c) * plane + k / c]).collect())
}

fn parse_lr_target(value: Option<&Value>, lr_size: usize) -> Result<Tensor<f64>, ApiError> {
    const FIELD: &str = "lr_target";
    match value {
        Some(Value::Array(items)) => {
            let values = items
                .iter()
                .map(|v| v.as_f64().ok_or_else(|| ApiError::bad_request(FIELD, "array entries must be numbers")))
                .collect::<Result<Vec<_>, _>>()?;
            if values.len() != lr_size * lr_size * 3 {
                return Err(ApiError::unprocessable(
                    FIELD,
                    format!(
                        "expected {} values ({lr_size}x{lr_size}x3), got {}",
                        lr_size * lr_size * 3,
                        values.len()
                    ),
                ));
            }
            let clamped: Vec<f64> = values.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
            Ok(values_to_tensor(&clamped, lr_size, lr_size)?)
        }
        Some(Value::String(_)) => {
            let img = decode_png_field(value, FIELD)?;
            if (img.width() as usize, img.height() as usize) != (lr_size, lr_size) {
                return Err(ApiError::unprocessable(
                    FIELD,
                    format!("expected {lr_size}x{lr_size}, got {}x{}", img.width(), img.height()),
                ));
            }
            Ok(image_to_tensor(&img))
        }
        Some(_) => Err(ApiError::bad_request(FIELD, "expected a base64 PNG string or an array of numbers")),
        None => Err(ApiError::bad_request(FIELD, "missing")),
    }
}

fn optional_u64(map: &serde_json::Map<String, Value>, field: &str) -> Result<Option<u64>, ApiError> {
    match map.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_u64()
            .map(Some)
            .ok_or_else(|| ApiError::bad_request(field, "expected a non-negative integer")),
    }
}

// ---------------------------------------------------------------------------
// handlers

/// Validated inputs of one generate call.
pub struct GenerateInput {
    pub source: Tensor<f64>,
    pub lr_target: Tensor<f64>,
    pub seed: Option<u64>,
}

pub fn parse_generate(model: &LoadedModel, body: &[u8]) -> Result<GenerateInput, ApiError> {
    let map = parse_body(body)?;
    let source = decode_png_field(map.get("source"), "source")?;
    let hr = model.hr_size();
    if (source.width() as usize, source.height() as usize) != (hr, hr) {
        return Err(ApiError::unprocessable(
            "source",
            format!("expected {hr}x{hr}, got {}x{}", source.width(), source.height()),
        ));
    }
    let lr_target = parse_lr_target(map.get("lr_target"), model.lr_size())?;
    let seed = optional_u64(&map, "seed")?;
    Ok(GenerateInput {
        source: image_to_tensor(&source),
        lr_target,
        seed,
    })
}

/// The generation itself, without any transport concerns.
pub fn respond(model: &LoadedModel, input: &GenerateInput) -> Result<GenerateResponse, ApiError> {
    let start = Instant::now();
    let out = model.generate(&input.source, &input.lr_target)?;
    let consistency = downscale_consistency(&out, &input.lr_target)?;
    let png = encode_png(&tensor_to_image(&out, 0)?)?;
    Ok(GenerateResponse {
        image: B64.encode(png),
        consistency,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
        seed: input.seed,
    })
}

async fn generate(State(state): State<AppState>, body: Bytes) -> ApiResult<GenerateResponse> {
    let model = state.model.clone().ok_or_else(ApiError::no_model)?;
    let input = parse_generate(&model, &body)?;
    let reply = tokio::task::spawn_blocking(move || respond(&model, &input))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(reply))
}

async fn downscale(State(state): State<AppState>, body: Bytes) -> ApiResult<DownscaleResponse> {
    let map = parse_body(&body)?;
    let source = decode_png_field(map.get("source"), "source")?;
    let factor = match optional_u64(&map, "factor")? {
        Some(f) => f as usize,
        None => state
            .model
            .as_ref()
            .map(|m| m.factor())
            .ok_or_else(|| ApiError::bad_request("factor", "missing and no model loaded to infer it"))?,
    };
    Ok(Json(downscale_image(&source, factor)?))
}

/// Average-pooled LR grid of `img` as interleaved values. Shared with the
/// command line so both front ends produce identical numbers.
pub fn downscale_image(img: &RgbImage, factor: usize) -> Result<DownscaleResponse, ApiError> {
    if factor == 0 {
        return Err(ApiError::bad_request("factor", "must be positive"));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w % factor != 0 || h % factor != 0 {
        return Err(ApiError::unprocessable(
            "factor",
            format!("{factor} does not divide {w}x{h}"),
        ));
    }
    let lr = downscale_tensor(&image_to_tensor::<f64>(img), factor)?;
    Ok(DownscaleResponse {
        width: w / factor,
        height: h / factor,
        factor,
        values: tensor_to_values(&lr)?,
    })
}

async fn info(State(state): State<AppState>) -> ApiResult<InfoResponse> {
    let model = state.model.as_ref().ok_or_else(ApiError::no_model)?;
    let i = model.info();
    Ok(Json(InfoResponse {
        hr_size: model.hr_size(),
        lr_size: model.lr_size(),
        downscale_factor: model.factor(),
        color_step: i.config.color_step,
        dtype: i.dtype.clone(),
        step: i.step,
        config_hash: i.config_hash.clone(),
        checkpoint_hash: i.file_hash.clone(),
        lr_layout: "row-major rgb interleaved".into(),
    }))
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/api/generate", post(generate))
        .route("/api/downscale", post(downscale))
        .route("/api/info", get(info))
        .layer(DefaultBodyLimit::max(BODY_LIMIT));
    let app = match &state.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    app.with_state(state)
}

pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}


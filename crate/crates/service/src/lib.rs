//! HTTP/JSON scenario service.
//!
//! | method | path        | body                | response                         |
//! |--------|-------------|---------------------|----------------------------------|
//! | GET    | `/health`   |                     | `{"status":"ok","model_hashes"}` |
//! | POST   | `/generate` | [`GenerateRequest`] | [`GenerateResponse`]             |
//! | POST   | `/evaluate` | [`EvaluateRequest`] | `MetricReport`                   |
//! | GET    | `/palette`  |                     | palette JSON                     |
//!
//! Images travel as base64-encoded PNG strings. Errors are
//! `{"code", "message", "field"}` with status 422 for invalid input, 409
//! when a mask does not match the model resolution and 503 while models are
//! loading, when loading failed, or when a request exceeds the timeout.
//!
//! Example `/generate` body:
//!
//! ```json
//! {"city_style":"Chicago",
//!  "proportions":{"road":25.0,"sidewalk":8.0,"building":30.0,"sky":15.0,"tree":10.0,"person":1.0},
//!  "counts":{"cars":2,"persons":1,"bicycles":0,"buses":0},
//!  "road_mask":null,"seed":7}
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

use streetscape::conditioning::{ConditionError, ConditionSpec};
use streetscape::corpus::{decode_mask_png_lenient, decode_rgb_png, decode_seg_png, encode_rgb_png, encode_seg_png};
use streetscape::harness::mask_iou;
use streetscape::metrics::{self, MetricReport};
use streetscape::pipeline::{GenRequest, Models};
use streetscape::seg::{count_objects, DEFAULT_MIN_AREA};
use streetscape::taxonomy::{CityStyle, Class, ClassPercents, LabelMap, ObjectCounts, Palette, Proportions};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("config file {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("invalid value for {var}: {value}")]
    Env { var: String, value: String },
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("server error: {0}")]
    Serve(std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    /// Directory with `base.ckpt`, `control.ckpt`, `segmenter.ckpt` and
    /// `features.ckpt`.
    pub ckpt_dir: PathBuf,
    /// Upper bound on concurrent sampling jobs.
    pub max_concurrent: usize,
    pub request_timeout_secs: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            ckpt_dir: PathBuf::from("ckpt"),
            max_concurrent: 2,
            request_timeout_secs: 30,
        }
    }
}

impl ServiceConfig {
    pub fn from_file(path: &Path) -> Result<Self, ServiceError> {
        let err = |message: String| ServiceError::Config { path: path.to_path_buf(), message };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        toml::from_str(&text).map_err(|e| err(e.to_string()))
    }

    /// Applies `STUDIO_PORT` and `STUDIO_CKPT_DIR` from `lookup`.
    pub fn apply_env(mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<Self, ServiceError> {
        if let Some(v) = lookup("STUDIO_PORT") {
            self.port = v.parse().map_err(|_| ServiceError::Env { var: "STUDIO_PORT".into(), value: v })?;
        }
        if let Some(v) = lookup("STUDIO_CKPT_DIR") {
            self.ckpt_dir = PathBuf::from(v);
        }
        Ok(self)
    }
}

/// Model availability.
#[derive(Clone)]
pub enum ModelSlot {
    Loading,
    Ready(Arc<Models>),
    Failed(String),
}

#[derive(Clone)]
pub struct AppState {
    slot: Arc<RwLock<ModelSlot>>,
    permits: Arc<Semaphore>,
    timeout: Duration,
}

impl AppState {
    pub fn loading(cfg: &ServiceConfig) -> Self {
        Self {
            slot: Arc::new(RwLock::new(ModelSlot::Loading)),
            permits: Arc::new(Semaphore::new(cfg.max_concurrent.max(1))),
            timeout: Duration::from_secs(cfg.request_timeout_secs.max(1)),
        }
    }

    pub fn ready(models: Models, cfg: &ServiceConfig) -> Self {
        let s = Self::loading(cfg);
        s.set(ModelSlot::Ready(Arc::new(models)));
        s
    }

    pub fn set(&self, slot: ModelSlot) {
        *self.slot.write().expect("model slot lock") = slot;
    }

    fn models(&self) -> Result<Arc<Models>, ApiError> {
        match &*self.slot.read().expect("model slot lock") {
            ModelSlot::Ready(m) => Ok(m.clone()),
            ModelSlot::Loading => Err(ApiError::unavailable("loading", "checkpoints are still loading")),
            ModelSlot::Failed(msg) => Err(ApiError::unavailable("load_failed", msg)),
        }
    }
}

/// Structured error body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub field: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>, field: Option<&str>) -> Self {
        Self {
            status,
            body: ErrorBody { code: code.into(), message: message.into(), field: field.map(String::from) },
        }
    }

    fn invalid(field: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", message, Some(field))
    }

    fn unavailable(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, code, message, None)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message, None)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    /// `"Chicago"`/`"Orlando"` or `"dense"`/`"sprawl"`.
    pub city_style: String,
    pub proportions: ClassPercents,
    pub counts: ObjectCounts,
    #[serde(default)]
    pub road_mask: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub image: String,
    pub seg_map: String,
    pub realized_proportions: Proportions,
    pub realized_counts: ObjectCounts,
    pub road_iou_vs_mask: Option<f64>,
    pub latency_ms: u64,
    pub seed: u64,
    pub model_hashes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateRequest {
    pub image: String,
    pub reference: String,
    /// Indexed-PNG segmentation of the reference; segmented when absent.
    #[serde(default)]
    pub reference_seg: Option<String>,
    #[serde(default)]
    pub arm: Option<String>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/palette", get(palette))
        .route("/generate", post(generate))
        .route("/evaluate", post(evaluate))
        .with_state(state)
}

async fn health(State(state): State<AppState>) -> Result<Json<serde_json::Value>, ApiError> {
    let models = state.models()?;
    Ok(Json(serde_json::json!({ "status": "ok", "model_hashes": models.hashes() })))
}

async fn palette() -> Json<Palette> {
    Json(Palette::standard())
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_json", e.to_string(), None))
}

fn decode_b64(field: &str, text: &str) -> Result<Vec<u8>, ApiError> {
    B64.decode(text.trim()).map_err(|e| ApiError::invalid(field, format!("not base64: {e}")))
}

/// Validated generation input.
struct GenJob {
    spec: ConditionSpec,
    mask: Option<streetscape::taxonomy::RoadMask>,
    seed: u64,
}

fn validate_generate(req: GenerateRequest, resolution: usize) -> Result<GenJob, ApiError> {
    let style = CityStyle::from_city(&req.city_style)
        .or_else(|| CityStyle::from_name(&req.city_style))
        .ok_or_else(|| ApiError::invalid("city_style", format!("unknown city style '{}'", req.city_style)))?;
    let spec = ConditionSpec { style, proportions: req.proportions, counts: req.counts };
    if let Err(e) = spec.validate() {
        let field = match &e {
            ConditionError::Domain { class, .. } => format!("proportions.{class}"),
            _ => "proportions".into(),
        };
        return Err(ApiError::invalid(&field, e.to_string()));
    }
    let mask = match &req.road_mask {
        None => None,
        Some(text) => {
            let bytes = decode_b64("road_mask", text)?;
            let m = decode_mask_png_lenient(&bytes, "road_mask").map_err(|e| ApiError::invalid("road_mask", e.to_string()))?;
            if m.width != resolution || m.height != resolution {
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    "resolution_mismatch",
                    format!("mask is {}x{} but the model works at {resolution}x{resolution}", m.width, m.height),
                    Some("road_mask"),
                ));
            }
            Some(m)
        }
    };
    Ok(GenJob { spec, mask, seed: req.seed.unwrap_or_else(rand::random) })
}

/// Runs `job` on the blocking pool under the concurrency cap and timeout.
async fn run_blocking<T: Send + 'static>(
    state: &AppState,
    job: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    let _permit = state.permits.clone().acquire_owned().await.map_err(|_| ApiError::internal("worker pool closed"))?;
    let handle = tokio::task::spawn_blocking(job);
    match tokio::time::timeout(state.timeout, handle).await {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => Err(ApiError::internal(format!("worker failed: {e}"))),
        Err(_) => Err(ApiError::unavailable("timeout", format!("request exceeded {:?}", state.timeout))),
    }
}

fn generate_blocking(models: &Models, job: GenJob) -> Result<GenerateResponse, ApiError> {
    let start = Instant::now();
    let req = GenRequest { spec: job.spec, mask: job.mask.clone(), seed: job.seed };
    let image = models.generate(&[req], 1).map_err(|e| ApiError::internal(e.to_string()))?.remove(0);
    let seg = models.segmenter.segment(&image).map_err(|e| ApiError::internal(e.to_string()))?;
    let road_iou_vs_mask = match &job.mask {
        Some(m) => Some(mask_iou(&seg, m).map_err(|e| ApiError::internal(e.to_string()))?),
        None => None,
    };
    let seg_png = encode_seg_png(&seg, &Palette::standard()).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(GenerateResponse {
        image: B64.encode(encode_rgb_png(&image)),
        seg_map: B64.encode(seg_png),
        realized_proportions: Proportions::from_counts_2dp(&seg.class_counts()),
        realized_counts: count_objects(&seg, DEFAULT_MIN_AREA),
        road_iou_vs_mask,
        latency_ms: start.elapsed().as_millis() as u64,
        seed: job.seed,
        model_hashes: models.hashes(),
    })
}

async fn generate(State(state): State<AppState>, body: Bytes) -> Result<Json<GenerateResponse>, ApiError> {
    let models = state.models()?;
    let req: GenerateRequest = parse_body(&body)?;
    let job = validate_generate(req, models.resolution())?;
    let resp = run_blocking(&state, move || generate_blocking(&models, job)).await?;
    Ok(Json(resp))
}

/// Scores one generated image against a reference. With a single pair the
/// Fréchet distance reduces to the squared distance between embeddings.
fn evaluate_blocking(models: &Models, image: image::RgbImage, reference: image::RgbImage, reference_seg: Option<LabelMap>, arm: String) -> Result<MetricReport, ApiError> {
    let internal = |e: &dyn std::fmt::Display| ApiError::internal(e.to_string());
    let emb = models.features.embed(&[&image, &reference]).map_err(|e| internal(&e))?;
    let fid = emb[0].iter().zip(&emb[1]).map(|(a, b)| (a - b).powi(2)).sum();
    let perceptual_distance = models.features.perceptual_distance(&image, &reference).map_err(|e| internal(&e))?;
    let ssim = metrics::ssim(&image, &reference).map_err(|e| internal(&e))?;
    let seg = models.segmenter.segment(&image).map_err(|e| internal(&e))?;
    let gt = match reference_seg {
        Some(m) => m,
        None => models.segmenter.segment(&reference).map_err(|e| internal(&e))?,
    };
    let miou = metrics::miou(&seg, &gt, &Class::ALL).map_err(|e| internal(&e))?;
    let mut classwise_iou = BTreeMap::new();
    for c in [Class::Tree, Class::Sky, Class::Building, Class::Road] {
        if let Some(v) = metrics::iou(&seg, &gt, c).map_err(|e| internal(&e))? {
            classwise_iou.insert(c.name().to_string(), v);
        }
    }
    Ok(MetricReport { arm, n_samples: 1, fid, perceptual_distance, ssim, miou, classwise_iou })
}

async fn evaluate(State(state): State<AppState>, body: Bytes) -> Result<Json<MetricReport>, ApiError> {
    let models = state.models()?;
    let req: EvaluateRequest = parse_body(&body)?;
    let image = decode_rgb_png(&decode_b64("image", &req.image)?, "image").map_err(|e| ApiError::invalid("image", e.to_string()))?;
    let reference = decode_rgb_png(&decode_b64("reference", &req.reference)?, "reference")
        .map_err(|e| ApiError::invalid("reference", e.to_string()))?;
    let res = models.resolution() as u32;
    for (field, img) in [("image", &image), ("reference", &reference)] {
        if img.dimensions() != (res, res) {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "resolution_mismatch",
                format!("{field} is {:?} but the model works at {res}x{res}", img.dimensions()),
                Some(field),
            ));
        }
    }
    let reference_seg = match &req.reference_seg {
        None => None,
        Some(t) => {
            let m = decode_seg_png(&decode_b64("reference_seg", t)?, &Palette::standard(), "reference_seg")
                .map_err(|e| ApiError::invalid("reference_seg", e.to_string()))?;
            if (m.width as u32, m.height as u32) != (res, res) {
                return Err(ApiError::new(StatusCode::CONFLICT, "resolution_mismatch", "reference_seg size differs", Some("reference_seg")));
            }
            Some(m)
        }
    };
    let arm = req.arm.unwrap_or_else(|| "upload".into());
    let report = run_blocking(&state, move || evaluate_blocking(&models, image, reference, reference_seg, arm)).await?;
    Ok(Json(report))
}

/// Binds, starts loading checkpoints in the background and serves until the
/// process is stopped. Requests that need models get 503 until loading
/// finishes.
pub async fn serve(cfg: ServiceConfig) -> Result<(), ServiceError> {
    let addr = format!("{}:{}", cfg.host, cfg.port);
    let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|source| ServiceError::Bind { addr: addr.clone(), source })?;
    let state = AppState::loading(&cfg);
    let loader = state.clone();
    let dir = cfg.ckpt_dir.clone();
    tokio::task::spawn_blocking(move || match Models::load(&dir) {
        Ok(m) => {
            log::info!("models loaded from {}", dir.display());
            loader.set(ModelSlot::Ready(Arc::new(m)));
        }
        Err(e) => {
            log::error!("loading models from {} failed: {e}", dir.display());
            loader.set(ModelSlot::Failed(e.to_string()));
        }
    });
    log::info!("listening on {addr}");
    axum::serve(listener, router(state)).await.map_err(ServiceError::Serve)
}

//! HTTP API over a loaded checkpoint.
//!
//! | route | |
//! |---|---|
//! | `GET /health` | `{status, checkpoint_id, uptime_s}`; status is `loading` or `ready` |
//! | `GET /cases` | cases of the attached dataset |
//! | `POST /predict` | prompt-conditioned mask, probability map and similarity profile |
//! | `POST /interpolate` | the same at `t` between two prompts |
//!
//! Predictions run on a bounded blocking pool; a request arriving when every
//! worker is busy gets 429.

use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use ndarray::Array2;
use prosona_core::checkpoint::CheckpointMeta;
use prosona_core::dataset::Dataset;
use prosona_core::imageio;
use prosona_core::model::{Personalized, ProsonaModel};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, CorsLayer};

pub const MAX_K: usize = 256;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub workers: usize,
    pub default_k: usize,
    pub default_threshold: f64,
    /// `None` allows any origin.
    pub cors_origin: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            workers: 4,
            default_k: 10,
            default_threshold: 0.5,
            cors_origin: None,
        }
    }
}

pub struct LoadedModel {
    pub model: ProsonaModel,
    pub meta: CheckpointMeta,
}

pub struct AppState {
    config: ServiceConfig,
    model: OnceLock<Arc<LoadedModel>>,
    dataset: Option<Dataset>,
    workers: Arc<Semaphore>,
    started: Instant,
}

impl AppState {
    /// A service whose model is attached later with [`AppState::set_model`].
    pub fn new(config: ServiceConfig, dataset: Option<Dataset>) -> Arc<Self> {
        let workers = Arc::new(Semaphore::new(config.workers.max(1)));
        Arc::new(Self {
            config,
            model: OnceLock::new(),
            dataset,
            workers,
            started: Instant::now(),
        })
    }

    /// Attaches the model; the first call wins and later calls are ignored.
    pub fn set_model(&self, model: ProsonaModel, meta: CheckpointMeta) -> bool {
        self.model.set(Arc::new(LoadedModel { model, meta })).is_ok()
    }

    pub fn workers(&self) -> &Arc<Semaphore> {
        &self.workers
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<prosona_core::Error> for ApiError {
    fn from(e: prosona_core::Error) -> Self {
        use prosona_core::Error as E;
        let status = match &e {
            E::Lookup { .. } => StatusCode::NOT_FOUND,
            E::Validation(_) | E::Config(_) | E::Format { .. } => StatusCode::BAD_REQUEST,
            E::State(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub case_id: Option<String>,
    /// Base64 PNG, single channel, model height x width.
    pub image: Option<String>,
    pub prompt: String,
    pub seed: u64,
    #[serde(rename = "K", alias = "k")]
    pub k: Option<usize>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolateRequest {
    pub case_id: Option<String>,
    pub image: Option<String>,
    pub prompt_a: String,
    pub prompt_b: String,
    pub t: f64,
    pub seed: u64,
    #[serde(rename = "K", alias = "k")]
    pub k: Option<usize>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Similarity {
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelInfo {
    pub checkpoint_id: String,
    pub stage: u8,
    pub text_encoder: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub threshold: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictResponse {
    pub mask: String,
    pub prob_map: String,
    pub similarity: Similarity,
    pub latency_ms: f64,
    pub model_info: ModelInfo,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseSummary {
    pub case_id: String,
    pub split: String,
    pub annotator_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint_id: Option<String>,
    pub uptime_s: f64,
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = match &state.config.cors_origin {
        Some(origin) => match HeaderValue::from_str(origin) {
            Ok(v) => CorsLayer::new().allow_origin(AllowOrigin::exact(v)),
            Err(_) => CorsLayer::new(),
        },
        None => CorsLayer::new().allow_origin(AllowOrigin::any()),
    }
    .allow_methods([axum::http::Method::GET, axum::http::Method::POST])
    .allow_headers([axum::http::header::CONTENT_TYPE]);
    Router::new()
        .route("/health", get(health))
        .route("/cases", get(cases))
        .route("/predict", post(predict))
        .route("/interpolate", post(interpolate))
        .layer(cors)
        .with_state(state)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    let loaded = state.model.get();
    Json(Health {
        status: if loaded.is_some() { "ready" } else { "loading" }.into(),
        checkpoint_id: loaded.map(|m| m.meta.checkpoint_id.clone()),
        uptime_s: state.started.elapsed().as_secs_f64(),
    })
}

async fn cases(State(state): State<Arc<AppState>>) -> Json<Vec<CaseSummary>> {
    let list = state
        .dataset
        .as_ref()
        .map(|ds| {
            let a = ds.manifest.annotators();
            ds.manifest
                .cases
                .iter()
                .map(|c| CaseSummary {
                    case_id: c.case_id.clone(),
                    split: ds
                        .manifest
                        .splits
                        .get(&c.case_id)
                        .map(|s| s.to_string())
                        .unwrap_or_default(),
                    annotator_count: a,
                })
                .collect()
        })
        .unwrap_or_default();
    Json(list)
}

fn parse<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))
}

struct Resolved {
    loaded: Arc<LoadedModel>,
    image: Array2<f64>,
    k: usize,
    threshold: f64,
}

fn resolve(
    state: &AppState,
    case_id: Option<&str>,
    image: Option<&str>,
    k: Option<usize>,
    threshold: Option<f64>,
) -> Result<Resolved, ApiError> {
    let k = k.unwrap_or(state.config.default_k);
    if k == 0 || k > MAX_K {
        return Err(ApiError::bad_request(format!("K must lie in 1..={MAX_K}")));
    }
    let threshold = threshold.unwrap_or(state.config.default_threshold);
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(ApiError::bad_request("threshold must lie in (0, 1)"));
    }
    let loaded = state
        .model
        .get()
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "model is not loaded yet"))?;
    let image = match (case_id, image) {
        (Some(id), None) => {
            let ds = state.dataset.as_ref().ok_or_else(|| {
                ApiError::new(StatusCode::NOT_FOUND, "no dataset is attached to this service")
            })?;
            ds.load_case(id)?.image
        }
        (None, Some(b64)) => {
            let bytes = B64
                .decode(b64)
                .map_err(|e| ApiError::bad_request(format!("image is not valid base64: {e}")))?;
            imageio::decode_png_gray(&bytes, std::path::Path::new("request image"))?
                .mapv(|v| f64::from(v) / 255.0)
        }
        _ => {
            return Err(ApiError::bad_request(
                "exactly one of case_id and image must be given",
            ))
        }
    };
    let cfg = loaded.model.backbone.config;
    if image.dim() != (cfg.height, cfg.width) {
        return Err(ApiError::bad_request(format!(
            "image is {}x{}, model expects {}x{}",
            image.nrows(),
            image.ncols(),
            cfg.height,
            cfg.width
        )));
    }
    Ok(Resolved {
        loaded,
        image,
        k,
        threshold,
    })
}

/// Runs `f` on the blocking pool, or answers 429 when all workers are busy.
async fn run_blocking<F>(state: &AppState, f: F) -> Result<Response, ApiError>
where
    F: FnOnce() -> Result<PredictResponse, ApiError> + Send + 'static,
{
    let permit = Arc::clone(&state.workers)
        .try_acquire_owned()
        .map_err(|_| ApiError::new(StatusCode::TOO_MANY_REQUESTS, "all workers are busy"))?;
    let out = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        f()
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(out).into_response())
}

fn respond(r: &Resolved, p: &Personalized, started: Instant) -> PredictResponse {
    let mask = p.map.threshold(r.threshold);
    let meta = &r.loaded.meta;
    PredictResponse {
        mask: B64.encode(imageio::encode_png_gray(&imageio::mask_to_gray(&mask))),
        prob_map: B64.encode(imageio::encode_png_gray(&imageio::to_gray(&p.map.probs))),
        similarity: Similarity {
            scores: p.profile.scores.to_vec(),
            weights: p.profile.weights.to_vec(),
        },
        latency_ms: started.elapsed().as_secs_f64() * 1e3,
        model_info: ModelInfo {
            checkpoint_id: meta.checkpoint_id.clone(),
            stage: meta.stage,
            text_encoder: meta.text_encoder.clone(),
            k: r.k,
            threshold: r.threshold,
        },
    }
}

async fn predict(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let started = Instant::now();
    let req: PredictRequest = parse(&body)?;
    let r = resolve(&state, req.case_id.as_deref(), req.image.as_deref(), req.k, req.threshold)?;
    run_blocking(&state, move || {
        let p = r.loaded.model.personalize(&r.image, &req.prompt, r.k, req.seed)?;
        Ok(respond(&r, &p, started))
    })
    .await
}

async fn interpolate(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let started = Instant::now();
    let req: InterpolateRequest = parse(&body)?;
    if !(0.0..=1.0).contains(&req.t) {
        return Err(ApiError::bad_request(format!("t must lie in [0, 1], got {}", req.t)));
    }
    let r = resolve(&state, req.case_id.as_deref(), req.image.as_deref(), req.k, req.threshold)?;
    run_blocking(&state, move || {
        let p = r
            .loaded
            .model
            .interpolate(&r.image, &req.prompt_a, &req.prompt_b, req.t, r.k, req.seed)?;
        Ok(respond(&r, &p, started))
    })
    .await
}

/// Serves `router(state)` on `listener` until the process ends.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

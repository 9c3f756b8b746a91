//! HTTP inference service over a frozen or optimized bundle.
//!
//! Routes:
//!
//! | method | path                | body                                   |
//! |--------|---------------------|----------------------------------------|
//! | POST   | `/api/classify`     | raw image bytes or multipart file      |
//! | GET    | `/api/labels`       |                                        |
//! | GET    | `/healthz`          |                                        |
//! | POST   | `/api/admin/reload` |                                        |
//!
//! Anything else falls through to the static directory, when one is set.

mod config;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use dermanet::backbone::{BundleStats, Model};
use dermanet::data::{decode_image, Preprocessing};
use dermanet::eval::argmax;
use dermanet::export::{self, Bundle};
use dermanet::saliency::{render_heatmap, saliency};
use dermanet::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::RwLock;
use tower_http::services::ServeDir;

pub use config::{ServeConfig, ENV_BUNDLE, ENV_PORT};

/// Largest accepted request body.
pub const MAX_UPLOAD_BYTES: usize = 10 * 1024 * 1024;

/// Opacity of the saliency overlay in responses.
pub const OVERLAY_ALPHA: f32 = 0.5;

/// A bundle ready for inference. Never mutated after load.
pub struct LoadedModel {
    pub model: Model,
    pub labels: Vec<String>,
    pub preprocessing: Preprocessing,
    pub input_size: usize,
    /// Hex SHA-256 of the bundle file.
    pub model_id: String,
    pub stats: BundleStats,
    pub path: PathBuf,
}

impl LoadedModel {
    pub fn load(path: impl AsRef<Path>) -> dermanet::Result<Self> {
        let path = path.as_ref();
        let (bundle, stats) = export::load_bundle(path)?;
        let bytes = std::fs::read(path).map_err(|e| dermanet::Error::io(path, e))?;
        Self::from_bundle(bundle, stats, hex::encode(Sha256::digest(&bytes)), path.to_path_buf())
    }

    pub fn from_bundle(bundle: Bundle, stats: BundleStats, model_id: String, path: PathBuf) -> dermanet::Result<Self> {
        Ok(Self {
            model: bundle.model()?,
            input_size: bundle.spec.input_size,
            labels: bundle.labels,
            preprocessing: bundle.preprocessing,
            model_id,
            stats,
            path,
        })
    }

    /// Decodes, resizes and preprocesses exactly as the bundle records.
    /// Returns the resized 0–255 image and the network input.
    pub fn prepare(&self, bytes: &[u8]) -> dermanet::Result<(Tensor, Tensor)> {
        let raw = decode_image(bytes, self.input_size, Path::new("<upload>"))?;
        let input = self.preprocessing.apply(&raw);
        Ok((raw, input))
    }

    pub fn classify(&self, bytes: &[u8], with_saliency: bool) -> Result<ClassifyResponse, ApiError> {
        let start = Instant::now();
        let (raw, input) = self.prepare(bytes).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e))?;
        let batch = Tensor::stack(std::slice::from_ref(&input)).map_err(ApiError::internal)?;
        let probs = self.model.probabilities(&batch).map_err(ApiError::internal)?;
        let p = probs.sample(0);
        let top = argmax(p);
        let mut order: Vec<usize> = (0..p.len()).collect();
        // Stable: equal probabilities keep class-index order.
        order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
        let saliency_png = if with_saliency {
            let map = saliency(&self.model, &input, top).map_err(ApiError::internal)?;
            let png = render_heatmap(&map, &raw, OVERLAY_ALPHA).map_err(ApiError::internal)?;
            Some(base64::engine::general_purpose::STANDARD.encode(png))
        } else {
            None
        };
        Ok(ClassifyResponse {
            predictions: order
                .into_iter()
                .map(|i| Prediction {
                    label: self.labels[i].clone(),
                    probability: p[i],
                })
                .collect(),
            top_label: self.labels[top].clone(),
            model_id: self.model_id.clone(),
            saliency_png,
            inference_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    pub probability: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    /// Sorted by descending probability.
    pub predictions: Vec<Prediction>,
    pub top_label: String,
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saliency_png: Option<String>,
    /// Wall time of decode + inference (+ saliency).
    pub inference_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load_time_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_size_bytes: Option<u64>,
}

impl Health {
    fn of(model: &LoadedModel) -> Self {
        Self {
            status: "ready".into(),
            model_id: Some(model.model_id.clone()),
            load_time_seconds: Some(model.stats.load_time_seconds),
            weight_size_bytes: Some(model.stats.weight_size_bytes),
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl ToString) -> Self {
        Self {
            status,
            message: message.to_string(),
        }
    }

    fn internal(e: impl ToString) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e)
    }

    fn not_loaded() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "no model loaded")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

/// Shared service state. Requests take a cheap clone of the current model;
/// only reload takes the write lock.
pub struct AppState {
    model: RwLock<Option<Arc<LoadedModel>>>,
    bundle_path: Option<PathBuf>,
}

impl AppState {
    pub fn new(model: Option<LoadedModel>, bundle_path: Option<PathBuf>) -> Arc<Self> {
        Arc::new(Self {
            model: RwLock::new(model.map(Arc::new)),
            bundle_path,
        })
    }

    /// Loads the configured bundle if possible; otherwise starts unloaded.
    pub fn from_config(cfg: &ServeConfig) -> Arc<Self> {
        let model = cfg.bundle.as_ref().and_then(|p| match LoadedModel::load(p) {
            Ok(m) => {
                log::info!("loaded {} ({} bytes, model {})", p.display(), m.stats.weight_size_bytes, m.model_id);
                Some(m)
            }
            Err(e) => {
                log::error!("cannot load {}: {e}", p.display());
                None
            }
        });
        Self::new(model, cfg.bundle.clone())
    }

    pub async fn current(&self) -> Option<Arc<LoadedModel>> {
        self.model.read().await.clone()
    }

    async fn require(&self) -> Result<Arc<LoadedModel>, ApiError> {
        self.current().await.ok_or_else(ApiError::not_loaded)
    }
}

pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/classify", post(classify))
        .route("/api/labels", get(labels))
        .route("/healthz", get(healthz))
        .route("/api/admin/reload", post(reload))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

#[derive(Debug, Default, Deserialize)]
struct ClassifyQuery {
    saliency: Option<String>,
}

impl ClassifyQuery {
    fn wants_saliency(&self) -> bool {
        matches!(self.saliency.as_deref(), Some("1" | "true" | "yes"))
    }
}

async fn upload_bytes(req: Request, state: &Arc<AppState>) -> Result<Bytes, ApiError> {
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let bytes = if is_multipart {
        let mut form = Multipart::from_request(req, state)
            .await
            .map_err(|e| ApiError::new(e.status(), e.body_text()))?;
        let mut found = None;
        while let Some(field) = form.next_field().await.map_err(|e| ApiError::new(e.status(), e.body_text()))? {
            let is_file = field.file_name().is_some() || matches!(field.name(), Some("image" | "file"));
            if is_file {
                found = Some(field.bytes().await.map_err(|e| ApiError::new(e.status(), e.body_text()))?);
                break;
            }
        }
        found.ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "multipart body has no image field"))?
    } else {
        Bytes::from_request(req, state)
            .await
            .map_err(|e| ApiError::new(e.status(), e.body_text()))?
    };
    if bytes.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "empty upload"));
    }
    Ok(bytes)
}

async fn classify(
    State(state): State<Arc<AppState>>,
    Query(q): Query<ClassifyQuery>,
    req: Request,
) -> Result<Json<ClassifyResponse>, ApiError> {
    let model = state.require().await?;
    let bytes = upload_bytes(req, &state).await?;
    let with_saliency = q.wants_saliency();
    let response = tokio::task::spawn_blocking(move || model.classify(&bytes, with_saliency))
        .await
        .map_err(ApiError::internal)??;
    Ok(Json(response))
}

async fn labels(State(state): State<Arc<AppState>>) -> Result<Json<Vec<String>>, ApiError> {
    Ok(Json(state.require().await?.labels.clone()))
}

async fn healthz(State(state): State<Arc<AppState>>) -> Response {
    match state.current().await {
        Some(m) => Json(Health::of(&m)).into_response(),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(Health {
                status: "unavailable".into(),
                model_id: None,
                load_time_seconds: None,
                weight_size_bytes: None,
            }),
        )
            .into_response(),
    }
}

/// Reloads the configured bundle. On failure the previous model stays.
async fn reload(State(state): State<Arc<AppState>>) -> Result<Json<Health>, ApiError> {
    let path = state
        .bundle_path
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "no bundle path configured"))?;
    let mut slot = state.model.write().await;
    let loaded = tokio::task::spawn_blocking(move || LoadedModel::load(&path))
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::internal)?;
    let health = Health::of(&loaded);
    *slot = Some(Arc::new(loaded));
    Ok(Json(health))
}

/// Binds and serves until Ctrl-C.
pub async fn serve(cfg: ServeConfig) -> std::io::Result<()> {
    let state = AppState::from_config(&cfg);
    let app = router(state, cfg.static_dir.as_deref());
    let listener = tokio::net::TcpListener::bind((cfg.host.as_str(), cfg.port)).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

//! HTTP service behind the expression studio: fit a face once per session,
//! then re-render it as expression coefficients change.
//!
//! Endpoints:
//! - `POST /sessions` `{model?, landmarks, image}` (image is a base64 PNG)
//! - `POST /sessions/{id}/render` `{expression, blend?}`, answered with a PNG
//! - `GET /model/meta?id=...`

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use morphfit::compositor::BlendConfig;
use morphfit::io;
use morphfit::model::{BilinearModel, SemanticLabel};
use morphfit::pipeline::{self, ErrorKind, PipelineConfig, PipelineError, ShapeBranch, TransferSource};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MODEL: &str = "synthetic";

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("superseded by a newer render request")]
    Superseded,
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Superseded => StatusCode::CONFLICT,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match e.kind {
            ErrorKind::NumericalFailure => ApiError::Unprocessable(e.message),
            ErrorKind::Io => ApiError::Internal(e.message),
            _ => ApiError::BadRequest(e.message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}

/// A model the service can fit, with its optional shape branch.
pub struct ModelEntry {
    pub model: BilinearModel,
    pub branch: Option<ShapeBranch>,
}

struct Session {
    model_id: String,
    source: TransferSource,
    /// Serializes renders; holds the last rendered coefficients.
    render: tokio::sync::Mutex<Option<Vec<f64>>>,
    /// Number of render requests received; only the newest waiter runs.
    tickets: AtomicU64,
    running: AtomicUsize,
}

pub struct AppState {
    models: BTreeMap<String, Arc<ModelEntry>>,
    config: PipelineConfig,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    next_id: AtomicU64,
    peak_running: AtomicUsize,
}

impl AppState {
    pub fn new(models: BTreeMap<String, ModelEntry>, config: PipelineConfig) -> Self {
        Self {
            models: models.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
            config,
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            peak_running: AtomicUsize::new(0),
        }
    }

    /// The configured model registered under [`DEFAULT_MODEL`].
    pub fn with_default_model(config: PipelineConfig) -> Result<Self, PipelineError> {
        let model = pipeline::load_configured_model(&config)?;
        let branch = match &config.shapenet {
            Some(dir) => Some(pipeline::load_shape_branch(&model, dir)?),
            None => None,
        };
        let mut models = BTreeMap::new();
        models.insert(DEFAULT_MODEL.to_string(), ModelEntry { model, branch });
        Ok(Self::new(models, config))
    }

    /// Most renders ever running at once within a single session.
    pub fn peak_renders_per_session(&self) -> usize {
        self.peak_running.load(Ordering::SeqCst)
    }

    fn model(&self, id: &str) -> Result<Arc<ModelEntry>, ApiError> {
        self.models.get(id).cloned().ok_or_else(|| ApiError::NotFound(format!("unknown model '{id}'")))
    }

    fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        let sessions = self.sessions.read().map_err(|_| ApiError::Internal("session table poisoned".into()))?;
        sessions.get(id).cloned().ok_or_else(|| ApiError::NotFound(format!("unknown session '{id}'")))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/render", post(render_session))
        .route("/model/meta", get(model_meta))
        .with_state(state)
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("invalid request body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::Internal(e.to_string()))?
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    #[serde(default)]
    pub model: Option<String>,
    pub landmarks: Vec<[f64; 2]>,
    /// Base64-encoded PNG.
    pub image: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub model: String,
    pub landmark_rmse: f64,
    pub iterations: usize,
    pub converged: bool,
    pub identity: Vec<f64>,
    pub expression: Vec<f64>,
    pub image_size: [usize; 2],
}

async fn create_session(State(state): State<Arc<AppState>>, body: axum::body::Bytes) -> Result<Response, ApiError> {
    let req: CreateSession = parse_body(&body)?;
    let model_id = req.model.unwrap_or_else(|| DEFAULT_MODEL.to_string());
    let entry = state.model(&model_id)?;
    let png = base64::engine::general_purpose::STANDARD
        .decode(req.image.as_bytes())
        .map_err(|e| ApiError::BadRequest(format!("image is not base64: {e}")))?;
    let image = io::decode_png(&png).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let config = state.config.clone();
    let source = blocking(move || {
        let fit = pipeline::run_fit(&entry.model, &image, &req.landmarks, None, &config)?;
        if !fit.record.landmark_rmse.is_finite() {
            return Err(ApiError::Unprocessable("fit produced a non-finite residual".into()));
        }
        Ok(pipeline::prepare_source(&entry.model, &fit.record, &image, &config)?)
    })
    .await?;
    let id = format!("s{}", state.next_id.fetch_add(1, Ordering::Relaxed));
    let r = &source.record;
    let summary = SessionSummary {
        session_id: id.clone(),
        model: model_id.clone(),
        landmark_rmse: r.landmark_rmse,
        iterations: r.iterations,
        converged: r.converged,
        identity: r.identity.clone(),
        expression: r.expression.clone(),
        image_size: r.image_size,
    };
    let session = Session {
        model_id,
        source,
        render: tokio::sync::Mutex::new(None),
        tickets: AtomicU64::new(0),
        running: AtomicUsize::new(0),
    };
    state
        .sessions
        .write()
        .map_err(|_| ApiError::Internal("session table poisoned".into()))?
        .insert(id, Arc::new(session));
    Ok((StatusCode::CREATED, Json(summary)).into_response())
}

/// Render request; `expression` accepts the preset file format as well.
#[derive(Debug, Deserialize)]
pub struct RenderRequest {
    pub expression: Vec<f64>,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub blend: Option<BlendConfig>,
}

async fn render_session(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: axum::body::Bytes) -> Result<Response, ApiError> {
    let session = state.session(&id)?;
    let req: RenderRequest = parse_body(&body)?;
    let entry = state.model(&session.model_id)?;
    let mut config = state.config.clone();
    if let Some(b) = req.blend {
        b.validate().map_err(|e| ApiError::BadRequest(e.to_string()))?;
        config.blend = b;
    }
    pipeline::check_expression(&entry.model, &req.expression, config.fit.expression_bounds)
        .map_err(|e| ApiError::Unprocessable(e.message))?;

    let ticket = session.tickets.fetch_add(1, Ordering::SeqCst) + 1;
    let mut last = session.render.lock().await;
    // A newer request arrived while this one waited: let it win.
    if session.tickets.load(Ordering::SeqCst) != ticket {
        return Err(ApiError::Superseded);
    }
    let running = session.running.fetch_add(1, Ordering::SeqCst) + 1;
    state.peak_running.fetch_max(running, Ordering::SeqCst);
    let started = Instant::now();
    let job = session.clone();
    let e = req.expression.clone();
    let result = blocking(move || {
        let out = pipeline::run_transfer(&entry.model, &job.source, &e, entry.branch.as_ref(), None, &config)?;
        let png = io::encode_png(&out.blended.image).map_err(|e| ApiError::Internal(e.to_string()))?;
        Ok((png, out.metrics))
    })
    .await;
    session.running.fetch_sub(1, Ordering::SeqCst);
    let (png, metrics) = result?;
    *last = Some(req.expression);
    drop(last);

    let mut resp = (StatusCode::OK, png).into_response();
    let headers = resp.headers_mut();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    let mut put = |name: &'static str, value: String| {
        if let Ok(v) = HeaderValue::from_str(&value) {
            headers.insert(name, v);
        }
    };
    put("x-render-ms", format!("{:.3}", started.elapsed().as_secs_f64() * 1e3));
    put("x-max-vertex-displacement", format!("{:e}", metrics.max_vertex_displacement));
    put("x-max-predicted-displacement", format!("{:e}", metrics.max_predicted_displacement));
    put("x-coverage-pixels", metrics.coverage_pixels.to_string());
    Ok(resp)
}

#[derive(Debug, Deserialize)]
pub struct MetaQuery {
    pub id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LegendEntry {
    pub id: u8,
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpressionGroup {
    pub region: String,
    pub units: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub id: String,
    pub n_vertices: usize,
    pub n_identity: usize,
    pub n_expression: usize,
    pub expression_bounds: [f64; 2],
    pub neutral_expression: Vec<f64>,
    pub landmark_count: usize,
    pub mesh_hash: String,
    pub semantic_legend: Vec<LegendEntry>,
    pub expression_groups: Vec<ExpressionGroup>,
    pub shape_branch: bool,
}

/// Groups expression units by the region where their offset from the mean
/// face moves vertices the most on average. Unit 0 is the neutral slot.
pub fn expression_groups(model: &BilinearModel) -> Vec<ExpressionGroup> {
    let labels = model.semantic();
    let mut counts = [0usize; SemanticLabel::COUNT];
    labels.iter().for_each(|&l| counts[l as usize] += 1);
    let mut groups: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    let mut neutral = Vec::new();
    for j in 0..model.n_expression() {
        if model.neutral_expression()[j] != 0.0 {
            neutral.push(j);
            continue;
        }
        let mode = model.slice(0, j);
        let mut energy = [0.0; SemanticLabel::COUNT];
        for (v, &l) in labels.iter().enumerate() {
            energy[l as usize] += mode[3 * v..3 * v + 3].iter().map(|x| x * x).sum::<f64>();
        }
        let best = (0..SemanticLabel::COUNT)
            .filter(|&l| counts[l] > 0)
            .max_by(|&a, &b| (energy[a] / counts[a] as f64).total_cmp(&(energy[b] / counts[b] as f64)))
            .unwrap_or(0);
        groups.entry(best as u8).or_default().push(j);
    }
    let mut out = Vec::new();
    if !neutral.is_empty() {
        out.push(ExpressionGroup {
            region: "neutral".into(),
            units: neutral,
        });
    }
    out.extend(groups.into_iter().map(|(l, units)| ExpressionGroup {
        region: SemanticLabel::from_id(l).map_or("other", |s| s.name()).into(),
        units,
    }));
    out
}

pub fn model_meta_for(id: &str, entry: &ModelEntry, config: &PipelineConfig) -> ModelMeta {
    let m = &entry.model;
    let (lo, hi) = config.fit.expression_bounds;
    ModelMeta {
        id: id.to_string(),
        n_vertices: m.n_vertices(),
        n_identity: m.n_identity(),
        n_expression: m.n_expression(),
        expression_bounds: [lo, hi],
        neutral_expression: m.neutral_expression().to_vec(),
        landmark_count: m.landmarks().len(),
        mesh_hash: m.mesh_hash(),
        semantic_legend: SemanticLabel::ALL
            .iter()
            .map(|l| LegendEntry {
                id: l.id(),
                name: l.name().into(),
            })
            .collect(),
        expression_groups: expression_groups(m),
        shape_branch: entry.branch.is_some(),
    }
}

async fn model_meta(State(state): State<Arc<AppState>>, Query(q): Query<MetaQuery>) -> Result<Json<ModelMeta>, ApiError> {
    let id = q.id.unwrap_or_else(|| DEFAULT_MODEL.to_string());
    let entry = state.model(&id)?;
    Ok(Json(model_meta_for(&id, &entry, &state.config)))
}

//! Replay server: per-frame pipeline results and intermediate fields for a
//! recorded sequence, with thresholds that can be changed per session.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::convert::Infallible;
use std::hash::{Hash, Hasher};
use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use lru::LruCache;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tactile_core::calibration::CalibrationModel;
use tactile_core::fields::Rect;
use tactile_core::pipeline::{analyze_frame, ContactEvent, FrameAnalysis, Manifest, PipelineConfig, ReplayError};
use thiserror::Error;

const CACHE_FRAMES: usize = 32;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("no session {0}")]
    NoSession(u64),
    #[error("frame {0} is out of range")]
    NoFrame(usize),
    #[error("unknown field '{0}', expected flow, div, pot or mask")]
    NoField(String),
    #[error("{0}")]
    BadConfig(String),
    #[error("{0}")]
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match self {
            ApiError::NoSession(_) | ApiError::NoFrame(_) | ApiError::NoField(_) => StatusCode::NOT_FOUND,
            ApiError::BadConfig(_) => StatusCode::BAD_REQUEST,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

impl From<ReplayError> for ApiError {
    fn from(e: ReplayError) -> Self {
        match e {
            ReplayError::NoFrame(k) => ApiError::NoFrame(k),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

#[derive(Debug, Clone)]
struct Session {
    cfg: PipelineConfig,
    version: u64,
    cursor: usize,
}

pub struct AppState {
    manifest: Manifest,
    model: Option<CalibrationModel>,
    base: PipelineConfig,
    sessions: Mutex<HashMap<u64, Arc<tokio::sync::Mutex<Session>>>>,
    cache: Mutex<LruCache<(usize, u64), Arc<FrameAnalysis>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(manifest: Manifest, base: PipelineConfig, model: Option<CalibrationModel>) -> Arc<Self> {
        Arc::new(Self {
            manifest,
            model,
            base,
            sessions: Mutex::new(HashMap::new()),
            cache: Mutex::new(LruCache::new(NonZeroUsize::new(CACHE_FRAMES).unwrap())),
            next_id: AtomicU64::new(1),
        })
    }

    fn session(&self, id: u64) -> Result<Arc<tokio::sync::Mutex<Session>>, ApiError> {
        self.sessions.lock().unwrap().get(&id).cloned().ok_or(ApiError::NoSession(id))
    }
}

pub fn config_hash(cfg: &PipelineConfig) -> u64 {
    let mut h = DefaultHasher::new();
    serde_json::to_string(cfg).expect("config serializes").hash(&mut h);
    h.finish()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultMetrics {
    pub patches: usize,
    pub warnings: usize,
    pub mask_pixels: usize,
    pub compute_ms: f64,
    pub cached: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame: usize,
    /// Config version of the session when the result was computed.
    pub version: u64,
    pub events: Vec<ContactEvent>,
    pub boxes: Vec<Rect>,
    pub metrics: ResultMetrics,
}

/// Pipeline output for frame `k` under `cfg`, from the cache when possible.
async fn analysis(state: &Arc<AppState>, k: usize, cfg: &PipelineConfig) -> Result<(Arc<FrameAnalysis>, bool, f64), ApiError> {
    if k >= state.manifest.len() {
        return Err(ApiError::NoFrame(k));
    }
    let key = (k, config_hash(cfg));
    if let Some(a) = state.cache.lock().unwrap().get(&key) {
        return Ok((a.clone(), true, 0.0));
    }
    let st = state.clone();
    let cfg = cfg.clone();
    let (a, ms) = tokio::task::spawn_blocking(move || -> Result<_, ApiError> {
        let flow = st.manifest.load_frame(k)?;
        let t0 = Instant::now();
        let ts = k as f64 / st.manifest.fps();
        let a = analyze_frame(&flow, &cfg, st.model.as_ref(), k, ts).map_err(|e| ApiError::BadConfig(e.to_string()))?;
        Ok((Arc::new(a), t0.elapsed().as_secs_f64() * 1e3))
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    state.cache.lock().unwrap().put(key, a.clone());
    Ok((a, false, ms))
}

async fn frame_result(state: &Arc<AppState>, id: u64, k: usize) -> Result<FrameResult, ApiError> {
    let session = state.session(id)?;
    // one config snapshot per result; requests within a session queue here
    let mut s = session.lock().await;
    let (a, cached, ms) = analysis(state, k, &s.cfg).await?;
    s.cursor = k;
    Ok(FrameResult {
        frame: k,
        version: s.version,
        events: a.events.clone(),
        boxes: a.boxes(),
        metrics: ResultMetrics {
            patches: a.patches.len(),
            warnings: a.warnings,
            mask_pixels: a.mask.count(),
            compute_ms: ms,
            cached,
        },
    })
}

async fn get_manifest(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let m = &state.manifest;
    Json(json!({
        "name": m.name,
        "seed": m.seed,
        "params": m.params,
        "frames": m.len(),
        "fps": m.fps(),
        "rods": m.rods,
        "has_model": state.model.is_some(),
    }))
}

async fn create_session(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let id = state.next_id.fetch_add(1, Ordering::Relaxed);
    let s = Session {
        cfg: state.base.clone(),
        version: 0,
        cursor: 0,
    };
    let body = json!({ "id": id, "version": 0, "config": s.cfg });
    state.sessions.lock().unwrap().insert(id, Arc::new(tokio::sync::Mutex::new(s)));
    Json(body)
}

async fn get_result(State(state): State<Arc<AppState>>, Path((id, k)): Path<(u64, usize)>) -> Result<Json<FrameResult>, ApiError> {
    Ok(Json(frame_result(&state, id, k).await?))
}

fn binary(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response()
}

async fn get_field(
    State(state): State<Arc<AppState>>,
    Path((id, k, kind)): Path<(u64, usize, String)>,
) -> Result<Response, ApiError> {
    if !matches!(kind.as_str(), "flow" | "div" | "pot" | "mask") {
        return Err(ApiError::NoField(kind));
    }
    if kind == "flow" {
        state.session(id)?;
        return Ok(binary(state.manifest.frame_bytes(k)?));
    }
    let session = state.session(id)?;
    let cfg = session.lock().await.cfg.clone();
    let (a, _, _) = analysis(&state, k, &cfg).await?;
    let mut out = Vec::new();
    let written = match kind.as_str() {
        "div" => a.divergent_field().write_to(&mut out),
        "pot" => a.potential_field().write_to(&mut out),
        _ => a.mask.write_to(&mut out),
    };
    written.map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(binary(out))
}

async fn get_config(State(state): State<Arc<AppState>>, Path(id): Path<u64>) -> Result<Json<serde_json::Value>, ApiError> {
    let session = state.session(id)?;
    let s = session.lock().await;
    Ok(Json(json!({ "version": s.version, "config": s.cfg })))
}

async fn post_config(
    State(state): State<Arc<AppState>>,
    Path(id): Path<u64>,
    Json(delta): Json<serde_json::Value>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let session = state.session(id)?;
    let mut s = session.lock().await;
    let cfg = s.cfg.merged(&delta).map_err(|e| ApiError::BadConfig(e.to_string()))?;
    if cfg != s.cfg {
        s.cfg = cfg;
        s.version += 1;
    }
    Ok(Json(json!({ "version": s.version, "config": s.cfg })))
}

#[derive(Debug, Deserialize)]
struct StreamQuery {
    from: Option<usize>,
    to: Option<usize>,
    fps: Option<f64>,
}

async fn stream(
    State(state): State<Arc<AppState>>,
    Path(id): Path<u64>,
    Query(q): Query<StreamQuery>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let session = state.session(id)?;
    let start = match q.from {
        Some(k) => k,
        None => session.lock().await.cursor,
    };
    let end = q.to.unwrap_or(state.manifest.len()).min(state.manifest.len());
    let fps = q.fps.unwrap_or_else(|| state.manifest.fps());
    let period = (fps > 0.0).then(|| Duration::from_secs_f64(1.0 / fps));
    let events = stream::unfold(start, move |k| {
        let state = state.clone();
        async move {
            if k >= end {
                return None;
            }
            if k > start {
                if let Some(p) = period {
                    tokio::time::sleep(p).await;
                }
            }
            let ev = match frame_result(&state, id, k).await {
                Ok(r) => Event::default().event("result").json_data(&r).unwrap_or_default(),
                Err(e) => Event::default().event("error").data(e.to_string()),
            };
            Some((Ok(ev), k + 1))
        }
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

async fn get_frame_flow(State(state): State<Arc<AppState>>, Path(k): Path<usize>) -> Result<Response, ApiError> {
    Ok(binary(state.manifest.frame_bytes(k)?))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/manifest", get(get_manifest))
        .route("/session", post(create_session))
        .route("/session/{id}/result/{k}", get(get_result))
        .route("/session/{id}/field/{k}/{kind}", get(get_field))
        .route("/session/{id}/config", get(get_config).post(post_config))
        .route("/session/{id}/stream", get(stream))
        .route("/frames/{k}/flow", get(get_frame_flow))
        .with_state(state)
}

/// Bind `addr` and serve until the process ends.
pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

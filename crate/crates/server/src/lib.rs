//! HTTP evaluation server: detection submissions in, PKL and NDS reports out.
//!
//! The planner and every hosted scene set are loaded once at startup and
//! shared read-only by all request handlers.

use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;
use uuid::Uuid;

use pklbench_core::io::{detections_from_value, load_scene_dir};
use pklbench_core::metrics::nds_dataset;
use pklbench_core::pkl::{pair_submissions, PklContext};
use pklbench_core::planner::{load_checkpoint, Planner};
use pklbench_core::scene::DetectionSet;
use pklbench_core::{Error, Scene};

pub const DEFAULT_MAX_BODY_MB: usize = 64;
pub const DEFAULT_MAX_CONCURRENT: usize = 10;
pub const TOKEN_ENV: &str = "PKLBENCH_TOKEN";

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Scene directories; each is hosted under its directory name.
    pub scenes: Vec<PathBuf>,
    pub model: PathBuf,
    pub port: u16,
    pub data_dir: PathBuf,
    pub max_body_mb: usize,
    pub max_concurrent: usize,
    pub token: Option<String>,
    pub parallel: bool,
}

/// Everything needed to answer a request with one hosted dataset.
pub struct Dataset {
    pub id: String,
    ctx: PklContext<'static>,
}

pub struct AppState {
    model_hash: String,
    datasets: BTreeMap<String, Dataset>,
    data_dir: PathBuf,
    permits: Semaphore,
    token: Option<String>,
}

impl AppState {
    /// Builds the state from an in-memory planner and scene sets. The model
    /// and scenes live for the rest of the process.
    pub fn new(
        planner: Planner,
        model_hash: String,
        datasets: Vec<(String, Vec<Scene>)>,
        data_dir: PathBuf,
        max_concurrent: usize,
        token: Option<String>,
        parallel: bool,
    ) -> Result<Self, Error> {
        if max_concurrent == 0 {
            return Err(Error::config("max_concurrent", "must be positive"));
        }
        fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
        let model: &'static Planner = Box::leak(Box::new(planner));
        let mut map = BTreeMap::new();
        for (id, scenes) in datasets {
            if scenes.is_empty() {
                return Err(Error::config(
                    "scenes",
                    format!("dataset `{id}` has no scenes"),
                ));
            }
            let scenes: &'static [Scene] = Box::leak(scenes.into_boxed_slice());
            let ctx = PklContext::new(model, scenes, parallel)?;
            log::info!(
                "dataset {id}: {} scenes, {} chunks",
                scenes.len(),
                ctx.chunks().len()
            );
            if map
                .insert(
                    id.clone(),
                    Dataset {
                        id: id.clone(),
                        ctx,
                    },
                )
                .is_some()
            {
                return Err(Error::config(
                    "scenes",
                    format!("duplicate dataset id `{id}`"),
                ));
            }
        }
        Ok(Self {
            model_hash,
            datasets: map,
            data_dir,
            permits: Semaphore::new(max_concurrent),
            token,
        })
    }

    pub fn load(config: &ServerConfig) -> Result<Self, Error> {
        let ck = load_checkpoint(&config.model)?;
        let mut datasets = Vec::new();
        for dir in &config.scenes {
            datasets.push((dataset_id(dir), load_scene_dir(dir)?));
        }
        Self::new(
            ck.planner,
            ck.hash,
            datasets,
            config.data_dir.clone(),
            config.max_concurrent,
            config.token.clone(),
            config.parallel,
        )
    }

    pub fn dataset_ids(&self) -> Vec<String> {
        self.datasets.keys().cloned().collect()
    }
}

/// Name a scene directory is hosted under: its last path component.
pub fn dataset_id(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.to_string_lossy().into_owned())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateResponse {
    pub submission_id: String,
    pub dataset_id: String,
    pub pkl_mean: f64,
    pub pkl_median: f64,
    pub nds: f64,
    pub count: usize,
    pub excluded: usize,
    pub per_sample_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub model_hash: String,
    pub dataset_ids: Vec<String>,
}

#[derive(Debug)]
enum ApiError {
    BadRequest { field: String, message: String },
    NotFound(String),
    Unauthorized,
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        match self {
            ApiError::BadRequest { field, message } => (
                StatusCode::BAD_REQUEST,
                Json(json!({ "error": message, "field": field })),
            )
                .into_response(),
            ApiError::NotFound(what) => {
                (StatusCode::NOT_FOUND, Json(json!({ "error": what }))).into_response()
            }
            ApiError::Unauthorized => (
                StatusCode::UNAUTHORIZED,
                [(header::WWW_AUTHENTICATE, "Bearer")],
                Json(json!({ "error": "missing or invalid bearer token" })),
            )
                .into_response(),
            ApiError::Internal(detail) => {
                let id = Uuid::new_v4();
                log::error!("internal error {id}: {detail}");
                (
                    StatusCode::INTERNAL_SERVER_ERROR,
                    Json(json!({ "error": "internal error", "id": id.to_string() })),
                )
                    .into_response()
            }
        }
    }
}

fn bad(field: impl Into<String>, message: impl Into<String>) -> ApiError {
    ApiError::BadRequest {
        field: field.into(),
        message: message.into(),
    }
}

/// Maps a core error raised while reading the submission to a 400.
fn submission_error(prefix: &str, e: Error) -> ApiError {
    match e {
        Error::Parse { path, message } => bad(format!("{prefix}.{path}"), message),
        Error::Version { .. } => bad(format!("{prefix}.schema_version"), e.to_string()),
        Error::Pairing(m) => bad("detections", m),
        Error::Config { field, message } => bad(field, message),
        Error::Input(m) => bad(prefix, m),
        other => ApiError::Internal(other.to_string()),
    }
}

fn parse_submission(body: &[u8]) -> Result<(String, Vec<DetectionSet>), ApiError> {
    let value: Value =
        serde_json::from_slice(body).map_err(|e| bad("body", format!("malformed JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| bad("body", "expected a JSON object"))?;
    for key in obj.keys() {
        if key != "dataset_id" && key != "detections" {
            return Err(bad(key.as_str(), "unknown field"));
        }
    }
    let dataset_id = obj
        .get("dataset_id")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("dataset_id", "missing or not a string"))?
        .to_string();
    let dets = obj
        .get("detections")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("detections", "missing or not an array"))?;
    let sets = dets
        .iter()
        .enumerate()
        .map(|(i, v)| {
            detections_from_value(v.clone())
                .map_err(|e| submission_error(&format!("detections[{i}]"), e))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((dataset_id, sets))
}

fn evaluate(
    dataset: &Dataset,
    sets: &[DetectionSet],
) -> Result<(pklbench_core::pkl::PklReport, f64), Error> {
    let report = dataset.ctx.evaluate(sets)?;
    let paired = pair_submissions(dataset.ctx.scenes(), sets)?;
    let nds = nds_dataset(dataset.ctx.scenes(), &paired).nds;
    Ok((report, nds))
}

async fn post_evaluate(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<Json<EvaluateResponse>, ApiError> {
    let (dataset_id, sets) = parse_submission(&body)?;
    if !state.datasets.contains_key(&dataset_id) {
        return Err(ApiError::NotFound(format!(
            "unknown dataset_id `{dataset_id}`"
        )));
    }
    let _permit = state
        .permits
        .acquire()
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    let worker = state.clone();
    let id = dataset_id.clone();
    let (report, nds) = tokio::task::spawn_blocking(move || evaluate(&worker.datasets[&id], &sets))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map_err(|e| submission_error("detections", e))?;

    let (submission_id, dir) =
        fresh_submission_dir(&state.data_dir).map_err(|e| ApiError::Internal(e.to_string()))?;
    let response = EvaluateResponse {
        per_sample_url: format!("/v1/submissions/{submission_id}/samples"),
        submission_id,
        dataset_id,
        pkl_mean: report.mean,
        pkl_median: report.median,
        nds,
        count: report.count,
        excluded: report.excluded.len(),
    };
    let result = serde_json::to_string_pretty(&json!({
        "response": &response,
        "summary": report.summary("samples.csv", &state.model_hash),
        "received_at_unix_s": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0),
    }))
    .expect("result serializes");
    let writes = [
        ("submission.json", body.to_vec()),
        ("samples.csv", report.samples_csv().into_bytes()),
        ("result.json", (result + "\n").into_bytes()),
    ];
    for (name, bytes) in writes {
        fs::write(dir.join(name), bytes)
            .map_err(|e| ApiError::Internal(format!("{}: {e}", dir.display())))?;
    }
    Ok(Json(response))
}

/// Creates `data_dir/<uuid>`; creation fails on the (unlikely) reuse of an
/// id, which is retried.
fn fresh_submission_dir(data_dir: &Path) -> std::io::Result<(String, PathBuf)> {
    loop {
        let id = Uuid::new_v4().to_string();
        let dir = data_dir.join(&id);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok((id, dir)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e),
        }
    }
}

async fn get_health(State(state): State<Arc<AppState>>) -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".into(),
        model_hash: state.model_hash.clone(),
        dataset_ids: state.dataset_ids(),
    })
}

async fn get_samples(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Response, ApiError> {
    let unknown = || ApiError::NotFound(format!("unknown submission `{id}`"));
    // only canonical UUIDs name submission directories
    let uuid = Uuid::parse_str(&id).map_err(|_| unknown())?;
    if uuid.hyphenated().to_string() != id {
        return Err(unknown());
    }
    let path = state.data_dir.join(&id).join("samples.csv");
    let csv = match tokio::fs::read(&path).await {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(unknown()),
        Err(e) => return Err(ApiError::Internal(format!("{}: {e}", path.display()))),
    };
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], csv).into_response())
}

async fn require_token(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    req: Request,
    next: Next,
) -> Response {
    if let Some(token) = &state.token {
        let presented = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return ApiError::Unauthorized.into_response();
        }
    }
    next.run(req).await
}

pub fn router(state: Arc<AppState>, max_body_bytes: usize) -> Router {
    Router::new()
        .route("/v1/evaluate", post(post_evaluate))
        .route("/v1/health", get(get_health))
        .route("/v1/submissions/{id}/samples", get(get_samples))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .layer(DefaultBodyLimit::max(max_body_bytes))
        .with_state(state)
}

/// Loads the configured state and serves until interrupted.
pub async fn serve(config: ServerConfig) -> Result<(), Error> {
    let max_body = config.max_body_mb.saturating_mul(1 << 20);
    let state = Arc::new(tokio::task::block_in_place(|| AppState::load(&config))?);
    let addr = SocketAddr::from(([0, 0, 0, 0], config.port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(format!("0.0.0.0:{}", config.port), e))?;
    log::info!("listening on {addr}, datasets {:?}", state.dataset_ids());
    axum::serve(listener, router(state, max_body))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io("server", e))
}

/// Runs [`serve`] on a fresh multi-threaded runtime.
pub fn serve_blocking(config: ServerConfig) -> Result<(), Error> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::io("tokio runtime", e))?
        .block_on(serve(config))
}

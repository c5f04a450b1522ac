//! HTTP service: drawing collection, enrollment jobs and live
//! authentication against per-participant models.

pub mod error;
pub mod jobs;
pub mod registry;
pub mod sequence;

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::mpsc;
use tower_http::services::ServeDir;
use trace_auth::eval::EvalReport;
use trace_auth::harness::{self, EpochRecord, TrainRunConfig};
use trace_auth::models::ModelKind;
use trace_auth::stroke::{self, Drawing};

pub use error::ApiError;
use jobs::{EnrollmentJob, JobState, JobStore, JobStoreError};
use registry::ModelRegistry;
use sequence::{SequenceError, SequenceStatus, Sequences};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Holds `drawings/`, `models/`, `jobs.json` and `decisions.jsonl`.
    pub data_root: PathBuf,
    /// Background training workers.
    pub workers: usize,
    /// Stored drawings a participant needs before enrolling.
    pub min_drawings: usize,
    pub token_ttl: Duration,
    /// Seeds the prompt generator for reproducible test sessions.
    pub prompt_seed: Option<u64>,
    /// Served at `/` when set.
    pub static_dir: Option<PathBuf>,
    /// Enrollment defaults; request bodies override individual fields.
    pub run: TrainRunConfig,
}

impl ServiceConfig {
    pub fn new(data_root: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            data_root: data_root.into(),
            workers: 1,
            min_drawings: 100,
            token_ttl: Duration::from_secs(60),
            prompt_seed: None,
            static_dir: None,
            run: TrainRunConfig::default(),
        }
    }

    pub fn drawings_dir(&self) -> PathBuf {
        self.data_root.join("drawings")
    }
}

pub struct Inner {
    pub config: ServiceConfig,
    pub jobs: JobStore,
    pub registry: ModelRegistry,
    sequences: Mutex<Sequences>,
    prompt_rng: Mutex<ChaCha8Rng>,
    queue: mpsc::UnboundedSender<String>,
    decisions: Mutex<std::fs::File>,
}

pub type AppState = Arc<Inner>;

/// Opens (or creates) the data root and starts the worker pool. Must be
/// called inside a tokio runtime.
pub fn start(config: ServiceConfig) -> Result<AppState, String> {
    std::fs::create_dir_all(config.drawings_dir()).map_err(|e| format!("{}: {e}", config.data_root.display()))?;
    let (jobs, requeue) = JobStore::open(&config.data_root.join("jobs.json")).map_err(|e| e.to_string())?;
    let registry = ModelRegistry::open(&config.data_root.join("models"))?;
    let log_path = config.data_root.join("decisions.jsonl");
    let decisions = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| format!("{}: {e}", log_path.display()))?;
    let rng = match config.prompt_seed {
        Some(seed) => ChaCha8Rng::seed_from_u64(seed),
        None => ChaCha8Rng::from_entropy(),
    };
    let (tx, rx) = mpsc::unbounded_channel();
    let state = Arc::new(Inner {
        sequences: Mutex::new(Sequences::new(config.token_ttl)),
        prompt_rng: Mutex::new(rng),
        queue: tx,
        decisions: Mutex::new(decisions),
        jobs,
        registry,
        config,
    });
    let rx = Arc::new(tokio::sync::Mutex::new(rx));
    for _ in 0..state.config.workers.max(1) {
        tokio::spawn(worker(Arc::clone(&state), Arc::clone(&rx)));
    }
    for id in requeue {
        let _ = state.queue.send(id);
    }
    Ok(state)
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/v1/health", get(health))
        .route("/v1/drawings", post(submit_drawing))
        .route("/v1/prompt", get(prompt))
        .route("/v1/participants/{id}/enroll", post(enroll))
        .route("/v1/participants/{id}/authenticate", post(authenticate))
        .route("/v1/participants/{id}/metrics", get(metrics))
        .route("/v1/jobs/{id}", get(job));
    let api = match &state.config.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    api.with_state(state)
}

/// Binds and serves until the process is stopped.
pub async fn serve(config: ServiceConfig, addr: SocketAddr) -> Result<(), String> {
    let state = start(config)?;
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| format!("bind {addr}: {e}"))?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state)).await.map_err(|e| e.to_string())
}

async fn worker(state: AppState, rx: Arc<tokio::sync::Mutex<mpsc::UnboundedReceiver<String>>>) {
    loop {
        let Some(job_id) = rx.lock().await.recv().await else { return };
        let s = Arc::clone(&state);
        let id = job_id.clone();
        let outcome = tokio::task::spawn_blocking(move || run_job(&s, &id)).await;
        let result = match outcome {
            Ok(r) => r,
            Err(e) => Err(format!("training task panicked: {e}")),
        };
        let recorded = match result {
            Ok(model_id) => state.jobs.finish(&job_id, model_id),
            Err(e) => {
                tracing::warn!(job = %job_id, error = %e, "enrollment failed");
                state.jobs.fail(&job_id, e)
            }
        };
        if let Err(e) = recorded {
            tracing::error!(job = %job_id, error = %e, "could not record job outcome");
        }
    }
}

fn run_job(state: &Inner, job_id: &str) -> Result<String, String> {
    let job = state.jobs.transition(job_id, JobState::Running).map_err(|e| e.to_string())?;
    let manifest = stroke::load_dataset(&state.config.drawings_dir()).map_err(|e| e.to_string())?;
    let split = harness::make_split(&manifest, &job.participant_id, job.config.seed).map_err(|e| e.to_string())?;
    let progress = |e: &EpochRecord| {
        let _ = state.jobs.progress(job_id, e.epoch);
    };
    let result = harness::train(&split, &job.config, Some(&progress)).map_err(|e| e.to_string())?;
    let summary = result.summary();
    let published = state.registry.publish(&job.participant_id, result.model, summary)?;
    tracing::info!(model = %published.model_id, acc = published.summary.report.acc, "model published");
    Ok(published.model_id.clone())
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

fn check_participant(id: &str) -> Result<(), ApiError> {
    if valid_id(id) {
        Ok(())
    } else {
        Err(ApiError::BadRequest(format!("participant id `{id}` must be 1-64 characters of [A-Za-z0-9_-]")))
    }
}

fn count_drawings(root: &Path, participant: &str) -> usize {
    let dir = root.join(participant);
    walkdir::WalkDir::new(dir)
        .min_depth(2)
        .max_depth(2)
        .into_iter()
        .flatten()
        .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
        .count()
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    let active = state.jobs.list().iter().filter(|j| j.state.is_active()).count();
    Json(serde_json::json!({
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "published_models": state.registry.len(),
        "active_jobs": active,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DrawingCreated {
    pub drawing_id: String,
    pub participant_id: String,
    pub digit: u32,
}

async fn submit_drawing(State(state): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<DrawingCreated>), ApiError> {
    let d = stroke::read_drawing(&body)?;
    check_participant(&d.participant_id)?;
    let root = state.config.drawings_dir();
    let stored = d.clone();
    let (drawing_id, _) = tokio::task::spawn_blocking(move || stroke::store_drawing(&root, &stored))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok((StatusCode::CREATED, Json(DrawingCreated { drawing_id, participant_id: d.participant_id, digit: d.digit })))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Prompt {
    pub digit: u32,
}

async fn prompt(State(state): State<AppState>) -> Json<Prompt> {
    Json(Prompt { digit: state.prompt_rng.lock().unwrap().gen_range(0..10) })
}

/// Overlays `patch` onto `base`, recursing into nested objects.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

fn run_config(defaults: &TrainRunConfig, body: &[u8]) -> Result<TrainRunConfig, ApiError> {
    let mut value = serde_json::to_value(defaults).expect("config serializes");
    if !body.iter().all(u8::is_ascii_whitespace) {
        let patch: Value = serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(e.to_string()))?;
        if !patch.is_object() {
            return Err(ApiError::BadRequest("enrollment body must be a JSON object".into()));
        }
        merge(&mut value, patch);
    }
    let cfg: TrainRunConfig = serde_json::from_value(value).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    cfg.validate().map_err(|e| ApiError::BadRequest(e.to_string()))?;
    Ok(cfg)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JobAccepted {
    pub job_id: String,
}

async fn enroll(State(state): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> Result<(StatusCode, Json<JobAccepted>), ApiError> {
    check_participant(&id)?;
    let cfg = run_config(&state.config.run, &body)?;
    let found = count_drawings(&state.config.drawings_dir(), &id);
    if found == 0 {
        return Err(ApiError::UnknownParticipant(id));
    }
    if found < state.config.min_drawings {
        return Err(ApiError::InsufficientData { participant: id, found, needed: state.config.min_drawings });
    }
    let job = state.jobs.create(&id, cfg).map_err(|e| match e {
        JobStoreError::Active { participant, job_id } => ApiError::JobActive { participant, job_id },
        other => ApiError::Internal(other.to_string()),
    })?;
    state.queue.send(job.job_id.clone()).map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok((StatusCode::ACCEPTED, Json(JobAccepted { job_id: job.job_id })))
}

async fn job(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<EnrollmentJob>, ApiError> {
    state.jobs.get(&id).map(Json).ok_or(ApiError::UnknownJob(id))
}

async fn metrics(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<EvalReport>, ApiError> {
    let published = state.registry.get(&id).ok_or(ApiError::NoModel(id))?;
    Ok(Json(published.summary.report.clone()))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AuthDecision {
    pub participant_id: String,
    pub model_id: String,
    pub model_kind: ModelKind,
    /// Probability for classifiers, reconstruction error for autoencoders.
    pub value: f64,
    pub threshold: f64,
    pub accepted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sequence: Option<SequenceStatus>,
}

/// Either a bare drawing, or a drawing wrapped with sequence fields.
fn parse_auth_body(body: &[u8]) -> Result<(Drawing, Option<String>, Option<usize>), ApiError> {
    let value: Value = serde_json::from_slice(body).map_err(|e| ApiError::InvalidDrawing(stroke::StrokeError::MalformedJson(e.to_string())))?;
    let obj = value.as_object().ok_or_else(|| ApiError::BadRequest("body must be a JSON object".into()))?;
    let (drawing, token, length) = if obj.contains_key("strokes") {
        (&value, None, None)
    } else {
        let drawing = obj.get("drawing").ok_or_else(|| ApiError::BadRequest("missing `drawing`".into()))?;
        let token = match obj.get("sequence_token") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => return Err(ApiError::BadRequest("`sequence_token` must be a string".into())),
        };
        let length = match obj.get("sequence_length") {
            None | Some(Value::Null) => None,
            Some(v) => Some(v.as_u64().ok_or_else(|| ApiError::BadRequest("`sequence_length` must be a positive integer".into()))? as usize),
        };
        (drawing, token, length)
    };
    let d = stroke::drawing_from_value(drawing).and_then(|d| stroke::validate_drawing(&d))?;
    Ok((d, token, length))
}

#[derive(Serialize)]
struct DecisionLog<'a> {
    decision: &'a AuthDecision,
    drawing: &'a Drawing,
}

async fn authenticate(State(state): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> Result<Json<AuthDecision>, ApiError> {
    let published = state.registry.get(&id).ok_or_else(|| ApiError::NoModel(id.clone()))?;
    let (drawing, token, length) = parse_auth_body(&body)?;
    if let Some(t) = &token {
        state.sequences.lock().unwrap().peek(&id, t, Instant::now()).map_err(|_| ApiError::SequenceExpired)?;
    }
    let model = Arc::clone(&published);
    let d = drawing.clone();
    let decision = tokio::task::spawn_blocking(move || model.model.decide_drawing(&d))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map_err(|e| match e {
            trace_auth::models::ModelError::Raster(_) => ApiError::EmptyDrawing,
            other => ApiError::Internal(other.to_string()),
        })?;

    let sequence = {
        let mut seqs = state.sequences.lock().unwrap();
        let now = Instant::now();
        match (token, length) {
            (Some(t), _) => Some(seqs.advance(&id, &t, decision.accepted, now).map_err(|_| ApiError::SequenceExpired)?),
            (None, Some(n)) => Some(seqs.start(&id, n, decision.accepted, now).map_err(|e| match e {
                SequenceError::InvalidLength => {
                    ApiError::BadRequest(format!("sequence_length must be 1..={}", sequence::MAX_SEQUENCE_LENGTH))
                }
                SequenceError::Expired => ApiError::SequenceExpired,
            })?),
            (None, None) => None,
        }
    };
    let out = AuthDecision {
        participant_id: id,
        model_id: published.model_id.clone(),
        model_kind: published.model.kind(),
        value: decision.value,
        threshold: decision.threshold,
        accepted: decision.accepted,
        sequence,
    };
    let line = serde_json::to_string(&DecisionLog { decision: &out, drawing: &drawing }).expect("decision serializes");
    if let Err(e) = writeln!(state.decisions.lock().unwrap(), "{line}") {
        tracing::warn!(error = %e, "could not append decision log");
    }
    Ok(Json(out))
}

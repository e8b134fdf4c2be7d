//! HTTP service for the learner loop: tasks, execution and hints.
//!
//! Learner-facing `/hint` responses carry only the hint, whether a repair
//! was found, and telemetry. The repaired program and the explanation stay
//! on the server; the operator route returns full bundles.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use hintkit_core::corpus::{load_corpus, BuggyProgram, Difficulty, Origin, Split, Task, TestCase};
use hintkit_core::gateway::{Backend, BackendClass, PricingTable};
use hintkit_core::pipeline::{FeedbackBundle, Pipeline, PipelineConfig, PipelineError};
use hintkit_core::prompts::PromptBundle;
use hintkit_core::sandbox::{Executor, Limits, Sandbox, SandboxError, SuiteVerdict};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::config::ServiceConfig;

/// Largest accepted learner program, in bytes.
pub const MAX_PROGRAM_BYTES: usize = 64 * 1024;
/// Largest accepted request body; leaves room for JSON escaping.
pub const MAX_BODY_BYTES: usize = 4 * MAX_PROGRAM_BYTES;
pub const NOT_BUGGY_MESSAGE: &str = "not buggy; run your tests";

pub struct AppState {
    tasks: BTreeMap<String, Task>,
    backend: Box<dyn Backend>,
    executor: Box<dyn Executor>,
    prompts: PromptBundle,
    pricing: PricingTable,
    pipeline: PipelineConfig,
    operator_token: Option<String>,
    hint_slots: Semaphore,
    audit: Option<Mutex<File>>,
}

impl AppState {
    pub fn from_config(cfg: &ServiceConfig) -> Result<Self> {
        let mut tasks = BTreeMap::new();
        for root in &cfg.corpora {
            let corpus = load_corpus(root).with_context(|| format!("loading corpus {}", root.display()))?;
            for task in corpus.tasks {
                let id = task.id.clone();
                if tasks.insert(id.clone(), task).is_some() {
                    bail!("task id '{id}' appears in more than one corpus");
                }
            }
        }
        let operator_token = match &cfg.operator_token_env {
            Some(var) => Some(std::env::var(var).with_context(|| format!("operator token variable {var} is not set"))?),
            None => None,
        };
        let audit = match &cfg.audit_log {
            Some(p) => Some(Mutex::new(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .with_context(|| format!("opening audit log {}", p.display()))?,
            )),
            None => None,
        };
        Ok(Self {
            tasks,
            backend: cfg.backend.build()?,
            executor: Box::new(Sandbox::discover()?),
            prompts: PromptBundle::resolve(&cfg.pipeline.prompt_set)?,
            pricing: cfg.pricing_table()?,
            pipeline: cfg.pipeline.clone(),
            operator_token,
            hint_slots: Semaphore::new(cfg.hint_slots),
            audit,
        })
    }

    fn task(&self, id: &str) -> Result<&Task, ApiError> {
        self.tasks
            .get(id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown task '{id}'")))
    }

    fn audit(&self, endpoint: &str, task_id: &str, program: &str) {
        if let Some(file) = &self.audit {
            let line = serde_json::json!({"endpoint": endpoint, "task_id": task_id, "program": program});
            let mut f = file.lock().unwrap_or_else(|e| e.into_inner());
            if let Err(e) = writeln!(f, "{line}") {
                tracing::warn!(error = %e, "audit log write failed");
            }
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    retriable: Option<bool>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            retriable: None,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = serde_json::json!({"error": self.message});
        if let Some(r) = self.retriable {
            body["retriable"] = r.into();
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let retriable = e.is_retriable();
        match e {
            PipelineError::NotBuggy(_) => ApiError::new(StatusCode::CONFLICT, NOT_BUGGY_MESSAGE),
            PipelineError::Config(_) | PipelineError::Input(_) => ApiError::new(StatusCode::BAD_REQUEST, e.to_string()),
            PipelineError::Backend { .. } | PipelineError::UnparseableHint { .. } => ApiError {
                status: StatusCode::BAD_GATEWAY,
                message: e.to_string(),
                retriable: Some(retriable),
            },
            other => {
                tracing::error!(error = %other, "pipeline failure");
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string())
            }
        }
    }
}

impl From<SandboxError> for ApiError {
    fn from(e: SandboxError) -> Self {
        match e {
            SandboxError::InvalidRequest(_) => ApiError::new(StatusCode::BAD_REQUEST, e.to_string()),
            other => {
                tracing::error!(error = %other, "sandbox failure");
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string())
            }
        }
    }
}

/// Parses a JSON body, mapping any decoding problem to 400.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed body: {e}")))
}

fn check_size(program: &str) -> Result<(), ApiError> {
    if program.len() > MAX_PROGRAM_BYTES {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("program exceeds {MAX_PROGRAM_BYTES} bytes"),
        ));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TaskSummary {
    pub id: String,
    pub title: String,
    pub description: String,
    pub difficulty: Difficulty,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TaskDetail {
    #[serde(flatten)]
    pub summary: TaskSummary,
    pub entry_function: String,
    pub tests: Vec<TestCase>,
}

fn summary(t: &Task) -> TaskSummary {
    TaskSummary {
        id: t.id.clone(),
        title: t.title.clone(),
        description: t.description.clone(),
        difficulty: t.difficulty,
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecuteRequest {
    pub task_id: String,
    pub program: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HintRequest {
    pub task_id: String,
    pub program: String,
    #[serde(default)]
    pub n_r: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HintTelemetry {
    pub latency_ms: u64,
    pub usd_cost: f64,
    pub backend_class: BackendClass,
}

/// What a learner client receives.
#[derive(Debug, Serialize, Deserialize)]
pub struct LearnerHint {
    pub hint: String,
    pub repair_found: bool,
    pub telemetry: HintTelemetry,
}

impl From<&FeedbackBundle> for LearnerHint {
    fn from(b: &FeedbackBundle) -> Self {
        Self {
            hint: b.hint.clone(),
            repair_found: b.repair_found(),
            telemetry: HintTelemetry {
                latency_ms: b.telemetry.total_latency_ms,
                usd_cost: b.telemetry.usd_cost,
                backend_class: b.telemetry.backend_class,
            },
        }
    }
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "status": "ok",
        "backend_id": state.backend.id(),
        "backend_class": state.backend.class(),
        "tasks": state.tasks.len(),
    }))
}

async fn list_tasks(State(state): State<Arc<AppState>>) -> Json<Vec<TaskSummary>> {
    Json(state.tasks.values().map(summary).collect())
}

async fn get_task(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<TaskDetail>, ApiError> {
    let t = state.task(&id)?;
    Ok(Json(TaskDetail {
        summary: summary(t),
        entry_function: t.entry_function.clone(),
        tests: t.suite.clone(),
    }))
}

async fn execute(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<SuiteVerdict>, ApiError> {
    let req: ExecuteRequest = parse_body(&body)?;
    check_size(&req.program)?;
    let exec = state.task(&req.task_id)?.execution_request(&req.program, Limits::interactive());
    state.audit("execute", &req.task_id, &req.program);
    let st = state.clone();
    let verdict = tokio::task::spawn_blocking(move || st.executor.run_suite(&exec))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(verdict))
}

async fn run_hint(state: Arc<AppState>, body: Bytes) -> Result<FeedbackBundle, ApiError> {
    let req: HintRequest = parse_body(&body)?;
    check_size(&req.program)?;
    state.task(&req.task_id)?;
    let mut cfg = state.pipeline.clone();
    if let Some(n) = req.n_r {
        cfg.n_r = n;
    }
    cfg.validate().map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    state.audit("hint", &req.task_id, &req.program);

    let _permit = state
        .hint_slots
        .acquire()
        .await
        .map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, e.to_string()))?;
    let st = state.clone();
    tokio::task::spawn_blocking(move || {
        let task = &st.tasks[&req.task_id];
        let bug = BuggyProgram {
            id: "request".into(),
            task_id: task.id.clone(),
            source: req.program,
            origin: Origin::RealWorld,
            split: Split::Evaluation,
        };
        let pipeline = Pipeline {
            backend: st.backend.as_ref(),
            executor: st.executor.as_ref(),
            prompts: &st.prompts,
            pricing: &st.pricing,
            limits: Limits::interactive(),
        };
        pipeline.run_feedback(task, &bug, &cfg)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
    .map_err(ApiError::from)
}

async fn hint(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<LearnerHint>, ApiError> {
    let bundle = run_hint(state, body).await?;
    Ok(Json(LearnerHint::from(&bundle)))
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

async fn operator_hint(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Json<FeedbackBundle>, ApiError> {
    let Some(token) = &state.operator_token else {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "operator route is disabled"));
    };
    let presented = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if !presented.is_some_and(|p| constant_time_eq(p.as_bytes(), token.as_bytes())) {
        return Err(ApiError::new(StatusCode::UNAUTHORIZED, "operator token required"));
    }
    Ok(Json(run_hint(state, body).await?))
}

/// One structured log line per request; bodies are never logged.
async fn log_request(req: Request, next: Next) -> Response {
    let (method, path) = (req.method().clone(), req.uri().path().to_string());
    let started = Instant::now();
    let resp = next.run(req).await;
    tracing::info!(
        method = %method,
        path = %path,
        status = resp.status().as_u16(),
        latency_ms = started.elapsed().as_millis() as u64,
        "request"
    );
    resp
}

fn cors(origins: &[String]) -> Result<CorsLayer> {
    let values = origins
        .iter()
        .map(|o| HeaderValue::from_str(o).with_context(|| format!("invalid CORS origin '{o}'")))
        .collect::<Result<Vec<_>>>()?;
    Ok(CorsLayer::new()
        .allow_origin(AllowOrigin::list(values))
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE, header::AUTHORIZATION]))
}

pub fn router(state: Arc<AppState>, cors_origins: &[String]) -> Result<Router> {
    Ok(Router::new()
        .route("/health", get(health))
        .route("/tasks", get(list_tasks))
        .route("/tasks/{id}", get(get_task))
        .route("/execute", post(execute))
        .route("/hint", post(hint))
        .route("/operator/hint", post(operator_hint))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .layer(cors(cors_origins)?)
        .layer(middleware::from_fn(log_request))
        .with_state(state))
}

/// Serves until Ctrl-C or SIGTERM, then drains in-flight requests.
pub async fn serve(cfg: ServiceConfig) -> Result<()> {
    let state = Arc::new(AppState::from_config(&cfg)?);
    let app = router(state, &cfg.cors_allow_origins)?;
    let listener = tokio::net::TcpListener::bind(cfg.listen)
        .await
        .with_context(|| format!("binding {}", cfg.listen))?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, app).with_graceful_shutdown(shutdown_signal()).await?;
    tracing::info!("shut down");
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

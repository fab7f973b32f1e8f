//! HTTP/JSON surface over the cadenza engine.

mod config;
mod error;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Query, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{middleware, Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Mutex;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};
use tower_http::timeout::TimeoutLayer;

use cadenza_core::agent::{
    memory_query, valid_session_id, Agent, AgentConfig, Attachment, Clock, CompletionBackend, GenerationParams, Intent,
    MemoryEntry, MemoryKind, OpenAiBackend, Session, StubBackend, SystemClock, TraceStep, MEMORY_FILE,
};
use cadenza_core::dsp::{baseline_transcribe, load_wav};
use cadenza_core::formats::PerformanceNotes;
use cadenza_core::pipeline::{
    align_performance, evaluate_aligned, load_performance, load_score_file, piece_name, AlignMode,
};
use cadenza_core::retrieval::{
    index_library, match_implicit, search_explicit_with, LibraryIndex, Probe, RetrievalHit, DEFAULT_EXPLICIT_THRESHOLD,
};

pub use config::{BackendKind, Config, ConfigError, LlmConfig};
pub use error::ApiError;

#[derive(Debug, thiserror::Error)]
pub enum StartupError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("library: {0}")]
    Library(String),
    #[error("backend: {0}")]
    Backend(String),
    #[error("cannot bind {addr}: {reason}")]
    Bind { addr: String, reason: String },
}

type SessionHandle = Arc<Mutex<Session>>;

pub struct AppState {
    pub config: Config,
    pub agent: Arc<Agent>,
    sessions: Mutex<HashMap<String, SessionHandle>>,
}

impl AppState {
    async fn session(&self, id: &str) -> Result<SessionHandle, ApiError> {
        let unknown = || ApiError::not_found(format!("unknown session {id:?}"));
        if !valid_session_id(id) {
            return Err(unknown());
        }
        let mut sessions = self.sessions.lock().await;
        if let Some(s) = sessions.get(id) {
            return Ok(Arc::clone(s));
        }
        if !self.config.sessions_path.join(id).join(MEMORY_FILE).is_file() {
            return Err(unknown());
        }
        let session = Session::open(&self.config.sessions_path, id).map_err(ApiError::from)?;
        let handle = Arc::new(Mutex::new(session));
        sessions.insert(id.to_string(), Arc::clone(&handle));
        Ok(handle)
    }
}

/// Completion backend selected by the config.
pub fn make_backend(llm: &LlmConfig) -> Result<Arc<dyn CompletionBackend>, StartupError> {
    match llm.backend {
        BackendKind::Stub => Ok(Arc::new(StubBackend)),
        BackendKind::Openai => {
            let url = llm.url.clone().ok_or_else(|| StartupError::Backend("openai backend needs llm.url".into()))?;
            Ok(Arc::new(OpenAiBackend::new(url, llm.api_key.clone(), llm.model.clone())))
        }
    }
}

/// Indexes the configured library (rewriting its index file) and builds the
/// agent.
pub fn build_agent(
    config: &Config,
    backend: Arc<dyn CompletionBackend>,
    clock: Arc<dyn Clock>,
) -> Result<Agent, StartupError> {
    let agent_config = AgentConfig {
        default_tempo_bpm: config.default_tempo_bpm,
        generation: GenerationParams {
            timeout: Duration::try_from_secs_f64(config.llm.timeout_secs)
                .map_err(|e| StartupError::Backend(format!("llm.timeout_secs: {e}")))?,
            ..GenerationParams::default()
        },
        ..AgentConfig::default()
    };
    let mut agent = Agent::new(backend).with_clock(clock).with_config(agent_config);
    if let Some(root) = &config.library_path {
        let index = index_library(root).map_err(|e| StartupError::Library(e.to_string()))?;
        if let Err(e) = index.save(root) {
            log::warn!("could not write library index: {e}");
        }
        agent = agent.with_library(index, Some(root.clone()));
    }
    Ok(agent)
}

pub fn build_state(config: Config) -> Result<Arc<AppState>, StartupError> {
    let backend = make_backend(&config.llm)?;
    let agent = build_agent(&config, backend, Arc::new(SystemClock))?;
    Ok(state_with_agent(config, agent))
}

pub fn state_with_agent(config: Config, agent: Agent) -> Arc<AppState> {
    Arc::new(AppState { config, agent: Arc::new(agent), sessions: Mutex::new(HashMap::new()) })
}

/// Replaces bare error responses (from extractors, layers or routing) with
/// an ApiError body.
async fn json_errors(resp: Response) -> Response {
    let status = resp.status();
    let is_json = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"));
    if (status.is_client_error() || status.is_server_error()) && !is_json {
        ApiError::from_status(status).into_response()
    } else {
        resp
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = if state.config.cors_origins.iter().any(|o| o == "*") {
        CorsLayer::new().allow_origin(Any)
    } else {
        let origins: Vec<HeaderValue> = state.config.cors_origins.iter().filter_map(|o| o.parse().ok()).collect();
        CorsLayer::new().allow_origin(AllowOrigin::list(origins))
    }
    .allow_methods([Method::GET, Method::POST])
    .allow_headers([header::CONTENT_TYPE]);
    let timeout = Duration::from_secs(state.config.request_timeout_secs);
    Router::new()
        .route("/health", get(health))
        .route("/transcribe", post(transcribe))
        .route("/align", post(align))
        .route("/evaluate", post(evaluate))
        .route("/library/search", get(library_search))
        .route("/library/match", post(library_match))
        .route("/agent/session", post(agent_session))
        .route("/agent/message", post(agent_message))
        .route("/agent/memory", get(agent_memory))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .layer(DefaultBodyLimit::max(state.config.max_body_bytes))
        .layer(TimeoutLayer::with_status_code(StatusCode::GATEWAY_TIMEOUT, timeout))
        .layer(middleware::map_response(json_errors))
        .layer(cors)
        .with_state(state)
}

pub async fn serve(config: Config) -> Result<(), StartupError> {
    let addr = format!("{}:{}", config.host, config.port);
    let state = tokio::task::spawn_blocking(move || build_state(config))
        .await
        .map_err(|e| StartupError::Backend(e.to_string()))??;
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|e| StartupError::Bind { addr: addr.clone(), reason: e.to_string() })?;
    let local: SocketAddr = listener.local_addr().map_err(|e| StartupError::Bind { addr, reason: e.to_string() })?;
    log::info!("listening on http://{local}");
    axum::serve(listener, router(state))
        .await
        .map_err(|e| StartupError::Bind { addr: local.to_string(), reason: e.to_string() })
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))?
}

struct UploadedFile {
    field: String,
    file_name: String,
    data: Vec<u8>,
}

#[derive(Default)]
struct Form {
    files: Vec<UploadedFile>,
    text: HashMap<String, String>,
}

impl Form {
    async fn read(mut multipart: Multipart) -> Result<Form, ApiError> {
        let mut form = Form::default();
        let fail = |e: axum::extract::multipart::MultipartError| {
            let status = e.status();
            ApiError::from_status(status).with_detail(e.body_text())
        };
        while let Some(field) = multipart.next_field().await.map_err(fail)? {
            let name = field.name().unwrap_or("").to_string();
            match field.file_name().map(str::to_string) {
                Some(file_name) => {
                    let data = field.bytes().await.map_err(fail)?.to_vec();
                    form.files.push(UploadedFile { field: name, file_name, data });
                }
                None => {
                    let value = field.text().await.map_err(fail)?;
                    form.text.insert(name, value);
                }
            }
        }
        Ok(form)
    }

    fn take_file(&mut self, field: &str) -> Result<UploadedFile, ApiError> {
        let pos = self
            .files
            .iter()
            .position(|f| f.field == field)
            .ok_or_else(|| ApiError::bad_request(format!("missing file field {field:?}")))?;
        Ok(self.files.remove(pos))
    }

    fn tempo(&self, default: f64) -> Result<f64, ApiError> {
        match self.text.get("tempo") {
            None => Ok(default),
            Some(t) => t
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v > 0.0)
                .ok_or_else(|| ApiError::bad_request(format!("invalid tempo {t:?}"))),
        }
    }

    fn mode(&self) -> Result<AlignMode, ApiError> {
        match self.text.get("mode").map(String::as_str) {
            None | Some("auto") => Ok(AlignMode::Auto),
            Some("symbolic") => Ok(AlignMode::Symbolic),
            Some(other) => Err(ApiError::bad_request(format!("unknown mode {other:?}"))),
        }
    }
}

fn multipart_rejection(e: axum::extract::multipart::MultipartRejection) -> ApiError {
    ApiError::bad_request("expected a multipart/form-data body").with_detail(e.body_text())
}

fn json_rejection(e: JsonRejection) -> ApiError {
    let status = e.status();
    let err = if status == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::from_status(status)
    } else {
        ApiError::bad_request("malformed JSON body")
    };
    err.with_detail(e.body_text())
}

async fn health() -> Json<Value> {
    Json(json!({"status": "ok"}))
}

async fn transcribe(
    multipart: Result<Multipart, axum::extract::multipart::MultipartRejection>,
) -> Result<Json<PerformanceNotes>, ApiError> {
    let mut form = Form::read(multipart.map_err(multipart_rejection)?).await?;
    let file = match form.take_file("audio") {
        Ok(f) => f,
        Err(e) => form.files.pop().ok_or(e)?,
    };
    let notes = blocking(move || {
        let audio = load_wav(&file.data).map_err(|e| ApiError::bad_request(e.to_string()))?;
        let tr = baseline_transcribe(&audio).map_err(|e| ApiError::bad_request(e.to_string()))?;
        Ok(tr.notes)
    })
    .await?;
    Ok(Json(notes))
}

/// Loads both uploads and aligns them.
async fn align_form(
    state: &AppState,
    multipart: Multipart,
) -> Result<(String, cadenza_core::pipeline::Aligned), ApiError> {
    let mut form = Form::read(multipart).await?;
    let score_file = form.take_file("score")?;
    let perf_file = form.take_file("performance")?;
    let tempo = form.tempo(state.config.default_tempo_bpm)?;
    let mode = form.mode()?;
    blocking(move || {
        let score = load_score_file(&score_file.file_name, &score_file.data)
            .map_err(|e| ApiError::bad_request(format!("score: {e}")))?;
        let performance = load_performance(&perf_file.file_name, &perf_file.data)
            .map_err(|e| ApiError::bad_request(format!("performance: {e}")))?;
        let aligned = align_performance(&score, &performance, tempo, mode)
            .map_err(|e| ApiError::bad_request(format!("alignment: {e}")))?;
        Ok((piece_name(&score, &score_file.file_name), aligned))
    })
    .await
}

async fn align(
    State(state): State<Arc<AppState>>,
    multipart: Result<Multipart, axum::extract::multipart::MultipartRejection>,
) -> Result<Response, ApiError> {
    let (_, aligned) = align_form(&state, multipart.map_err(multipart_rejection)?).await?;
    Ok(Json(aligned.alignment).into_response())
}

async fn evaluate(
    State(state): State<Arc<AppState>>,
    multipart: Result<Multipart, axum::extract::multipart::MultipartRejection>,
) -> Result<Response, ApiError> {
    let (piece, aligned) = align_form(&state, multipart.map_err(multipart_rejection)?).await?;
    Ok(Json(evaluate_aligned(&piece, &aligned)).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HitList {
    pub hits: Vec<RetrievalHit>,
}

#[derive(Debug, Deserialize)]
struct SearchQuery {
    q: Option<String>,
    threshold: Option<f64>,
}

fn library(state: &AppState) -> Result<&LibraryIndex, ApiError> {
    state.agent.library().ok_or_else(|| ApiError::not_found("no library is configured"))
}

async fn library_search(
    State(state): State<Arc<AppState>>,
    query: Query<SearchQuery>,
) -> Result<Json<HitList>, ApiError> {
    let q = query.q.as_deref().ok_or_else(|| ApiError::bad_request("missing query parameter q"))?;
    let threshold = query.threshold.unwrap_or(DEFAULT_EXPLICIT_THRESHOLD);
    Ok(Json(HitList { hits: search_explicit_with(library(&state)?, q, threshold) }))
}

async fn library_match(
    State(state): State<Arc<AppState>>,
    body: Result<Json<PerformanceNotes>, JsonRejection>,
) -> Result<Json<HitList>, ApiError> {
    let Json(notes) = body.map_err(json_rejection)?;
    let probe = Probe::Notes(PerformanceNotes::new(notes.notes));
    let hits = match_implicit(library(&state)?, &probe).map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(Json(HitList { hits }))
}

async fn agent_session(State(state): State<Arc<AppState>>) -> Result<Json<Value>, ApiError> {
    let id = uuid::Uuid::new_v4().simple().to_string();
    let root = state.config.sessions_path.clone();
    let sid = id.clone();
    let session = blocking(move || Session::open(&root, &sid).map_err(ApiError::from)).await?;
    state.sessions.lock().await.insert(id.clone(), Arc::new(Mutex::new(session)));
    Ok(Json(json!({"session_id": id})))
}

#[derive(Debug, Deserialize)]
struct MessageBody {
    session_id: String,
    text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MessageReply {
    pub session_id: String,
    pub turn: u32,
    pub intent: Intent,
    pub response: String,
    pub trace: Vec<TraceStep>,
}

async fn agent_message(State(state): State<Arc<AppState>>, request: Request) -> Result<Json<MessageReply>, ApiError> {
    let is_multipart = request
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let (session_id, text, attachments) = if is_multipart {
        let multipart = Multipart::from_request(request, &()).await.map_err(multipart_rejection)?;
        let mut form = Form::read(multipart).await?;
        let session_id = form.text.remove("session_id").ok_or_else(|| ApiError::bad_request("missing session_id"))?;
        let text = form.text.remove("text").unwrap_or_default();
        let attachments = form
            .files
            .into_iter()
            .map(|f| Attachment::from_file(&f.file_name, f.data).map_err(ApiError::from))
            .collect::<Result<Vec<_>, _>>()?;
        (session_id, text, attachments)
    } else {
        let Json(body) = Json::<MessageBody>::from_request(request, &()).await.map_err(json_rejection)?;
        (body.session_id, body.text, Vec::new())
    };
    let handle = state.session(&session_id).await?;
    let mut session = handle.lock_owned().await;
    let agent = Arc::clone(&state.agent);
    let outcome = blocking(move || agent.run_turn(&mut session, &text, &attachments).map_err(ApiError::from)).await?;
    Ok(Json(MessageReply {
        session_id: outcome.session_id,
        turn: outcome.turn,
        intent: outcome.intent,
        response: outcome.response,
        trace: outcome.trace,
    }))
}

#[derive(Debug, Deserialize)]
struct MemoryQuery {
    session_id: Option<String>,
    kind: Option<MemoryKind>,
    limit: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MemoryReply {
    pub session_id: String,
    pub entries: Vec<MemoryEntry>,
}

async fn agent_memory(
    State(state): State<Arc<AppState>>,
    query: Result<Query<MemoryQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Json<MemoryReply>, ApiError> {
    let Query(query) = query.map_err(|e| ApiError::bad_request("invalid query").with_detail(e.body_text()))?;
    let id = query.session_id.ok_or_else(|| ApiError::bad_request("missing query parameter session_id"))?;
    let handle = state.session(&id).await?;
    let session = handle.lock().await;
    let entries = memory_query(&session, query.kind, query.limit.unwrap_or(100));
    Ok(Json(MemoryReply { session_id: id, entries }))
}

/// Default location of the JSON schemas documenting every response.
pub fn schema_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("schemas")
}

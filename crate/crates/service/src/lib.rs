//! JSON-over-HTTP chat sessions backed by the three-stage pipeline, with
//! per-turn annotations and append-only JSONL persistence.

mod config;
mod store;

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use seeker_core::eval::TurnAnnotation;
use seeker_core::pipeline::{ConversationState, Pipeline, PipelineError, Speaker, Turn, TurnTrace};

pub use config::{build_backend, build_pipelines, build_provider, serve, ServiceConfig, COPY_ORACLE};
pub use store::{Event, Replayed, SessionMeta, Store, TurnRecord};

pub const DEFAULT_CONFIG: &str = "default";

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("unknown config `{0}`")]
    UnknownConfig(String),
    #[error("session `{session}` has no completed turn {turn}")]
    UnknownTurn { session: String, turn: usize },
    #[error("{0}")]
    BadRequest(String),
    #[error("session `{0}` is already processing a turn")]
    Busy(String),
    #[error(transparent)]
    Pipeline(PipelineError),
    #[error("storage: {0}")]
    Storage(#[from] io::Error),
    #[error("worker: {0}")]
    Worker(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self {
            ApiError::UnknownSession(_) | ApiError::UnknownConfig(_) | ApiError::UnknownTurn { .. } => {
                StatusCode::NOT_FOUND
            }
            ApiError::BadRequest(_) | ApiError::Pipeline(PipelineError::Precondition(_)) => StatusCode::BAD_REQUEST,
            ApiError::Busy(_) => StatusCode::CONFLICT,
            ApiError::Pipeline(_) => StatusCode::BAD_GATEWAY,
            ApiError::Storage(_) | ApiError::Worker(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut body = json!({ "error": self.to_string() });
        if let ApiError::Pipeline(e) = &self {
            if let Some(stage) = e.stage() {
                body["stage"] = json!(stage);
            }
        }
        (status, Json(body)).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocHeader {
    pub title: String,
    pub url: String,
}

/// What a client sees for one completed turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnView {
    pub turn_index: usize,
    pub query: String,
    pub docs: Vec<DocHeader>,
    pub knowledge: String,
    pub response: String,
}

impl TurnView {
    pub fn new(turn_index: usize, trace: &TurnTrace) -> Self {
        Self {
            turn_index,
            query: trace.query.clone(),
            docs: trace
                .retrieved
                .iter()
                .map(|d| DocHeader {
                    title: d.title.clone(),
                    url: d.url.clone(),
                })
                .collect(),
            knowledge: trace.knowledge.clone(),
            response: trace.response.clone(),
        }
    }
}

impl From<&TurnRecord> for TurnView {
    fn from(r: &TurnRecord) -> Self {
        TurnView::new(r.turn_index, &r.trace)
    }
}

struct SessionData {
    state: ConversationState,
    records: Vec<TurnRecord>,
    rating: Option<u8>,
}

struct Session {
    meta: SessionMeta,
    gate: Arc<tokio::sync::Mutex<()>>,
    data: RwLock<SessionData>,
}

impl Session {
    fn new(meta: SessionMeta, records: Vec<TurnRecord>, rating: Option<u8>) -> Self {
        let mut state = ConversationState::new(&meta.session_id);
        state.persona = meta.persona.clone();
        for r in &records {
            state.turns.push(Turn {
                speaker: Speaker::User,
                text: r.user_message.clone(),
            });
            state.turns.push(Turn {
                speaker: Speaker::Model,
                text: r.trace.response.clone(),
            });
            state.accumulated_knowledge.push(r.trace.knowledge.clone());
        }
        Self {
            meta,
            gate: Arc::new(tokio::sync::Mutex::new(())),
            data: RwLock::new(SessionData { state, records, rating }),
        }
    }

    fn export(&self) -> Vec<TurnRecord> {
        let data = self.data.read();
        let mut records = data.records.clone();
        if let Some(last) = records.last_mut() {
            last.final_rating = data.rating;
        }
        records
    }
}

struct Inner {
    pipelines: BTreeMap<String, Pipeline>,
    store: Store,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
}

/// Shared server state; cheap to clone.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    /// Opens the data directory and replays every stored session.
    pub fn open(data_dir: impl Into<PathBuf>, pipelines: BTreeMap<String, Pipeline>) -> io::Result<Self> {
        let store = Store::open(data_dir.into())?;
        let sessions = store
            .load_all()?
            .into_iter()
            .map(|(id, r)| (id, Arc::new(Session::new(r.meta, r.records, r.rating))))
            .collect();
        Ok(Self {
            inner: Arc::new(Inner {
                pipelines,
                store,
                sessions: RwLock::new(sessions),
            }),
        })
    }

    pub fn session_count(&self) -> usize {
        self.inner.sessions.read().len()
    }

    fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.inner
            .sessions
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::UnknownSession(id.to_string()))
    }

    pub fn create_session(&self, config_ref: Option<&str>, persona: Option<String>) -> Result<SessionMeta, ApiError> {
        let config_ref = config_ref.unwrap_or(DEFAULT_CONFIG);
        if !self.inner.pipelines.contains_key(config_ref) {
            return Err(ApiError::UnknownConfig(config_ref.to_string()));
        }
        let meta = SessionMeta {
            session_id: uuid::Uuid::new_v4().simple().to_string(),
            created_at: chrono::Utc::now(),
            config_ref: config_ref.to_string(),
            persona: persona.filter(|p| !p.trim().is_empty()),
        };
        self.inner.store.append(&meta.session_id, &Event::Created(meta.clone()))?;
        self.inner
            .sessions
            .write()
            .insert(meta.session_id.clone(), Arc::new(Session::new(meta.clone(), Vec::new(), None)));
        Ok(meta)
    }

    /// Runs one turn. A second post while a turn is in flight is rejected.
    pub async fn post_message(&self, session_id: &str, text: String) -> Result<TurnView, ApiError> {
        if text.trim().is_empty() {
            return Err(ApiError::BadRequest("message text is empty".into()));
        }
        let session = self.session(session_id)?;
        let _permit = session
            .gate
            .clone()
            .try_lock_owned()
            .map_err(|_| ApiError::Busy(session_id.to_string()))?;
        let pipeline = self
            .inner
            .pipelines
            .get(&session.meta.config_ref)
            .cloned()
            .ok_or_else(|| ApiError::UnknownConfig(session.meta.config_ref.clone()))?;
        let (mut state, turn_index) = {
            let data = session.data.read();
            (data.state.clone(), data.records.len())
        };
        let this = self.clone();
        let sid = session_id.to_string();
        let (state, record) = tokio::task::spawn_blocking(move || {
            let trace = pipeline.run_turn(&mut state, &text).map_err(ApiError::Pipeline)?;
            let record = TurnRecord {
                turn_index,
                user_message: text,
                trace,
                annotation: None,
                final_rating: None,
            };
            this.inner.store.append(&sid, &Event::Turn { record: record.clone() })?;
            Ok::<_, ApiError>((state, record))
        })
        .await
        .map_err(|e| ApiError::Worker(e.to_string()))??;
        let view = TurnView::from(&record);
        let mut data = session.data.write();
        data.state = state;
        data.records.push(record);
        Ok(view)
    }

    pub fn annotate_turn(&self, session_id: &str, turn: usize, annotation: TurnAnnotation) -> Result<(), ApiError> {
        let session = self.session(session_id)?;
        let mut data = session.data.write();
        if turn >= data.records.len() {
            return Err(ApiError::UnknownTurn {
                session: session_id.to_string(),
                turn,
            });
        }
        self.inner.store.append(
            session_id,
            &Event::Annotation {
                turn_index: turn,
                annotation,
            },
        )?;
        data.records[turn].annotation = Some(annotation);
        Ok(())
    }

    pub fn rate_session(&self, session_id: &str, value: u8) -> Result<(), ApiError> {
        if !(1..=5).contains(&value) {
            return Err(ApiError::BadRequest(format!("rating {value} is outside 1..=5")));
        }
        let session = self.session(session_id)?;
        let mut data = session.data.write();
        self.inner.store.append(session_id, &Event::Rating { value })?;
        data.rating = Some(value);
        Ok(())
    }

    /// Every completed turn in order, with the rating on the last one.
    pub fn export_log(&self, session_id: &str) -> Result<Vec<TurnRecord>, ApiError> {
        Ok(self.session(session_id)?.export())
    }
}

#[derive(Debug, Default, Deserialize)]
struct CreateBody {
    #[serde(default)]
    config: Option<String>,
    #[serde(default)]
    persona: Option<String>,
}

#[derive(Debug, Deserialize)]
struct MessageBody {
    text: String,
}

#[derive(Debug, Deserialize)]
struct RatingBody {
    value: u8,
}

async fn create_session(
    State(app): State<AppState>,
    body: Option<Json<CreateBody>>,
) -> Result<(StatusCode, Json<SessionMeta>), ApiError> {
    let Json(body) = body.unwrap_or_default();
    let meta = app.create_session(body.config.as_deref(), body.persona)?;
    Ok((StatusCode::CREATED, Json(meta)))
}

async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<serde_json::Value>, ApiError> {
    let session = app.session(&id)?;
    let data = session.data.read();
    let turns: Vec<_> = data
        .records
        .iter()
        .map(|r| {
            json!({
                "user_message": r.user_message,
                "view": TurnView::from(r),
                "annotation": r.annotation,
            })
        })
        .collect();
    Ok(Json(json!({
        "session": session.meta,
        "turns": turns,
        "rating": data.rating,
    })))
}

async fn post_message(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<MessageBody>,
) -> Result<Json<TurnView>, ApiError> {
    Ok(Json(app.post_message(&id, body.text).await?))
}

async fn annotate(
    State(app): State<AppState>,
    Path((id, turn)): Path<(String, usize)>,
    Json(annotation): Json<TurnAnnotation>,
) -> Result<Json<serde_json::Value>, ApiError> {
    app.annotate_turn(&id, turn, annotation)?;
    Ok(Json(json!({ "turn_index": turn, "annotation": annotation })))
}

async fn rate(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<RatingBody>,
) -> Result<Json<serde_json::Value>, ApiError> {
    app.rate_session(&id, body.value)?;
    Ok(Json(json!({ "rating": body.value })))
}

async fn export_log(State(app): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let mut body = Vec::new();
    for record in app.export_log(&id)? {
        serde_json::to_writer(&mut body, &record).map_err(io::Error::from)?;
        body.push(b'\n');
    }
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], Body::from(body)).into_response())
}

/// All API routes, plus the UI bundle from `static_dir` when given.
pub fn router(app: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/health", get(|| async { Json(json!({ "ok": true })) }))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/turns/{n}/annotation", put(annotate))
        .route("/sessions/{id}/rating", put(rate))
        .route("/sessions/{id}/log", get(export_log))
        .with_state(app);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

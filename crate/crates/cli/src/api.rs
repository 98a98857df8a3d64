//! HTTP session API.
//!
//! Every session is one project directory under the data directory. Reads
//! share a session's lock; mutations take it exclusively and are queued in
//! arrival order. Engine work runs on the blocking pool.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::RwLock;

use scenewright::arc::ArcError;
use scenewright::graph::{decode_graph, ConsistencyViolation, SceneGraph};
use scenewright::narrator::{
    propose_twists, NarratorError, SceneRecord, StoryConfig, StorySession,
};
use scenewright::project::{
    encode_project, handle_edit, images_dir, step_session, EditRequest, EditResponse, ProjectError,
    SessionError, SessionHandle, StoryProject,
};
use scenewright::tone::ToneSpec;

use crate::Runtime;

pub const PROJECT_FILE: &str = "story.json";

type Shared = Arc<RwLock<SessionHandle>>;

pub struct AppState {
    runtime: Runtime,
    data_dir: PathBuf,
    sessions: RwLock<HashMap<String, Shared>>,
}

impl AppState {
    pub fn new(runtime: Runtime, data_dir: impl Into<PathBuf>) -> Self {
        Self {
            runtime,
            data_dir: data_dir.into(),
            sessions: RwLock::default(),
        }
    }

    /// Reopens every project found under the data directory. Returns the
    /// number of sessions restored; unreadable projects are skipped.
    pub async fn restore(&self) -> usize {
        let Ok(entries) = std::fs::read_dir(&self.data_dir) else {
            return 0;
        };
        let mut restored = 0;
        for entry in entries.flatten() {
            let path = entry.path().join(PROJECT_FILE);
            if !path.is_file() {
                continue;
            }
            let id = entry.file_name().to_string_lossy().into_owned();
            let opened = scenewright::project::load_project(&path)
                .map_err(SessionError::from)
                .and_then(|p| {
                    let backends = self
                        .runtime
                        .backends_for(&p.config, Some(images_dir(&path)))
                        .map_err(|e| ProjectError::Invalid(e.to_string()))?;
                    SessionHandle::open(
                        id.clone(),
                        &path,
                        &self.runtime.engine,
                        backends,
                        self.runtime.clock.clone(),
                    )
                });
            match opened {
                Ok(handle) => {
                    self.sessions
                        .write()
                        .await
                        .insert(id, Arc::new(RwLock::new(handle)));
                    restored += 1;
                }
                Err(e) => log::warn!("skipping {}: {e}", path.display()),
            }
        }
        restored
    }

    async fn session(&self, id: &str) -> Result<Shared, ApiError> {
        self.sessions.read().await.get(id).cloned().ok_or_else(|| {
            ApiError::new(
                StatusCode::NOT_FOUND,
                "session_not_found",
                format!("no session `{id}`"),
            )
        })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/step", post(step))
        .route("/sessions/{id}/scenes/{n}/text", put(edit_text))
        .route("/sessions/{id}/scenes/{n}/graph", put(edit_graph))
        .route("/sessions/{id}/twists", get(list_twists).post(choose_twist))
        .route("/sessions/{id}/tones", put(set_tones))
        .route("/sessions/{id}/export", get(export))
        .with_state(state)
}

/// Structured error body: `{"error": {"code", "message", "violations"}}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub violations: Vec<ConsistencyViolation>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            violations: Vec::new(),
        }
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "error": {
                "code": self.code,
                "message": self.message,
                "violations": self.violations,
            }
        });
        (self.status, Json(body)).into_response()
    }
}

impl From<NarratorError> for ApiError {
    fn from(e: NarratorError) -> Self {
        let message = e.to_string();
        match e {
            NarratorError::GraphRejected(violations) => Self {
                violations,
                ..Self::new(StatusCode::UNPROCESSABLE_ENTITY, "graph_rejected", message)
            },
            NarratorError::Arc(ArcError::StoryComplete(_)) => {
                Self::new(StatusCode::CONFLICT, "story_complete", message)
            }
            NarratorError::NoScenes => Self::new(StatusCode::CONFLICT, "no_scenes", message),
            NarratorError::SceneOutOfRange(_) => {
                Self::new(StatusCode::NOT_FOUND, "scene_not_found", message)
            }
            NarratorError::Backend { .. } | NarratorError::BadTwists(_) => {
                Self::new(StatusCode::BAD_GATEWAY, "backend_error", message)
            }
            NarratorError::Visual { .. } => {
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "visual_error", message)
            }
            NarratorError::Arc(_)
            | NarratorError::Tone(_)
            | NarratorError::InvalidConfig(_)
            | NarratorError::InvalidTwistCount
            | NarratorError::EmptyTwist => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", message)
            }
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Narrator(n) => n.into(),
            SessionError::Project(p) => p.into(),
            e @ SessionError::Persist { .. } => Self::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                "persist_failed",
                e.to_string(),
            ),
        }
    }
}

impl From<ProjectError> for ApiError {
    fn from(e: ProjectError) -> Self {
        let status = match e {
            ProjectError::Locked(_) => StatusCode::CONFLICT,
            ProjectError::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self::new(status, "project_error", e.to_string())
    }
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::invalid(format!("invalid body: {e}")))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub scenes_generated: u32,
    pub total_scenes: u32,
    pub progress: f64,
    pub complete: bool,
    /// Stage the next step will use; absent once the story is complete.
    pub next_stage: Option<String>,
    pub graph: SceneGraph,
    pub dirty: bool,
    pub project: StoryProject,
}

fn view(handle: &SessionHandle) -> SessionView {
    let session = &handle.session;
    let state = session.arc_state().ok();
    let total = session.config().total_scenes;
    let generated = session.scenes().len() as u32;
    SessionView {
        id: handle.id.clone(),
        scenes_generated: generated,
        total_scenes: total,
        progress: state.as_ref().map_or(1.0, |s| s.progress()),
        complete: session.is_complete(),
        next_stage: state
            .as_ref()
            .and_then(|s| scenewright::arc::directive_for_scene(s).ok())
            .map(|d| d.stage_name),
        graph: session.graph().clone(),
        dirty: handle.is_dirty(),
        project: session.project.clone(),
    }
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let config: StoryConfig = parse_body(&body)?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let path = state.data_dir.join(&id).join(PROJECT_FILE);
    let st = state.clone();
    let handle_id = id.clone();
    let handle = blocking(move || {
        let backends = st
            .runtime
            .backends_for(&config, Some(images_dir(&path)))
            .map_err(|e| ApiError::invalid(e.to_string()))?;
        let session = StorySession::new(
            config,
            &st.runtime.engine,
            backends,
            st.runtime.clock.clone(),
        )?;
        Ok(SessionHandle::create(handle_id, session, Some(path))?)
    })
    .await?;
    let body = view(&handle);
    state
        .sessions
        .write()
        .await
        .insert(id, Arc::new(RwLock::new(handle)));
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<SessionView>, ApiError> {
    let session = state.session(&id).await?;
    let guard = session.read().await;
    Ok(Json(view(&guard)))
}

async fn step(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<SceneRecord>, ApiError> {
    let guard = state.session(&id).await?.write_owned().await;
    blocking(move || {
        let mut guard = guard;
        Ok(step_session(&mut guard)?)
    })
    .await
    .map(Json)
}

async fn edit(
    state: &AppState,
    id: &str,
    request: EditRequest,
) -> Result<Json<EditResponse>, ApiError> {
    let guard = state.session(id).await?.write_owned().await;
    blocking(move || {
        let mut guard = guard;
        Ok(handle_edit(&mut guard, request)?)
    })
    .await
    .map(Json)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TextBody {
    text: String,
}

async fn edit_text(
    State(state): State<Arc<AppState>>,
    Path((id, n)): Path<(String, u32)>,
    body: Bytes,
) -> Result<Json<EditResponse>, ApiError> {
    let TextBody { text } = parse_body(&body)?;
    edit(&state, &id, EditRequest::SceneText { index: n, text }).await
}

async fn edit_graph(
    State(state): State<Arc<AppState>>,
    Path((id, n)): Path<(String, u32)>,
    body: Bytes,
) -> Result<Json<EditResponse>, ApiError> {
    let document = std::str::from_utf8(&body).map_err(|e| ApiError::invalid(e.to_string()))?;
    let graph = decode_graph(document).map_err(|e| {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "schema_error",
            e.to_string(),
        )
    })?;
    edit(&state, &id, EditRequest::SceneGraph { index: n, graph }).await
}

#[derive(Debug, Deserialize)]
struct TwistQuery {
    n: Option<usize>,
}

async fn list_twists(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<TwistQuery>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let guard = state.session(&id).await?.read_owned().await;
    let n = q.n.unwrap_or(3);
    let twists = blocking(move || Ok(propose_twists(&guard.session, n)?)).await?;
    Ok(Json(json!({ "twists": twists })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TwistBody {
    twist: String,
    /// Generate the next scene right away instead of waiting for a step.
    #[serde(default)]
    apply: bool,
}

async fn choose_twist(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<EditResponse>, ApiError> {
    let TwistBody { twist, apply } = parse_body(&body)?;
    let request = if apply {
        EditRequest::ApplyTwist { twist }
    } else {
        EditRequest::SelectTwist { twist }
    };
    edit(&state, &id, request).await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TonesBody {
    tones: Vec<ToneSpec>,
    #[serde(default)]
    nac_influence: Option<bool>,
}

async fn set_tones(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<EditResponse>, ApiError> {
    let TonesBody {
        tones,
        nac_influence,
    } = parse_body(&body)?;
    edit(
        &state,
        &id,
        EditRequest::Tones {
            tones,
            nac_influence,
        },
    )
    .await
}

async fn export(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let session = state.session(&id).await?;
    let guard = session.read().await;
    let body = encode_project(guard.project());
    Ok(([(header::CONTENT_TYPE, "application/json")], body).into_response())
}

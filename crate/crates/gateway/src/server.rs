//! HTTP surface: query answering with transparent post-editing plus edit
//! administration.

use std::future::Future;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use editgate_core::editors::{DemoIndex, Editor, EditorConfig, EditorKind, Models};
use editgate_core::memory::EditMemory;
use editgate_core::templates::TemplateSet;
use editgate_core::types::{parse_edit_string, EditId};
use editgate_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::{TcpListener, TcpStream};

pub struct AppState {
    pub memory: Arc<EditMemory>,
    pub models: Models,
    pub default_editor: EditorKind,
    pub serac_threshold: f64,
    pub templates: Arc<TemplateSet>,
    pub demos: Arc<DemoIndex>,
    pub memory_path: Option<PathBuf>,
    pub admin_token: Option<String>,
    persist: Mutex<()>,
}

impl AppState {
    pub fn new(memory: Arc<EditMemory>, models: Models, default_editor: EditorKind) -> Self {
        Self {
            memory,
            models,
            default_editor,
            serac_threshold: editgate_core::editors::DEFAULT_SERAC_THRESHOLD,
            templates: Arc::new(TemplateSet::builtin().clone()),
            demos: Arc::new(DemoIndex::default()),
            memory_path: None,
            admin_token: None,
            persist: Mutex::new(()),
        }
    }

    pub fn with_memory_path(mut self, path: Option<PathBuf>) -> Self {
        self.memory_path = path;
        self
    }

    pub fn with_admin_token(mut self, token: Option<String>) -> Self {
        self.admin_token = token;
        self
    }

    pub fn with_demos(mut self, demos: Arc<DemoIndex>) -> Self {
        self.demos = demos;
        self
    }

    fn save(&self) -> Result<(), Error> {
        if let Some(path) = &self.memory_path {
            let _guard = self.persist.lock().unwrap_or_else(|e| e.into_inner());
            self.memory.save(path)?;
        }
        Ok(())
    }

    fn authorize(&self, headers: &HeaderMap) -> Result<(), ApiError> {
        let Some(token) = &self.admin_token else {
            return Ok(());
        };
        let given = headers
            .get(axum::http::header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given == Some(token.as_str()) {
            Ok(())
        } else {
            Err(ApiError::new(StatusCode::UNAUTHORIZED, "Unauthorized", "missing or wrong bearer token"))
        }
    }
}

pub struct ApiError {
    status: StatusCode,
    kind: String,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind: kind.to_owned(),
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::MalformedEdit(_) | Error::EmptyField(_) | Error::Config(_) | Error::Parse { .. } => {
                StatusCode::BAD_REQUEST
            }
            Error::EmptyMemory | Error::EmptyDemoLibrary => StatusCode::CONFLICT,
            Error::Timeout
            | Error::RateLimited
            | Error::Upstream { .. }
            | Error::ExhaustedRetries { .. }
            | Error::ProviderUnavailable(_)
            | Error::NliUnavailable(_) => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.kind(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "kind": self.kind, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

#[derive(Deserialize)]
pub struct RespondRequest {
    pub query: String,
    #[serde(default)]
    pub editor: Option<String>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct RespondBody {
    pub response: String,
    pub edited: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub edit_id: Option<EditId>,
    pub trace_id: String,
}

async fn respond(
    State(state): State<Arc<AppState>>,
    Json(req): Json<RespondRequest>,
) -> Result<Json<RespondBody>, ApiError> {
    if req.query.trim().is_empty() {
        return Err(Error::EmptyField("query").into());
    }
    let mut kind = match req.editor.as_deref() {
        Some(k) => k.parse()?,
        None => state.default_editor,
    };
    // Nothing to edit with yet: answer like an unmodified model.
    if state.memory.is_empty() {
        kind = EditorKind::Passthrough;
    }
    let config = EditorConfig {
        serac_threshold: state.serac_threshold,
        ..EditorConfig::new(kind)
    };
    let editor = Editor::new(config, state.memory.clone(), state.models.clone())?
        .with_templates(state.templates.clone())
        .with_demos(state.demos.clone());
    let decision = editor.respond(&req.query, None).await?;
    let trace_id = uuid::Uuid::new_v4().to_string();
    tracing::info!(
        trace_id,
        editor = %kind,
        edited = decision.pair.was_edited,
        score = decision.trace.retrieval_score,
        error = decision.trace.error,
        "respond"
    );
    Ok(Json(RespondBody {
        edit_id: decision.pair.was_edited.then_some(decision.pair.matched_edit_id).flatten(),
        response: decision.pair.edited,
        edited: decision.pair.was_edited,
        trace_id,
    }))
}

#[derive(Deserialize)]
pub struct AddEditRequest {
    pub edit: String,
}

async fn add_edit(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Json(req): Json<AddEditRequest>,
) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    state.authorize(&headers)?;
    let edit = parse_edit_string(state.memory.next_edit_id(), &req.edit)?;
    let id = state.memory.add_edit(edit).await?;
    state.save()?;
    Ok((StatusCode::CREATED, Json(json!({ "edit_id": id }))))
}

async fn list_edits(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
) -> Result<Json<serde_json::Value>, ApiError> {
    state.authorize(&headers)?;
    let edits: Vec<_> = state
        .memory
        .edits()
        .into_iter()
        .map(|e| json!({ "edit_id": e.edit_id, "edit": e.raw }))
        .collect();
    Ok(Json(json!({ "edits": edits })))
}

async fn delete_edit(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(id): Path<EditId>,
) -> Result<StatusCode, ApiError> {
    state.authorize(&headers)?;
    match state.memory.remove(id) {
        Some(_) => {
            state.save()?;
            Ok(StatusCode::NO_CONTENT)
        }
        None => Err(ApiError::new(StatusCode::NOT_FOUND, "NotFound", format!("no edit {id}"))),
    }
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "edits": state.memory.len() }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/respond", post(respond))
        .route("/v1/edits", post(add_edit).get(list_edits))
        .route("/v1/edits/{id}", delete(delete_edit))
        .route("/healthz", get(healthz))
        .with_state(state)
}

pub async fn serve(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

/// `host:port` of an http(s) URL.
pub fn authority(url: &str) -> Option<String> {
    let (scheme, rest) = url.split_once("://")?;
    let host = rest.split(['/', '?', '#']).next()?.rsplit('@').next()?;
    if host.is_empty() {
        return None;
    }
    let has_port = host.rsplit_once(':').is_some_and(|(_, p)| p.parse::<u16>().is_ok());
    Some(match (has_port, scheme) {
        (true, _) => host.to_owned(),
        (false, "https") => format!("{host}:443"),
        (false, _) => format!("{host}:80"),
    })
}

/// Fails on the first endpoint that does not accept a TCP connection.
pub async fn check_reachable<'a>(
    urls: impl IntoIterator<Item = (&'a str, &'a str)>,
) -> Result<(), Error> {
    for (name, url) in urls {
        let addr = authority(url).ok_or_else(|| Error::Config(format!("{name}: bad URL `{url}`")))?;
        match tokio::time::timeout(Duration::from_secs(3), TcpStream::connect(&addr)).await {
            Ok(Ok(_)) => {}
            Ok(Err(e)) => return Err(Error::ProviderUnavailable(format!("{name} ({addr}): {e}"))),
            Err(_) => return Err(Error::ProviderUnavailable(format!("{name} ({addr}): timed out"))),
        }
    }
    Ok(())
}

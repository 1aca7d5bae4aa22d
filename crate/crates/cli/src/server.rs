//! HTTP front end for comparison sessions.
//!
//! Routes:
//!
//! ```text
//! POST /sessions                       create; body CreateSession
//! GET  /sessions/{id}/pair?voter_id=v  current pair for one voter
//! POST /sessions/{id}/votes            body VoteRequest
//! GET  /sessions/{id}/result           final ranking, 409 while active
//! GET  /sessions/{id}/log              resolved decisions
//! GET  /images/{gid}/{file}            image bytes from the dataset
//! ```
//!
//! Image ids have the form `<gid>/<file>` so each maps to one URL. Errors are
//! JSON `{"error": kind, "message": text}`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use uranker::annotation::{Choice, Decision, SessionError, SessionSpec, SessionStatus, SessionStore, Vote};
use uranker::dataset::DatasetManifest;

pub struct AppState {
    pub store: SessionStore,
    /// Dataset root for image bytes and group lookups.
    pub data: Option<DatasetManifest>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    /// Take the images of this dataset group.
    #[serde(default)]
    pub group: Option<String>,
    /// Explicit image ids; used when `group` is absent.
    #[serde(default)]
    pub images: Vec<String>,
    pub voters: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tiebreak: Option<String>,
    #[serde(default)]
    pub session_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
    pub images: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairResponse {
    pub session_id: String,
    pub status: SessionStatus,
    pub left: Option<String>,
    pub right: Option<String>,
    pub left_url: Option<String>,
    pub right_url: Option<String>,
    pub pass_no: usize,
    pub cursor: usize,
    pub voters_remaining: usize,
    /// Whether the asking voter has voted on this pair.
    pub my_vote_submitted: bool,
    pub comparisons: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VoteRequest {
    pub voter_id: String,
    pub choice: Choice,
    /// The pair the voter was shown; a mismatch is rejected as stale.
    #[serde(default)]
    pub left: Option<String>,
    #[serde(default)]
    pub right: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VoteResponse {
    pub accepted: bool,
    pub decision: Option<Decision>,
    pub status: SessionStatus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultResponse {
    pub session_id: String,
    pub ranking: Vec<String>,
    pub comparisons: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogResponse {
    pub session_id: String,
    pub status: SessionStatus,
    pub decisions: Vec<Decision>,
}

#[derive(Debug, Deserialize)]
struct VoterQuery {
    #[serde(default)]
    voter_id: Option<String>,
}

struct ApiError(StatusCode, &'static str, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.1, "message": self.2 });
        (self.0, Json(body)).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let (code, kind) = match &e {
            SessionError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            SessionError::DuplicateVote(_) => (StatusCode::CONFLICT, "duplicate_vote"),
            SessionError::StalePair { .. } => (StatusCode::CONFLICT, "stale_pair"),
            SessionError::Complete => (StatusCode::CONFLICT, "complete"),
            SessionError::NotReady => (StatusCode::CONFLICT, "not_ready"),
            SessionError::UnknownVoter(_) => (StatusCode::FORBIDDEN, "unknown_voter"),
            _ => (StatusCode::BAD_REQUEST, "invalid_session"),
        };
        ApiError(code, kind, e.to_string())
    }
}

impl From<uranker::Error> for ApiError {
    fn from(e: uranker::Error) -> Self {
        match e {
            uranker::Error::Session(s) => s.into(),
            uranker::Error::InvalidInput(m) => ApiError(StatusCode::BAD_REQUEST, "invalid_input", m),
            other => ApiError(StatusCode::INTERNAL_SERVER_ERROR, other.kind(), other.to_string()),
        }
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/pair", get(get_pair))
        .route("/sessions/{id}/votes", post(post_vote))
        .route("/sessions/{id}/result", get(get_result))
        .route("/sessions/{id}/log", get(get_log))
        .route("/images/{gid}/{file}", get(get_image))
        .with_state(state)
}

pub fn image_url(id: &str) -> String {
    format!("/images/{id}")
}

fn resolve_images(state: &AppState, req: &CreateSession) -> Result<Vec<String>, ApiError> {
    let bad = |m: String| ApiError(StatusCode::BAD_REQUEST, "invalid_input", m);
    let images = match (&req.group, &state.data) {
        (Some(gid), Some(data)) => {
            let group = data.group(gid).ok_or_else(|| bad(format!("no group {gid:?}")))?;
            group.images.iter().map(|f| format!("{gid}/{f}")).collect()
        }
        (Some(_), None) => return Err(bad("the server has no dataset; list images explicitly".into())),
        (None, _) => req.images.clone(),
    };
    if let Some(data) = &state.data {
        for id in &images {
            if image_file(&data.root, id).is_none_or(|p| !p.is_file()) {
                return Err(bad(format!("image {id:?} is not in the dataset")));
            }
        }
    }
    Ok(images)
}

/// Maps `<gid>/<file>` to its path, refusing anything that could leave the
/// group's image directory.
fn image_file(root: &Path, id: &str) -> Option<PathBuf> {
    let (gid, file) = id.split_once('/')?;
    let safe = |s: &str| !s.is_empty() && s != "." && s != ".." && !s.contains(['/', '\\']);
    (safe(gid) && safe(file)).then(|| root.join("groups").join(gid).join("images").join(file))
}

async fn create_session(State(state): State<Arc<AppState>>, Json(req): Json<CreateSession>) -> Result<(StatusCode, Json<Created>), ApiError> {
    let images = resolve_images(&state, &req)?;
    let spec = SessionSpec {
        images: images.clone(),
        voters: req.voters,
        tiebreak: req.tiebreak,
        seed: req.seed,
    };
    let id = match req.session_id {
        Some(id) => state.store.create_with_id(id, spec)?,
        None => state.store.create(spec)?,
    };
    log::info!("session {id} created with {} images", images.len());
    Ok((StatusCode::CREATED, Json(Created { session_id: id, images })))
}

async fn get_pair(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<VoterQuery>,
) -> ApiResult<PairResponse> {
    let resp = state.store.with_session(&id, |s| {
        let view = s.view();
        let mine = q.voter_id.as_deref().is_some_and(|v| s.has_voted(v));
        PairResponse {
            session_id: id.clone(),
            status: s.status(),
            left_url: view.as_ref().map(|v| image_url(&v.left)),
            right_url: view.as_ref().map(|v| image_url(&v.right)),
            pass_no: s.pass_no(),
            cursor: s.cursor(),
            voters_remaining: view.as_ref().map_or(0, |v| v.voters_remaining),
            left: view.as_ref().map(|v| v.left.clone()),
            right: view.map(|v| v.right),
            my_vote_submitted: mine,
            comparisons: s.comparisons(),
        }
    })?;
    Ok(Json(resp))
}

async fn post_vote(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<VoteRequest>,
) -> ApiResult<VoteResponse> {
    let mut vote = Vote::new(req.voter_id, req.choice);
    vote.timestamp_ms = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64);
    match (req.left, req.right) {
        (Some(l), Some(r)) => vote = vote.on_pair(l, r),
        (None, None) => {}
        _ => {
            return Err(ApiError(
                StatusCode::BAD_REQUEST,
                "invalid_input",
                "give both left and right, or neither".into(),
            ))
        }
    }
    let decision = state.store.submit_vote(&id, vote)?;
    let status = state.store.with_session(&id, |s| s.status())?;
    Ok(Json(VoteResponse {
        accepted: true,
        decision,
        status,
    }))
}

async fn get_result(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<ResultResponse> {
    let (ranking, comparisons) = state.store.with_session(&id, |s| (s.result(), s.comparisons()))?;
    Ok(Json(ResultResponse {
        session_id: id,
        ranking: ranking?,
        comparisons,
    }))
}

async fn get_log(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<LogResponse> {
    let resp = state.store.with_session(&id, |s| LogResponse {
        session_id: id.clone(),
        status: s.status(),
        decisions: s.audit().to_vec(),
    })?;
    Ok(Json(resp))
}

async fn get_image(State(state): State<Arc<AppState>>, UrlPath((gid, file)): UrlPath<(String, String)>) -> Response {
    let not_found = || ApiError(StatusCode::NOT_FOUND, "not_found", format!("no image {gid}/{file}")).into_response();
    let Some(data) = &state.data else {
        return not_found();
    };
    let Some(path) = image_file(&data.root, &format!("{gid}/{file}")) else {
        return not_found();
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => {
            let mime = if file.ends_with(".png") { "image/png" } else { "application/octet-stream" };
            ([(header::CONTENT_TYPE, mime)], bytes).into_response()
        }
        Err(_) => not_found(),
    }
}

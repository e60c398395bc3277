//! JSON-over-HTTP front of a [`SessionManager`].

use std::net::{Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::engine::ModelTag;
use crate::error::ChatError;
use crate::session::{SessionEval, SessionManager, SessionTurn, TurnEval};
use crate::summary::{aggregate_eval, Summary};

pub const DATA_DIR_VAR: &str = "MMCHAT_DATA_DIR";
pub const PORT_VAR: &str = "MMCHAT_PORT";

/// Service settings read from the environment.
#[derive(Clone, Debug, PartialEq)]
pub struct ServiceEnv {
    pub data_dir: PathBuf,
    pub port: u16,
}

impl ServiceEnv {
    pub const DEFAULT_PORT: u16 = 8080;

    pub fn from_env() -> Result<Self, String> {
        Self::from_vars(std::env::var(DATA_DIR_VAR).ok(), std::env::var(PORT_VAR).ok())
    }

    pub fn from_vars(data_dir: Option<String>, port: Option<String>) -> Result<Self, String> {
        let port = match port {
            Some(p) => p
                .parse()
                .map_err(|_| format!("{PORT_VAR}: `{p}` is not a port number"))?,
            None => Self::DEFAULT_PORT,
        };
        Ok(ServiceEnv {
            data_dir: PathBuf::from(data_dir.unwrap_or_else(|| "data".into())),
            port,
        })
    }

    /// Where session files live under the data directory.
    pub fn sessions_dir(&self) -> PathBuf {
        self.data_dir.join("sessions")
    }

    pub fn addr(&self) -> SocketAddr {
        SocketAddr::from((Ipv4Addr::UNSPECIFIED, self.port))
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for ChatError {
    fn into_response(self) -> Response {
        let status = match &self {
            ChatError::UnknownTag(_)
            | ChatError::VariantNotLoaded(_)
            | ChatError::EmptyMessage
            | ChatError::ScoreOutOfRange { .. }
            | ChatError::UnknownTurn(_)
            | ChatError::NotBotTurn(_)
            | ChatError::GroundednessBeforeImage(_) => StatusCode::BAD_REQUEST,
            ChatError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ChatError::Busy(_) | ChatError::Closed(_) => StatusCode::CONFLICT,
            ChatError::NoResults(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{self}");
        }
        (
            status,
            Json(ErrorBody {
                error: self.to_string(),
            }),
        )
            .into_response()
    }
}

type Shared = Arc<SessionManager>;

/// Run blocking session work off the async executor.
async fn blocking<T, F>(manager: &Shared, f: F) -> Result<T, ChatError>
where
    F: FnOnce(&SessionManager) -> Result<T, ChatError> + Send + 'static,
    T: Send + 'static,
{
    let m = Arc::clone(manager);
    tokio::task::spawn_blocking(move || f(&m))
        .await
        .expect("session task panicked")
}

#[derive(Deserialize)]
struct CreateRequest {
    model_tag: String,
}

#[derive(Serialize)]
struct CreateResponse {
    session_id: String,
}

async fn create_session(
    State(m): State<Shared>,
    Json(req): Json<CreateRequest>,
) -> Result<Json<CreateResponse>, ChatError> {
    let tag: ModelTag = req.model_tag.parse()?;
    let session_id = blocking(&m, move |m| m.create(tag)).await?;
    Ok(Json(CreateResponse { session_id }))
}

/// Transcript without the model tag, which raters must not see.
#[derive(Serialize)]
struct TranscriptResponse {
    session_id: String,
    turns: Vec<SessionTurn>,
    closed: bool,
}

async fn get_session(
    State(m): State<Shared>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<TranscriptResponse>, ChatError> {
    let rec = blocking(&m, move |m| m.get(&id)).await?;
    Ok(Json(TranscriptResponse {
        closed: rec.is_closed(),
        session_id: rec.session_id,
        turns: rec.turns,
    }))
}

#[derive(Deserialize)]
struct MessageRequest {
    text: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct MessageResponse {
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f32>,
}

async fn message(
    State(m): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<MessageRequest>,
) -> Result<Json<MessageResponse>, ChatError> {
    let reply = blocking(&m, move |m| m.handle_message(&id, &req.text)).await?;
    let (image_id, score) = reply.image.map_or((None, None), |(id, s)| (Some(id), Some(s)));
    Ok(Json(MessageResponse {
        response: reply.response,
        image_id,
        score,
    }))
}

async fn turn_eval(
    State(m): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Json(eval): Json<TurnEval>,
) -> Result<StatusCode, ChatError> {
    blocking(&m, move |m| m.record_turn_eval(&id, eval)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn close(
    State(m): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Json(eval): Json<SessionEval>,
) -> Result<StatusCode, ChatError> {
    blocking(&m, move |m| m.close(&id, eval)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn image(State(m): State<Shared>, UrlPath(id): UrlPath<String>) -> Response {
    match m.engine().manifest().raster(&id) {
        Ok((bytes, mime)) => ([(header::CONTENT_TYPE, mime)], bytes).into_response(),
        Err(e) => (StatusCode::NOT_FOUND, Json(ErrorBody { error: e.to_string() })).into_response(),
    }
}

async fn summary(State(m): State<Shared>) -> Result<Json<Summary>, ChatError> {
    let s = blocking(&m, |m| aggregate_eval(m.dir())).await?;
    Ok(Json(s))
}

/// API routes, plus static files from `static_dir` for every other path.
pub fn router(manager: Shared, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/message", post(message))
        .route("/api/sessions/{id}/turn-eval", post(turn_eval))
        .route("/api/sessions/{id}/close", post(close))
        .route("/api/images/{id}", get(image))
        .route("/api/results/summary", get(summary))
        .with_state(manager);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serve until the process is stopped.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app).await
}

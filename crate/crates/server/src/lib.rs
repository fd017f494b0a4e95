//! HTTP front end for live elicitation sessions.
//!
//! | method | path                    | body / result                     |
//! |--------|-------------------------|-----------------------------------|
//! | POST   | `/sessions`             | create request -> manifest        |
//! | GET    | `/sessions/{id}/next`   | pending question and diagnostics  |
//! | POST   | `/sessions/{id}/answer` | `{"answer": i}` -> belief         |
//! | GET    | `/sessions/{id}/belief` | current belief snapshot           |
//! | GET    | `/sessions/{id}/log`    | event log                         |
//! | POST   | `/sessions/{id}/close`  | closes the session                |
//!
//! Anything else is served from the static UI directory when one is set.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use elicit_core::data::{load_dataset, split_entities, SplitSpec};
use elicit_core::gateway::{RemoteModel, RemoteModelConfig};
use elicit_core::reference;
use elicit_core::session::{CreateSessionRequest, Engine, SessionManager};
use elicit_core::table::DEFAULT_SMOOTHING;
use elicit_core::{Error, PredictiveModel};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

/// Dataset value that selects the built-in six-question demo model.
pub const DEMO_DATASET: &str = "demo:r1";

#[derive(Clone, Debug, PartialEq)]
pub struct ServerConfig {
    pub bind: SocketAddr,
    /// Dataset path, or [`DEMO_DATASET`].
    pub dataset: String,
    /// `tabular` or `remote`.
    pub model: String,
    pub remote_url: Option<String>,
    pub log_dir: Option<PathBuf>,
    pub static_dir: Option<PathBuf>,
    /// Seed of the train split the tabular model is fitted on.
    pub split_seed: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            dataset: DEMO_DATASET.into(),
            model: "tabular".into(),
            remote_url: None,
            log_dir: None,
            static_dir: None,
            split_seed: 0,
        }
    }
}

impl ServerConfig {
    /// Reads `ELICIT_BIND`, `ELICIT_DATASET`, `ELICIT_MODEL`,
    /// `ELICIT_REMOTE_URL`, `ELICIT_LOG_DIR` and `ELICIT_STATIC_DIR`.
    pub fn from_env() -> Result<Self, Error> {
        let mut c = Self::default();
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        if let Some(b) = var("ELICIT_BIND") {
            c.bind = b
                .parse()
                .map_err(|e| Error::InvalidConfig(format!("ELICIT_BIND `{b}`: {e}")))?;
        }
        if let Some(d) = var("ELICIT_DATASET") {
            c.dataset = d;
        }
        if let Some(m) = var("ELICIT_MODEL") {
            c.model = m;
        }
        c.remote_url = var("ELICIT_REMOTE_URL");
        c.log_dir = var("ELICIT_LOG_DIR").map(PathBuf::from);
        c.static_dir = var("ELICIT_STATIC_DIR").map(PathBuf::from);
        Ok(c)
    }
}

/// Loads the dataset and model named by `config`.
pub fn build_engine(config: &ServerConfig) -> Result<Engine, Error> {
    let (model, dataset_ref): (Arc<dyn PredictiveModel>, String) = if config.dataset == DEMO_DATASET {
        if config.model != "tabular" {
            return Err(Error::InvalidConfig("the demo dataset only has a tabular model".into()));
        }
        (Arc::new(reference::r1()), DEMO_DATASET.into())
    } else {
        let ds = load_dataset(&config.dataset)?;
        let model: Arc<dyn PredictiveModel> = match config.model.as_str() {
            "tabular" => {
                let split = split_entities(
                    &ds,
                    &SplitSpec {
                        seed: config.split_seed,
                        ..SplitSpec::default()
                    },
                )?;
                Arc::new(ds.fit(&split.train, DEFAULT_SMOOTHING)?)
            }
            "remote" => {
                let url = config
                    .remote_url
                    .clone()
                    .ok_or_else(|| Error::InvalidConfig("remote model needs ELICIT_REMOTE_URL".into()))?;
                Arc::new(RemoteModel::new(RemoteModelConfig::new(url), ds.catalog_arc().clone())?)
            }
            other => return Err(Error::InvalidConfig(format!("unknown model `{other}`"))),
        };
        (model, config.dataset.clone())
    };
    Ok(Engine {
        model,
        dataset_ref,
        model_ref: config.model.clone(),
        log_dir: config.log_dir.clone(),
    })
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

fn status_of(e: &Error) -> StatusCode {
    match e {
        Error::SessionNotFound(_) => StatusCode::NOT_FOUND,
        Error::NoPendingQuestion(_) | Error::SessionClosed(_) | Error::Exhausted(_) | Error::AlreadyAsked(_) => {
            StatusCode::CONFLICT
        }
        Error::UnknownQuestion(_)
        | Error::AnswerOutOfRange { .. }
        | Error::InvalidConfig(_)
        | Error::EmptyPool
        | Error::SupportTooLarge { .. } => StatusCode::BAD_REQUEST,
        Error::Unavailable { .. } => StatusCode::SERVICE_UNAVAILABLE,
        Error::Protocol(_) => StatusCode::BAD_GATEWAY,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = status_of(&self.0);
        if status.is_server_error() {
            tracing::error!(error = %self.0, "request failed");
        }
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, Error> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(Error::InvalidConfig(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

async fn create(State(m): State<Arc<SessionManager>>, Json(req): Json<CreateSessionRequest>) -> ApiResult {
    let manifest = blocking(move || m.create_session(&req)).await?;
    Ok((StatusCode::CREATED, Json(manifest)).into_response())
}

async fn next(State(m): State<Arc<SessionManager>>, Path(id): Path<u64>) -> ApiResult {
    Ok(Json(blocking(move || m.next_question(id)).await?).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnswerBody {
    answer: usize,
}

async fn answer(State(m): State<Arc<SessionManager>>, Path(id): Path<u64>, Json(body): Json<AnswerBody>) -> ApiResult {
    Ok(Json(blocking(move || m.submit_answer(id, body.answer)).await?).into_response())
}

async fn belief(State(m): State<Arc<SessionManager>>, Path(id): Path<u64>) -> ApiResult {
    Ok(Json(m.belief(id)?).into_response())
}

async fn log(State(m): State<Arc<SessionManager>>, Path(id): Path<u64>) -> ApiResult {
    Ok(Json(m.log(id)?).into_response())
}

async fn close(State(m): State<Arc<SessionManager>>, Path(id): Path<u64>) -> ApiResult {
    m.close(id)?;
    Ok(Json(json!({ "session": id, "status": "closed" })).into_response())
}

pub fn router(manager: Arc<SessionManager>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}/next", get(next))
        .route("/sessions/{id}/answer", post(answer))
        .route("/sessions/{id}/belief", get(belief))
        .route("/sessions/{id}/log", get(log))
        .route("/sessions/{id}/close", post(close))
        .with_state(manager);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until Ctrl-C.
pub async fn serve(config: ServerConfig) -> Result<(), Error> {
    let engine = build_engine(&config)?;
    tracing::info!(dataset = %engine.dataset_ref, model = %engine.model_ref, "engine ready");
    let manager = Arc::new(SessionManager::new(engine)?);
    let app = router(manager, config.static_dir.clone());
    let listener = tokio::net::TcpListener::bind(config.bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

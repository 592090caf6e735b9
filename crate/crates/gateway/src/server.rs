use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};

use crate::session::{GatewayError, SessionStore};
use crate::wire::{ErrorBody, FailuresView, FinishRequest, Health, StartRequest, SubmitRequest, API_VERSION};

impl IntoResponse for GatewayError {
    fn into_response(self) -> Response {
        let status = match &self {
            Self::UnknownSession(_) => StatusCode::NOT_FOUND,
            Self::EpisodeOver | Self::StaleAction(_) => StatusCode::CONFLICT,
            Self::BadRequest(_) => StatusCode::BAD_REQUEST,
            Self::NoAgent => StatusCode::SERVICE_UNAVAILABLE,
            Self::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = ErrorBody {
            error: self.code().to_owned(),
            message: self.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

type Shared = State<Arc<SessionStore>>;
type Reply<T> = Result<Json<T>, GatewayError>;

async fn health(State(st): Shared) -> Json<Health> {
    Json(Health {
        version: API_VERSION.to_owned(),
        sessions: st.len(),
        agent: st.models.agent.is_some(),
        referee: st.models.referee.is_some(),
    })
}

async fn start(State(st): Shared, Json(req): Json<StartRequest>) -> Reply<crate::wire::SessionView> {
    st.start(&req).map(Json)
}

async fn show(State(st): Shared, Path(id): Path<String>) -> Reply<crate::wire::SessionView> {
    let h = st.get(&id)?;
    let s = h.lock().await;
    Ok(Json(s.view()))
}

async fn suggestion(State(st): Shared, Path(id): Path<String>) -> Reply<crate::wire::SuggestionView> {
    let h = st.get(&id)?;
    let mut s = h.lock().await;
    s.suggestion(&st.models).map(Json)
}

async fn submit(State(st): Shared, Path(id): Path<String>, Json(req): Json<SubmitRequest>) -> Reply<crate::wire::SubmitResponse> {
    let h = st.get(&id)?;
    let mut s = h.lock().await;
    s.submit(&req, &st.models).map(Json)
}

async fn finish(State(st): Shared, Path(id): Path<String>, body: Option<Json<FinishRequest>>) -> Reply<crate::wire::FinishResponse> {
    let h = st.get(&id)?;
    let mut s = h.lock().await;
    let label = body.and_then(|Json(b)| b.label);
    st.finish(&mut s, label).map(Json)
}

async fn failures(State(st): Shared) -> Reply<FailuresView> {
    Ok(Json(FailuresView {
        failures: st.data.load_failures()?,
    }))
}

pub fn router(store: Arc<SessionStore>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/sessions", post(start))
        .route("/v1/sessions/{id}", get(show))
        .route("/v1/sessions/{id}/suggestion", get(suggestion))
        .route("/v1/sessions/{id}/actions", post(submit))
        .route("/v1/sessions/{id}/finish", post(finish))
        .route("/v1/failures", get(failures))
        .with_state(store)
}

/// Periodically expires idle sessions.
pub fn spawn_expiry(store: Arc<SessionStore>, every: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(every);
        loop {
            tick.tick().await;
            for p in store.expire_idle(Instant::now()) {
                log::info!("saved partial trace {}", p.display());
            }
        }
    })
}

pub async fn serve(store: Arc<SessionStore>, addr: SocketAddr) -> std::io::Result<()> {
    let every = (store.idle_timeout / 4).clamp(Duration::from_millis(100), Duration::from_secs(30));
    let expiry = spawn_expiry(store.clone(), every);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}/v1", listener.local_addr()?);
    let r = axum::serve(listener, router(store)).await;
    expiry.abort();
    r
}

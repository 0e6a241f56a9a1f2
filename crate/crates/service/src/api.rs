//! HTTP routes.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use axum::body::Body;
use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Path, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, RwLock};

use xres_core::dataset::TierName;
use xres_core::protocol::{CurrentItem, Phase, ProtocolError, Session, SessionEvent, StepOutcome, Submission};

use crate::device::DeviceProfile;
use crate::study::{Journal, Study};
use crate::ServiceError;

struct Entry {
    token: String,
    session: Session,
}

pub struct AppState {
    study: Study,
    journal: Journal,
    sessions: RwLock<HashMap<String, Arc<Mutex<Entry>>>>,
    /// token -> session id of its unfinished session.
    active: Mutex<HashMap<String, String>>,
}

impl AppState {
    pub fn new(study: Study) -> Result<Arc<Self>, ServiceError> {
        let journal = Journal::open(&study.dir)?;
        Ok(Arc::new(AppState {
            study,
            journal,
            sessions: RwLock::new(HashMap::new()),
            active: Mutex::new(HashMap::new()),
        }))
    }

    async fn session(&self, id: &str) -> Result<Arc<Mutex<Entry>>, ApiError> {
        self.sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}")))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/current", get(current))
        .route("/sessions/{id}/ratings", post(rate))
        .route("/sessions/{id}/progress", get(progress))
        .route("/images/{image_id}/{tier}", get(image))
        .layer(middleware::from_fn(log_request))
        .with_state(state)
}

async fn log_request(req: Request, next: Next) -> Response {
    let (method, path) = (req.method().clone(), req.uri().path().to_string());
    let start = Instant::now();
    let resp = next.run(req).await;
    tracing::info!(
        method = %method,
        path = %path,
        status = resp.status().as_u16(),
        micros = start.elapsed().as_micros() as u64,
        "request"
    );
    resp
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

impl From<ProtocolError> for ApiError {
    fn from(e: ProtocolError) -> Self {
        let status = match e {
            ProtocolError::InvalidValue(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ProtocolError::OutOfOrder { .. } | ProtocolError::WrongPhase(..) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

/// JSON body whose schema violations are 422 and syntax errors 400, both
/// with a JSON error body.
pub struct Body422<T>(pub T);

impl<S: Send + Sync, T: serde::de::DeserializeOwned> FromRequest<S> for Body422<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Body422(v)),
            Err(JsonRejection::JsonDataError(e)) => Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.body_text())),
            Err(e) => Err(ApiError::new(e.status(), e.body_text())),
        }
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

#[derive(Serialize)]
struct LogRecord<'a> {
    session_id: Option<&'a str>,
    participant_id: &'a str,
    logged_at: u64,
    event: &'a SessionEvent,
}

fn journal_events(state: &AppState, session_id: Option<&str>, participant_id: &str, events: &[SessionEvent]) -> Result<(), ApiError> {
    let at = now_ms();
    let records: Vec<LogRecord> = events
        .iter()
        .map(|event| LogRecord {
            session_id,
            participant_id,
            logged_at: at,
            event,
        })
        .collect();
    Ok(state.journal.sessions(&records)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    pub token: String,
    pub device: DeviceProfile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRef {
    pub url: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurrentView {
    pub session_id: String,
    pub item: CurrentItem,
    /// Where to fetch the current image; shown 1:1 at this geometry.
    pub image: Option<ImageRef>,
}

fn view(state: &AppState, session_id: &str, s: &Session) -> CurrentView {
    let item = s.current();
    let image = item.image().and_then(|(id, tier)| {
        state.study.image_path(id, tier).map(|(_, e)| ImageRef {
            url: format!("/images/{id}/{tier}?session={session_id}"),
            width: e.width,
            height: e.height,
        })
    });
    CurrentView {
        session_id: session_id.to_string(),
        item,
        image,
    }
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Body422(req): Body422<CreateSession>,
) -> Result<Response, ApiError> {
    let p = state
        .study
        .participants
        .get(&req.token)
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unknown participant token"))?;
    let mut active = state.active.lock().await;
    if active.contains_key(&req.token) {
        return Err(ApiError::new(StatusCode::CONFLICT, "this token already has an active session"));
    }
    let mut session = Session::new(p.id.clone(), state.study.training.clone(), state.study.batches_for(p)?)?;
    let detail = serde_json::to_string(&req.device).map_err(ServiceError::from)?;
    let created = session.log().to_vec();
    if let Err(reason) = req.device.screen() {
        let mut events = created;
        events.extend(session.fail_device_check(detail)?);
        journal_events(&state, None, &p.id, &events)?;
        let body = serde_json::json!({ "accepted": false, "reason": reason });
        return Ok((StatusCode::FORBIDDEN, Json(body)).into_response());
    }
    let mut events = created;
    events.extend(session.pass_device_check(detail)?);
    let mut raw = [0u8; 16];
    rand::rng().fill_bytes(&mut raw);
    let id = hex::encode(raw);
    journal_events(&state, Some(&id), &p.id, &events)?;
    let body = serde_json::json!({
        "accepted": true,
        "session_id": id,
        "participant_id": p.id,
        "current": view(&state, &id, &session),
    });
    if session.phase() != Phase::Done {
        active.insert(req.token.clone(), id.clone());
    }
    state.sessions.write().await.insert(
        id,
        Arc::new(Mutex::new(Entry {
            token: req.token,
            session,
        })),
    );
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn current(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<CurrentView>, ApiError> {
    let entry = state.session(&id).await?;
    let e = entry.lock().await;
    Ok(Json(view(&state, &id, &e.session)))
}

async fn progress(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<xres_core::protocol::Progress>, ApiError> {
    let entry = state.session(&id).await?;
    let e = entry.lock().await;
    Ok(Json(e.session.progress()))
}

#[derive(Debug, Deserialize)]
struct ImageQuery {
    session: String,
}

async fn image(
    State(state): State<Arc<AppState>>,
    Path((image_id, tier)): Path<(String, String)>,
    query: Result<Query<ImageQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(q) = query.map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, "missing `session` query parameter"))?;
    let tier: TierName = tier.parse().map_err(|e: String| ApiError::new(StatusCode::NOT_FOUND, e))?;
    let entry = state.session(&q.session).await?;
    let e = entry.lock().await;
    if !e.session.is_current_image(&image_id, tier) {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("{image_id}@{tier} is not the current item of this session"),
        ));
    }
    let (path, meta) = state
        .study
        .image_path(&image_id, tier)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "image not in the pyramid index"))?;
    let bytes = tokio::fs::read(&path).await.map_err(|err| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, err.to_string()))?;
    let mut resp = Response::new(Body::from(bytes));
    let h = resp.headers_mut();
    h.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    h.insert(header::CACHE_CONTROL, HeaderValue::from_static("no-store"));
    h.insert("x-image-width", HeaderValue::from(meta.width));
    h.insert("x-image-height", HeaderValue::from(meta.height));
    Ok(resp)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateResponse {
    #[serde(flatten)]
    pub outcome: StepOutcome,
    pub phase: Phase,
    pub current: CurrentView,
}

async fn rate(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Body422(sub): Body422<Submission>,
) -> Result<Json<RateResponse>, ApiError> {
    let entry = state.session(&id).await?;
    let mut e = entry.lock().await;
    let step = e.session.submit(sub)?;
    let pid = e.session.participant_id().to_string();
    journal_events(&state, Some(&id), &pid, &step.events)?;
    state.journal.ratings(&step.accepted)?;
    if step.phase == Phase::Done {
        state.active.lock().await.remove(&e.token);
    }
    Ok(Json(RateResponse {
        outcome: step.outcome,
        phase: step.phase,
        current: view(&state, &id, &e.session),
    }))
}

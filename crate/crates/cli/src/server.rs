//! HTTP service: one lock per session, events fanned out to server-sent
//! event subscribers through a per-session broadcast channel.

use std::collections::{BTreeMap, VecDeque};
use std::convert::Infallible;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use apex_core::perception::RecordedFrame;
use apex_core::tracker::TrackerError;
use apex_core::{
    BackendSelection, ExperimentPlan, LogDocument, PlannerConfig, RawFrame, Session, SessionConfig,
    SessionError, SessionEvent, SessionInput, SopAtlas, StepTrackingPlan,
};
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::broadcast;

const CHANNEL_CAPACITY: usize = 1024;

struct Slot {
    session: Mutex<Session>,
    tx: broadcast::Sender<SessionEvent>,
}

impl Slot {
    fn lock(&self) -> std::sync::MutexGuard<'_, Session> {
        self.session.lock().unwrap_or_else(|p| p.into_inner())
    }
}

pub struct AppState {
    atlas: SopAtlas,
    planner: PlannerConfig,
    default_backend: BackendSelection,
    sessions: Mutex<BTreeMap<String, Arc<Slot>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(atlas: SopAtlas, planner: PlannerConfig, default_backend: BackendSelection) -> Self {
        AppState {
            atlas,
            planner,
            default_backend,
            sessions: Mutex::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
        }
    }

    fn slot(&self, id: &str) -> Result<Arc<Slot>, ApiError> {
        self.sessions
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::UnknownSession(id.to_string()).into())
    }
}

pub struct ApiError(StatusCode, String);

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match &e {
            SessionError::UnknownSession(_) => StatusCode::NOT_FOUND,
            SessionError::SessionClosed(_)
            | SessionError::OutOfOrderFrame { .. }
            | SessionError::Tracker(TrackerError::NoPendingQuery)
            | SessionError::Tracker(TrackerError::OutOfOrderFrame { .. }) => StatusCode::CONFLICT,
            SessionError::InvalidConfig(_)
            | SessionError::Advance(_)
            | SessionError::Tracker(_) => StatusCode::UNPROCESSABLE_ENTITY,
            SessionError::Backend(_) => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn join_error(e: tokio::task::JoinError) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

/// A frame body: either a tagged recorded frame or a bare raw frame.
#[derive(Deserialize)]
#[serde(untagged)]
pub enum FrameBody {
    Recorded(RecordedFrame),
    Raw(RawFrame),
}

#[derive(Deserialize)]
pub struct AnswerBody {
    pub step: i64,
}

#[derive(Deserialize)]
pub struct QueryBody {
    pub question: String,
}

#[derive(Default, Deserialize)]
pub struct AdvanceBody {
    #[serde(default)]
    pub sop_id: Option<String>,
    #[serde(default)]
    pub experiment_plan: Option<ExperimentPlan>,
    #[serde(default)]
    pub tracking_plan: Option<StepTrackingPlan>,
}

#[derive(Serialize)]
pub struct Created {
    pub session_id: String,
}

#[derive(Deserialize)]
pub struct EventsQuery {
    pub from: Option<u64>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}/frames", post(frame))
        .route("/sessions/{id}/answer", post(answer))
        .route("/sessions/{id}/query", post(query))
        .route("/sessions/{id}/advance", post(advance))
        .route("/sessions/{id}/close", post(close))
        .route("/sessions/{id}/log", get(log))
        .route("/sessions/{id}/events", get(events))
        .with_state(state)
}

async fn create(
    State(state): State<Arc<AppState>>,
    Json(mut config): Json<SessionConfig>,
) -> Result<(StatusCode, Json<Created>), ApiError> {
    if config.backend.is_none() {
        config.backend = Some(state.default_backend.clone());
    }
    let id = format!("s-{}", state.next_id.fetch_add(1, Ordering::Relaxed));
    let st = state.clone();
    let session_id = id.clone();
    let session = tokio::task::spawn_blocking(move || {
        Session::create(&session_id, config, &st.atlas, &st.planner)
    })
    .await
    .map_err(join_error)??;
    let (tx, _) = broadcast::channel(CHANNEL_CAPACITY);
    let slot = Arc::new(Slot {
        session: Mutex::new(session),
        tx,
    });
    state
        .sessions
        .lock()
        .unwrap_or_else(|p| p.into_inner())
        .insert(id.clone(), slot);
    tracing::info!(session = %id, "created");
    Ok((StatusCode::CREATED, Json(Created { session_id: id })))
}

/// Run one input on the session's lock and publish the resulting events
/// before releasing it, so subscribers see them in seq order.
async fn apply(
    state: &AppState,
    id: &str,
    input: SessionInput,
) -> Result<Json<Vec<SessionEvent>>, ApiError> {
    let slot = state.slot(id)?;
    let events = tokio::task::spawn_blocking(move || {
        let mut session = slot.lock();
        let events = session.handle(input)?;
        for e in &events {
            let _ = slot.tx.send(e.clone());
        }
        Ok::<_, SessionError>(events)
    })
    .await
    .map_err(join_error)??;
    Ok(Json(events))
}

async fn frame(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<FrameBody>,
) -> Result<Json<Vec<SessionEvent>>, ApiError> {
    let frame = match body {
        FrameBody::Recorded(f) => f,
        FrameBody::Raw(f) => RecordedFrame::Raw(f),
    };
    apply(&state, &id, SessionInput::Frame { frame }).await
}

async fn answer(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<AnswerBody>,
) -> Result<Json<Vec<SessionEvent>>, ApiError> {
    apply(&state, &id, SessionInput::Answer { step: body.step }).await
}

async fn query(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<QueryBody>,
) -> Result<Json<Vec<SessionEvent>>, ApiError> {
    apply(
        &state,
        &id,
        SessionInput::Question {
            question: body.question,
        },
    )
    .await
}

async fn advance(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Option<Json<AdvanceBody>>,
) -> Result<Json<Vec<SessionEvent>>, ApiError> {
    let Json(body) = body.unwrap_or_default();
    let input = SessionInput::Advance {
        sop_id: body.sop_id,
        experiment_plan: body.experiment_plan,
        tracking_plan: body.tracking_plan,
    };
    apply(&state, &id, input).await
}

async fn close(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<Vec<SessionEvent>>, ApiError> {
    apply(&state, &id, SessionInput::Close).await
}

async fn log(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<LogDocument>, ApiError> {
    let slot = state.slot(&id)?;
    let doc = tokio::task::spawn_blocking(move || slot.lock().export_log())
        .await
        .map_err(join_error)?;
    Ok(Json(doc))
}

struct Feed {
    slot: Arc<Slot>,
    rx: broadcast::Receiver<SessionEvent>,
    pending: VecDeque<SessionEvent>,
    next_seq: u64,
    /// The session was already closed at subscription time.
    closed: bool,
    done: bool,
}

fn sse_event(e: &SessionEvent) -> Event {
    Event::default()
        .id(e.seq.to_string())
        .event(e.kind())
        .data(serde_json::to_string(e).expect("events serialize"))
}

impl Feed {
    async fn next(mut self) -> Option<(Result<Event, Infallible>, Self)> {
        loop {
            if self.done {
                return None;
            }
            if let Some(e) = self.pending.pop_front() {
                if e.seq < self.next_seq {
                    continue;
                }
                self.next_seq = e.seq + 1;
                self.done = matches!(e.body, apex_core::EventBody::SessionClosed);
                return Some((Ok(sse_event(&e)), self));
            }
            if self.closed {
                return None;
            }
            match self.rx.recv().await {
                Ok(e) => self.pending.push_back(e),
                Err(broadcast::error::RecvError::Lagged(_)) => {
                    // Fell behind the channel; catch up from the session log.
                    let slot = self.slot.clone();
                    let from = self.next_seq;
                    let missed = tokio::task::spawn_blocking(move || slot.lock().events_from(from).to_vec())
                        .await
                        .ok()?;
                    self.pending.extend(missed);
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    }
}

/// Server-sent events for one session, starting at `?from=` (or after the
/// `Last-Event-ID` header on reconnect). The stream ends after
/// `SessionClosed`.
async fn events(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<u64>().ok())
        .map(|seq| seq + 1);
    let from = q.from.or(resume).unwrap_or(1);
    let slot = state.slot(&id)?;
    let feed = tokio::task::spawn_blocking(move || {
        // Subscribing under the session lock means no event can slip
        // between the backlog snapshot and the live channel.
        let session = slot.lock();
        Feed {
            rx: slot.tx.subscribe(),
            pending: session.events_from(from).iter().cloned().collect(),
            next_seq: from,
            closed: session.is_closed(),
            done: false,
            slot: slot.clone(),
        }
    })
    .await
    .map_err(join_error)?;
    Ok(Sse::new(stream::unfold(feed, Feed::next)).keep_alive(KeepAlive::default()))
}

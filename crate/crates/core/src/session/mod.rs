//! Session engine: one ordered event stream per session, driving
//! perception, tracking and analysis, and replayable from its own log.

mod engine;
mod events;
mod log;

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{
    answer_query, append_record, detect_errors, make_guidance, Alert, AnalysisHistory,
    GroundedAnswer,
};
use crate::backend::{
    BackendError, FallbackReasoner, PerceptionBackend, PredictionBackend, ReasoningBackend,
    RecordedBackend, RemoteBackend, RemoteConfig, ScriptTable, ScriptedBackend,
};
use crate::perception::{contextualize, ContextFrame, PerceptionError, RecordedFrame};
use crate::planner::{
    make_experiment_plan, make_tracking_plan, ExperimentPlan, PlannerConfig, Protocol,
    StepTrackingPlan,
};
use crate::sop::{SopAtlas, SopDoc};
use crate::text::casefold;
use crate::tracker::{
    ClarificationReason, ConfirmedStep, TrackerError, TrackerOutput, TrackerState,
};

pub use engine::Engine;
pub use events::{AcceptedBy, EventBody, SessionEvent};
pub use log::{EventSink, JsonlSink, LogDocument, MemorySink};

pub const DEFAULT_HISTORY_WINDOW: usize = 3;

fn default_history_window() -> usize {
    DEFAULT_HISTORY_WINDOW
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session `{0}` is closed")]
    SessionClosed(String),
    #[error("frame {frame_index} does not follow frame {last}")]
    OutOfOrderFrame { frame_index: u64, last: u64 },
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error("backend setup failed: {0}")]
    Backend(#[from] BackendError),
    #[error("cannot advance: {0}")]
    Advance(String),
    #[error("replay diverged at seq {seq}: {message}")]
    Divergence { seq: u64, message: String },
    #[error("malformed event log: {0}")]
    MalformedLog(String),
    #[error("event sink failed: {0}")]
    Sink(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendSelection {
    Scripted {
        #[serde(default)]
        script: ScriptTable,
    },
    Remote(RemoteConfig),
}

impl Default for BackendSelection {
    fn default() -> Self {
        BackendSelection::Scripted {
            script: ScriptTable::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    /// Event timestamps come from the frames.
    #[default]
    Replay,
    /// Event timestamps are wall-clock milliseconds since session start.
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub protocol: Protocol,
    pub active_sop: String,
    pub experiment_plan: ExperimentPlan,
    pub tracking_plan: StepTrackingPlan,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendSelection>,
    #[serde(default)]
    pub clock: ClockMode,
    /// Number of recent log records passed to the prediction backend.
    #[serde(default = "default_history_window")]
    pub history_window: usize,
}

fn check_plans<'a>(
    atlas: &'a SopAtlas,
    sop_id: &str,
    experiment: &ExperimentPlan,
    tracking: &StepTrackingPlan,
) -> Result<&'a SopDoc, SessionError> {
    let invalid = |m: String| SessionError::InvalidConfig(m);
    let doc = atlas.lookup(sop_id).map_err(|e| invalid(e.to_string()))?;
    if experiment.sop_id != sop_id || tracking.sop_id != sop_id {
        return Err(invalid(format!("plans must target `{sop_id}`")));
    }
    if experiment.steps != doc.steps {
        return Err(invalid(format!(
            "experiment plan steps differ from SOP `{sop_id}`"
        )));
    }
    if let Some(missing) = doc
        .equipment
        .iter()
        .find(|e| !experiment.inventory.iter().any(|i| casefold(i) == casefold(e)))
    {
        return Err(invalid(format!("inventory lacks `{missing}`")));
    }
    tracking.check().map_err(invalid)?;
    Ok(doc)
}

impl SessionConfig {
    /// Check the config against `atlas` and return the active SOP.
    pub fn validate<'a>(&self, atlas: &'a SopAtlas) -> Result<&'a SopDoc, SessionError> {
        if self.protocol.sop_ids.is_empty() {
            return Err(SessionError::InvalidConfig("protocol is empty".into()));
        }
        if let Some(id) = self.protocol.sop_ids.iter().find(|id| !atlas.contains(id)) {
            return Err(SessionError::InvalidConfig(format!("unknown SOP `{id}` in protocol")));
        }
        if !self.protocol.sop_ids.contains(&self.active_sop) {
            return Err(SessionError::InvalidConfig(format!(
                "active SOP `{}` is not in the protocol",
                self.active_sop
            )));
        }
        check_plans(atlas, &self.active_sop, &self.experiment_plan, &self.tracking_plan)
    }
}

/// One operator- or device-originated input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "input", rename_all = "snake_case")]
pub enum SessionInput {
    Frame { frame: RecordedFrame },
    Answer { step: i64 },
    Question { question: String },
    Advance {
        #[serde(default)]
        sop_id: Option<String>,
        #[serde(default)]
        experiment_plan: Option<ExperimentPlan>,
        #[serde(default)]
        tracking_plan: Option<StepTrackingPlan>,
    },
    Close,
}

/// Everything recomputable from the event stream.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedState {
    pub active_sop: String,
    pub experiment_plan: ExperimentPlan,
    pub tracker: TrackerState,
    pub history: AnalysisHistory,
    pub last_frame: Option<ContextFrame>,
    pub last_frame_index: Option<u64>,
    pub closed: bool,
}

struct Backends {
    perception: Box<dyn PerceptionBackend>,
    prediction: Box<dyn PredictionBackend>,
    reasoning: Box<dyn ReasoningBackend>,
}

impl Backends {
    fn build(selection: &BackendSelection, planner: &PlannerConfig) -> Result<Self, SessionError> {
        Ok(match selection {
            BackendSelection::Scripted { script } => {
                let scripted = Arc::new(ScriptedBackend::new(script.clone()));
                Backends {
                    perception: Box::new(scripted.clone()),
                    prediction: Box::new(scripted),
                    reasoning: Box::new(FallbackReasoner::new(planner.clone())),
                }
            }
            BackendSelection::Remote(cfg) => {
                let remote = Arc::new(RemoteBackend::from_config(cfg)?);
                Backends {
                    perception: Box::new(remote.clone()),
                    prediction: Box::new(remote.clone()),
                    reasoning: Box::new(remote),
                }
            }
        })
    }

    fn recorded(events: &[SessionEvent]) -> Self {
        let recorded = Arc::new(RecordedBackend::from_events(events));
        Backends {
            perception: Box::new(recorded.clone()),
            prediction: Box::new(recorded.clone()),
            reasoning: Box::new(recorded),
        }
    }
}

pub struct Session {
    id: String,
    config: SessionConfig,
    atlas: SopAtlas,
    planner: PlannerConfig,
    doc: SopDoc,
    state: DerivedState,
    events: Vec<SessionEvent>,
    backends: Backends,
    sink: Option<Box<dyn EventSink>>,
    started: Instant,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("id", &self.id)
            .field("active_sop", &self.state.active_sop)
            .field("events", &self.events.len())
            .finish_non_exhaustive()
    }
}

/// Staged events for one input, appended only if the whole input succeeds.
struct Batch {
    base_seq: u64,
    timestamp: u64,
    events: Vec<SessionEvent>,
}

impl Batch {
    fn push(&mut self, body: EventBody) {
        let seq = self.base_seq + self.events.len() as u64;
        self.events.push(SessionEvent {
            seq,
            timestamp: self.timestamp,
            body,
        });
    }
}

impl Session {
    /// Create a session. A missing backend selection means an empty script.
    pub fn create(
        id: &str,
        mut config: SessionConfig,
        atlas: &SopAtlas,
        planner: &PlannerConfig,
    ) -> Result<Self, SessionError> {
        let selection = config.backend.get_or_insert_with(BackendSelection::default).clone();
        let backends = Backends::build(&selection, planner)?;
        Self::with_backends(id, config, atlas, planner, backends)
    }

    fn with_backends(
        id: &str,
        config: SessionConfig,
        atlas: &SopAtlas,
        planner: &PlannerConfig,
        backends: Backends,
    ) -> Result<Self, SessionError> {
        let doc = config.validate(atlas)?.clone();
        let tracker = TrackerState::new(config.tracking_plan.clone(), doc.step_count());
        let state = DerivedState {
            active_sop: config.active_sop.clone(),
            experiment_plan: config.experiment_plan.clone(),
            tracker,
            history: AnalysisHistory::new(),
            last_frame: None,
            last_frame_index: None,
            closed: false,
        };
        let header = SessionEvent {
            seq: 1,
            timestamp: 0,
            body: EventBody::SessionCreated {
                session_id: id.to_string(),
                config: config.clone(),
            },
        };
        tracing::info!(session = id, sop = %config.active_sop, "session created");
        Ok(Session {
            id: id.to_string(),
            config,
            atlas: atlas.clone(),
            planner: planner.clone(),
            doc,
            state,
            events: vec![header],
            backends,
            sink: None,
            started: Instant::now(),
        })
    }

    /// Rebuild a session by re-driving a recorded event stream through a
    /// fresh session whose backends play back the recorded model outputs.
    /// Every regenerated event must equal the recorded one.
    pub fn restore(
        events: &[SessionEvent],
        atlas: &SopAtlas,
        planner: &PlannerConfig,
    ) -> Result<Self, SessionError> {
        let Some(SessionEvent {
            body: EventBody::SessionCreated { session_id, config },
            ..
        }) = events.first()
        else {
            return Err(SessionError::MalformedLog(
                "first event must be SessionCreated".into(),
            ));
        };
        let mut session = Self::with_backends(
            session_id,
            config.clone(),
            atlas,
            planner,
            Backends::recorded(events),
        )?;
        if session.events[0] != events[0] {
            return Err(SessionError::Divergence {
                seq: 1,
                message: "header differs".into(),
            });
        }
        let mut cursor = 1;
        while cursor < events.len() {
            let event = &events[cursor];
            let input = match &event.body {
                EventBody::FrameIngested { frame, .. } => SessionInput::Frame {
                    frame: RecordedFrame::Context(frame.clone()),
                },
                EventBody::FrameDropped { frame_index, .. } => SessionInput::Frame {
                    frame: RecordedFrame::Raw(crate::perception::RawFrame {
                        frame_index: *frame_index,
                        timestamp: event.timestamp,
                        payload: Default::default(),
                        aux: None,
                    }),
                },
                EventBody::ClarificationAnswered { step } => SessionInput::Answer { step: *step as i64 },
                EventBody::QueryAsked { question } => SessionInput::Question {
                    question: question.clone(),
                },
                EventBody::SopAdvanced {
                    experiment_plan,
                    tracking_plan,
                } => SessionInput::Advance {
                    sop_id: Some(experiment_plan.sop_id.clone()),
                    experiment_plan: Some(experiment_plan.clone()),
                    tracking_plan: Some(tracking_plan.clone()),
                },
                EventBody::SessionClosed => SessionInput::Close,
                other => {
                    return Err(SessionError::Divergence {
                        seq: event.seq,
                        message: format!("{} does not start an input", other.kind()),
                    })
                }
            };
            let produced = session.handle_at(input, Some(event.timestamp))?;
            for (i, got) in produced.iter().enumerate() {
                match events.get(cursor + i) {
                    Some(want) if want == got => {}
                    Some(want) => {
                        return Err(SessionError::Divergence {
                            seq: want.seq,
                            message: format!("recorded {}, regenerated {}", want.kind(), got.kind()),
                        })
                    }
                    None => {
                        return Err(SessionError::Divergence {
                            seq: got.seq,
                            message: format!("regenerated extra {}", got.kind()),
                        })
                    }
                }
            }
            if produced.is_empty() {
                return Err(SessionError::Divergence {
                    seq: event.seq,
                    message: "input produced no events".into(),
                });
            }
            cursor += produced.len();
        }
        Ok(session)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }

    /// Events with `seq >= from`.
    pub fn events_from(&self, from: u64) -> &[SessionEvent] {
        let start = (from.max(1) - 1) as usize;
        self.events.get(start..).unwrap_or(&[])
    }

    pub fn history(&self) -> &AnalysisHistory {
        &self.state.history
    }

    pub fn tracker(&self) -> &TrackerState {
        &self.state.tracker
    }

    pub fn active_doc(&self) -> &SopDoc {
        &self.doc
    }

    pub fn is_closed(&self) -> bool {
        self.state.closed
    }

    pub fn derived_state(&self) -> &DerivedState {
        &self.state
    }

    /// Attach a durable sink. Events already in the log are written first.
    pub fn attach_sink(&mut self, mut sink: Box<dyn EventSink>) -> Result<(), SessionError> {
        sink.append(&self.events)
            .map_err(|e| SessionError::Sink(e.to_string()))?;
        self.sink = Some(sink);
        Ok(())
    }

    pub fn export_log(&self) -> LogDocument {
        LogDocument {
            session_id: self.id.clone(),
            partial: !self.state.closed,
            config: self.config.clone(),
            events: self.events.clone(),
            records: self.state.history.records().to_vec(),
        }
    }

    pub fn handle(&mut self, input: SessionInput) -> Result<Vec<SessionEvent>, SessionError> {
        self.handle_at(input, None)
    }

    /// Handle one input. `at` overrides the event timestamp; otherwise frames
    /// carry their own timestamp in replay mode and other inputs reuse the
    /// latest one.
    pub fn handle_at(
        &mut self,
        input: SessionInput,
        at: Option<u64>,
    ) -> Result<Vec<SessionEvent>, SessionError> {
        if self.state.closed {
            return match input {
                SessionInput::Close => Ok(Vec::new()),
                _ => Err(SessionError::SessionClosed(self.id.clone())),
            };
        }
        let timestamp = at.unwrap_or_else(|| match (self.config.clock, &input) {
            (ClockMode::Live, _) => self.started.elapsed().as_millis() as u64,
            (ClockMode::Replay, SessionInput::Frame { frame }) => frame.timestamp(),
            (ClockMode::Replay, _) => self.events.last().map_or(0, |e| e.timestamp),
        });
        let mut batch = Batch {
            base_seq: self.events.len() as u64 + 1,
            timestamp,
            events: Vec::new(),
        };
        let snapshot = self.sink.is_some().then(|| (self.doc.clone(), self.state.clone()));

        match input {
            SessionInput::Frame { frame } => self.on_frame(frame, &mut batch)?,
            SessionInput::Answer { step } => self.on_answer(step, &mut batch)?,
            SessionInput::Question { question } => self.on_question(question, &mut batch),
            SessionInput::Advance {
                sop_id,
                experiment_plan,
                tracking_plan,
            } => self.on_advance(sop_id, experiment_plan, tracking_plan, &mut batch)?,
            SessionInput::Close => {
                self.state.closed = true;
                batch.push(EventBody::SessionClosed);
            }
        }

        if let Some(sink) = &mut self.sink {
            if let Err(e) = sink.append(&batch.events) {
                if let Some((doc, state)) = snapshot {
                    self.doc = doc;
                    self.state = state;
                }
                return Err(SessionError::Sink(e.to_string()));
            }
        }
        self.events.extend(batch.events.iter().cloned());
        Ok(batch.events)
    }

    fn on_frame(&mut self, frame: RecordedFrame, batch: &mut Batch) -> Result<(), SessionError> {
        let frame_index = frame.frame_index();
        if let Some(last) = self.state.last_frame_index {
            if frame_index <= last {
                return Err(SessionError::OutOfOrderFrame { frame_index, last });
            }
        }
        self.state.last_frame_index = Some(frame_index);

        let plan = &self.state.experiment_plan;
        let ctx = match frame {
            RecordedFrame::Raw(raw) => {
                match contextualize(&raw, plan, self.backends.perception.as_ref()) {
                    Ok(ctx) => ctx,
                    Err(PerceptionError::FrameDropped { frame_index, reason }) => {
                        tracing::warn!(session = %self.id, frame_index, %reason, "frame dropped");
                        batch.push(EventBody::FrameDropped {
                            frame_index,
                            reason,
                        });
                        return Ok(());
                    }
                    Err(other) => unreachable!("contextualize only drops frames: {other}"),
                }
            }
            RecordedFrame::Context(mut ctx) => {
                ctx.normalize(plan);
                ctx
            }
        };

        let window = self
            .state
            .history
            .window_for(&self.state.active_sop, self.config.history_window);
        let report = self.state.tracker.ingest_frame(
            ctx.clone(),
            self.backends.prediction.as_ref(),
            &self.doc.steps,
            window,
        )?;
        self.state.last_frame = Some(ctx.clone());
        batch.push(EventBody::FrameIngested {
            frame: ctx.clone(),
            prediction: report.prediction,
            prediction_error: report.prediction_error,
        });

        match report.output {
            None => {}
            Some(TrackerOutput::Accepted(c)) => self.on_confirmed(c, AcceptedBy::Guard, &ctx, batch),
            Some(TrackerOutput::AutoAccepted(c)) => {
                self.on_confirmed(c, AcceptedBy::AutoAccept, &ctx, batch)
            }
            Some(TrackerOutput::Query(query)) => {
                let deviation = (query.reason == ClarificationReason::IllegalTransition).then(|| {
                    Alert::sequence_deviation(
                        query.confirmed.step().unwrap_or(0),
                        format!(
                            "step {} does not follow step {}",
                            query.confirmed.step().unwrap_or(0),
                            query.last_accepted_step
                        ),
                    )
                });
                batch.push(EventBody::ClarificationRequested { query });
                if let Some(alert) = deviation {
                    batch.push(EventBody::AlertRaised { alert });
                }
            }
        }
        Ok(())
    }

    fn on_confirmed(
        &mut self,
        confirmed: ConfirmedStep,
        accepted_by: AcceptedBy,
        frame: &ContextFrame,
        batch: &mut Batch,
    ) {
        let step = confirmed.step().and_then(|s| self.doc.step(s));
        let alerts = step.map(|s| detect_errors(frame, s)).unwrap_or_default();
        let guidance = make_guidance(&confirmed, frame, &self.doc);
        let record = append_record(
            &mut self.state.history,
            &confirmed,
            frame,
            self.state.tracker.plan.confidence_threshold,
            &self.doc,
            batch.timestamp,
        );
        batch.push(EventBody::StepConfirmed {
            sop_id: self.state.active_sop.clone(),
            confirmed,
            accepted_by,
        });
        for alert in alerts {
            batch.push(EventBody::AlertRaised { alert });
        }
        batch.push(EventBody::GuidanceIssued { guidance });
        if let Some(record) = record {
            batch.push(EventBody::LogAppended { record });
        }
    }

    fn on_answer(&mut self, step: i64, batch: &mut Batch) -> Result<(), SessionError> {
        let confirmed = self.state.tracker.apply_clarification(step)?;
        let frame = self
            .state
            .last_frame
            .clone()
            .unwrap_or_else(|| ContextFrame::empty(confirmed.frame_index, batch.timestamp));
        let record = append_record(
            &mut self.state.history,
            &confirmed,
            &frame,
            self.state.tracker.plan.confidence_threshold,
            &self.doc,
            batch.timestamp,
        );
        batch.push(EventBody::ClarificationAnswered {
            step: step as usize,
        });
        batch.push(EventBody::StepConfirmed {
            sop_id: self.state.active_sop.clone(),
            confirmed,
            accepted_by: AcceptedBy::Human,
        });
        if let Some(record) = record {
            batch.push(EventBody::LogAppended { record });
        }
        Ok(())
    }

    fn on_question(&mut self, question: String, batch: &mut Batch) {
        let reply = answer_query(&question, &self.state.history, self.backends.reasoning.as_ref());
        batch.push(EventBody::QueryAsked { question });
        batch.push(match reply {
            Ok(answer) => EventBody::QueryAnswered { answer },
            Err(error) => EventBody::QueryFailed { error },
        });
    }

    fn on_advance(
        &mut self,
        sop_id: Option<String>,
        experiment_plan: Option<ExperimentPlan>,
        tracking_plan: Option<StepTrackingPlan>,
        batch: &mut Batch,
    ) -> Result<(), SessionError> {
        let ids = &self.config.protocol.sop_ids;
        let next = match sop_id {
            Some(id) if ids.contains(&id) => id,
            Some(id) => return Err(SessionError::Advance(format!("`{id}` is not in the protocol"))),
            None => {
                let pos = ids.iter().position(|id| *id == self.state.active_sop);
                match pos.and_then(|p| ids.get(p + 1)) {
                    Some(id) => id.clone(),
                    None => return Err(SessionError::Advance("protocol complete".into())),
                }
            }
        };
        let doc = self
            .atlas
            .lookup(&next)
            .map_err(|e| SessionError::Advance(e.to_string()))?
            .clone();
        let reasoning = self.backends.reasoning.as_ref();
        let experiment = match experiment_plan {
            Some(p) => p,
            None => make_experiment_plan(&doc, reasoning)
                .map_err(|e| SessionError::Advance(e.to_string()))?,
        };
        let tracking = match tracking_plan {
            Some(p) => p,
            None => make_tracking_plan(&doc, reasoning, &self.planner.defaults)
                .map_err(|e| SessionError::Advance(e.to_string()))?,
        };
        check_plans(&self.atlas, &next, &experiment, &tracking)?;

        self.state.tracker = TrackerState::new(tracking.clone(), doc.step_count());
        self.state.active_sop = next;
        self.state.experiment_plan = experiment.clone();
        self.doc = doc;
        batch.push(EventBody::SopAdvanced {
            experiment_plan: experiment,
            tracking_plan: tracking,
        });
        Ok(())
    }

    /// Answer text of the most recent query, if it succeeded.
    pub fn last_answer(&self) -> Option<&GroundedAnswer> {
        self.events.iter().rev().find_map(|e| match &e.body {
            EventBody::QueryAnswered { answer } => Some(answer),
            _ => None,
        })
    }
}

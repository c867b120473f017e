//! Event-sourced step tracking for guided standard operating procedures.
//!
//! Four cooperating agents share one session event stream:
//!
//! * [`planner`] composes a protocol from the SOP atlas and derives per-SOP
//!   experiment and tracking plans;
//! * [`perception`] turns raw frames into structured [`ContextFrame`]s
//!   grounded in the plan inventory;
//! * [`tracker`] votes recent per-frame predictions into confirmed steps and
//!   decides when to ask the operator;
//! * [`analysis`] keeps the experiment log, checks parameters and answers
//!   questions from the log.
//!
//! [`session`] orders everything into a replayable stream and [`harness`]
//! measures it.

pub mod analysis;
pub mod backend;
pub mod fixtures;
pub mod harness;
pub mod perception;
pub mod planner;
pub mod session;
pub mod sop;
pub mod text;
pub mod tracker;

pub use analysis::{Alert, AlertKind, AnalysisHistory, GroundedAnswer, Guidance, LogRecord};
pub use backend::{BackendError, RemoteConfig, ScriptRow, ScriptTable};
pub use harness::{AnswerPolicy, GroundTruth, Metrics};
pub use perception::{ContextFrame, RawFrame, Reading, RecordedFrame, Recording};
pub use planner::{ExperimentPlan, PlanDefaults, PlannerConfig, Protocol, StepTrackingPlan};
pub use session::{
    BackendSelection, ClockMode, Engine, EventBody, LogDocument, Session, SessionConfig,
    SessionError, SessionEvent, SessionInput,
};
pub use sop::{SopAtlas, SopDoc, SopStep};
pub use tracker::{ConfirmedStep, FramePrediction, HitlQuery, StepSource};

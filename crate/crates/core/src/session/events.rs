use serde::{Deserialize, Serialize};

use crate::analysis::{Alert, GroundedAnswer, Guidance, LogRecord};
use crate::backend::BackendError;
use crate::perception::ContextFrame;
use crate::planner::{ExperimentPlan, StepTrackingPlan};
use crate::tracker::{ConfirmedStep, FramePrediction, HitlQuery};

use super::SessionConfig;

/// How a confirmed step got past the transition guard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptedBy {
    Guard,
    /// Low confidence on a consistent timeline; no question asked.
    AutoAccept,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum EventBody {
    SessionCreated {
        session_id: String,
        config: SessionConfig,
    },
    FrameIngested {
        frame: ContextFrame,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        prediction: Option<FramePrediction>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        prediction_error: Option<BackendError>,
    },
    FrameDropped {
        frame_index: u64,
        reason: BackendError,
    },
    StepConfirmed {
        sop_id: String,
        confirmed: ConfirmedStep,
        accepted_by: AcceptedBy,
    },
    ClarificationRequested {
        query: HitlQuery,
    },
    ClarificationAnswered {
        step: usize,
    },
    AlertRaised {
        alert: Alert,
    },
    GuidanceIssued {
        guidance: Guidance,
    },
    QueryAsked {
        question: String,
    },
    QueryAnswered {
        answer: GroundedAnswer,
    },
    QueryFailed {
        error: BackendError,
    },
    LogAppended {
        record: LogRecord,
    },
    SopAdvanced {
        experiment_plan: ExperimentPlan,
        tracking_plan: StepTrackingPlan,
    },
    SessionClosed,
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::SessionCreated { .. } => "SessionCreated",
            EventBody::FrameIngested { .. } => "FrameIngested",
            EventBody::FrameDropped { .. } => "FrameDropped",
            EventBody::StepConfirmed { .. } => "StepConfirmed",
            EventBody::ClarificationRequested { .. } => "ClarificationRequested",
            EventBody::ClarificationAnswered { .. } => "ClarificationAnswered",
            EventBody::AlertRaised { .. } => "AlertRaised",
            EventBody::GuidanceIssued { .. } => "GuidanceIssued",
            EventBody::QueryAsked { .. } => "QueryAsked",
            EventBody::QueryAnswered { .. } => "QueryAnswered",
            EventBody::QueryFailed { .. } => "QueryFailed",
            EventBody::LogAppended { .. } => "LogAppended",
            EventBody::SopAdvanced { .. } => "SopAdvanced",
            EventBody::SessionClosed => "SessionClosed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    /// Gap-free from 1 within a session.
    pub seq: u64,
    pub timestamp: u64,
    pub body: EventBody,
}

impl SessionEvent {
    pub fn kind(&self) -> &'static str {
        self.body.kind()
    }
}

//! Pluggable model backends.
//!
//! Every agent that would call a hosted model goes through one of three
//! traits. Each has a deterministic local implementation (fallback reasoner,
//! scripted table) used for tests and replay, and an HTTP adapter for a
//! remote model service.

mod fallback;
mod recorded;
mod remote;
mod scripted;

use serde::{Deserialize, Serialize};

use crate::analysis::{AnalysisHistory, GroundedAnswer, LogRecord};
use crate::perception::{ContextFrame, FrameDescription, RawFrame};
use crate::planner::{ExperimentPlan, TrackingProposal};
use crate::sop::{SopAtlas, SopDoc, SopStep};
use crate::tracker::RawPrediction;

pub use fallback::FallbackReasoner;
pub use recorded::RecordedBackend;
pub use remote::{RemoteBackend, RemoteConfig, BACKEND_KEY_ENV, BACKEND_URL_ENV};
pub use scripted::{ScriptRow, ScriptTable, ScriptedBackend};

#[derive(Debug, Clone, PartialEq, thiserror::Error, Serialize, Deserialize)]
pub enum BackendError {
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("backend timed out")]
    Timeout,
    #[error("backend returned an unusable reply: {0}")]
    BadReply(String),
    #[error("no scripted response for frame {0}")]
    NotScripted(u64),
}

/// Planning and question-answering model.
pub trait ReasoningBackend: Send {
    /// Ordered SOP ids forming a protocol for `intent`.
    fn select_sops(&self, intent: &str, atlas: &SopAtlas) -> Result<Vec<String>, BackendError>;

    /// Equipment and materials to add to the SOP's own equipment list.
    fn propose_inventory(&self, doc: &SopDoc) -> Result<Vec<String>, BackendError>;

    /// `None` means "no opinion": the caller falls back to its defaults.
    fn propose_tracking_plan(&self, doc: &SopDoc)
        -> Result<Option<TrackingProposal>, BackendError>;

    fn answer_query(
        &self,
        question: &str,
        history: &AnalysisHistory,
    ) -> Result<GroundedAnswer, BackendError>;
}

/// Context agent model: turns one raw frame into a structured description.
pub trait PerceptionBackend: Send {
    fn describe(
        &self,
        frame: &RawFrame,
        plan: &ExperimentPlan,
    ) -> Result<FrameDescription, BackendError>;
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PredictionRequest<'a> {
    pub frame: &'a ContextFrame,
    pub steps: &'a [SopStep],
    /// Most recent analysis records, oldest first.
    pub history: &'a [LogRecord],
}

/// Step-tracking model: ranks the most probable SOP steps for one frame.
pub trait PredictionBackend: Send {
    fn predict(&self, request: &PredictionRequest<'_>) -> Result<RawPrediction, BackendError>;
}

impl<T: PerceptionBackend + Sync> PerceptionBackend for std::sync::Arc<T> {
    fn describe(
        &self,
        frame: &RawFrame,
        plan: &ExperimentPlan,
    ) -> Result<FrameDescription, BackendError> {
        (**self).describe(frame, plan)
    }
}

impl<T: PredictionBackend + Sync> PredictionBackend for std::sync::Arc<T> {
    fn predict(&self, request: &PredictionRequest<'_>) -> Result<RawPrediction, BackendError> {
        (**self).predict(request)
    }
}

impl<T: ReasoningBackend + Sync> ReasoningBackend for std::sync::Arc<T> {
    fn select_sops(&self, intent: &str, atlas: &SopAtlas) -> Result<Vec<String>, BackendError> {
        (**self).select_sops(intent, atlas)
    }

    fn propose_inventory(&self, doc: &SopDoc) -> Result<Vec<String>, BackendError> {
        (**self).propose_inventory(doc)
    }

    fn propose_tracking_plan(
        &self,
        doc: &SopDoc,
    ) -> Result<Option<TrackingProposal>, BackendError> {
        (**self).propose_tracking_plan(doc)
    }

    fn answer_query(
        &self,
        question: &str,
        history: &AnalysisHistory,
    ) -> Result<GroundedAnswer, BackendError> {
        (**self).answer_query(question, history)
    }
}

/// Run `call`, retrying exactly once on failure.
pub fn with_retry<T>(
    mut call: impl FnMut() -> Result<T, BackendError>,
) -> Result<T, BackendError> {
    match call() {
        Ok(v) => Ok(v),
        Err(first) => {
            tracing::debug!(error = %first, "backend call failed, retrying once");
            call()
        }
    }
}

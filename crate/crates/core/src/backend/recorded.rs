use std::collections::{BTreeMap, VecDeque};
use std::sync::Mutex;

use crate::analysis::{AnalysisHistory, GroundedAnswer};
use crate::perception::{FrameDescription, RawFrame};
use crate::planner::{ExperimentPlan, TrackingProposal};
use crate::session::{EventBody, SessionEvent};
use crate::sop::{SopAtlas, SopDoc};
use crate::tracker::{RawCandidate, RawPrediction};

use super::{
    BackendError, PerceptionBackend, PredictionBackend, PredictionRequest, ReasoningBackend,
};

/// Backend that plays back the model outputs captured in a session's event
/// stream, so the stream can be re-driven through a fresh session.
#[derive(Debug, Default)]
pub struct RecordedBackend {
    drops: BTreeMap<u64, BackendError>,
    predictions: BTreeMap<u64, Result<RawPrediction, BackendError>>,
    answers: Mutex<VecDeque<RecordedAnswer>>,
}

#[derive(Debug)]
struct RecordedAnswer {
    reply: Result<GroundedAnswer, BackendError>,
    /// A failed answer was attempted twice; serve the error for both calls.
    calls_left: u32,
}

impl RecordedBackend {
    pub fn from_events(events: &[SessionEvent]) -> Self {
        let mut backend = RecordedBackend::default();
        let answers = backend.answers.get_mut().expect("fresh mutex");
        for event in events {
            match &event.body {
                EventBody::FrameDropped { frame_index, reason } => {
                    backend.drops.insert(*frame_index, reason.clone());
                }
                EventBody::FrameIngested {
                    frame,
                    prediction,
                    prediction_error,
                } => {
                    let recorded = match (prediction, prediction_error) {
                        (Some(p), _) => Ok(RawPrediction {
                            candidates: p
                                .candidates
                                .iter()
                                .map(|v| RawCandidate {
                                    step: v.step as i64,
                                    confidence: v.confidence,
                                })
                                .collect(),
                            reasoning: p.reasoning.clone(),
                        }),
                        (None, Some(e)) => Err(e.clone()),
                        (None, None) => continue,
                    };
                    backend.predictions.insert(frame.frame_index, recorded);
                }
                EventBody::QueryAnswered { answer } => answers.push_back(RecordedAnswer {
                    reply: Ok(answer.clone()),
                    calls_left: 1,
                }),
                EventBody::QueryFailed { error } => answers.push_back(RecordedAnswer {
                    reply: Err(error.clone()),
                    calls_left: 2,
                }),
                _ => {}
            }
        }
        backend
    }
}

impl PerceptionBackend for RecordedBackend {
    fn describe(
        &self,
        frame: &RawFrame,
        _plan: &ExperimentPlan,
    ) -> Result<FrameDescription, BackendError> {
        Err(self
            .drops
            .get(&frame.frame_index)
            .cloned()
            .unwrap_or(BackendError::NotScripted(frame.frame_index)))
    }
}

impl PredictionBackend for RecordedBackend {
    fn predict(&self, request: &PredictionRequest<'_>) -> Result<RawPrediction, BackendError> {
        let idx = request.frame.frame_index;
        self.predictions
            .get(&idx)
            .cloned()
            .unwrap_or(Err(BackendError::NotScripted(idx)))
    }
}

impl ReasoningBackend for RecordedBackend {
    fn select_sops(&self, _intent: &str, _atlas: &SopAtlas) -> Result<Vec<String>, BackendError> {
        Err(BackendError::BadReply("recorded backend does not plan".into()))
    }

    fn propose_inventory(&self, _doc: &SopDoc) -> Result<Vec<String>, BackendError> {
        Err(BackendError::BadReply("recorded backend does not plan".into()))
    }

    fn propose_tracking_plan(
        &self,
        _doc: &SopDoc,
    ) -> Result<Option<TrackingProposal>, BackendError> {
        Err(BackendError::BadReply("recorded backend does not plan".into()))
    }

    fn answer_query(
        &self,
        _question: &str,
        _history: &AnalysisHistory,
    ) -> Result<GroundedAnswer, BackendError> {
        let mut answers = self.answers.lock().expect("answer queue poisoned");
        let Some(front) = answers.front_mut() else {
            return Err(BackendError::BadReply("no recorded answer left".into()));
        };
        front.calls_left -= 1;
        let reply = front.reply.clone();
        if front.calls_left == 0 {
            answers.pop_front();
        }
        reply
    }
}

//! Step-tracking agent.
//!
//! Frames arrive one at a time. Every `memory_update_interval` frames a
//! top-3 step prediction is pushed into a FIFO memory sized to span one
//! prediction window; every `prediction_interval` frames the memory is
//! voted into a [`ConfirmedStep`] and passed through the transition guard.

mod guard;
mod votes;

use serde::{Deserialize, Serialize};

use crate::analysis::LogRecord;
use crate::backend::{BackendError, PredictionBackend, PredictionRequest};
use crate::perception::ContextFrame;
use crate::planner::StepTrackingPlan;
use crate::sop::SopStep;

pub use guard::{
    guard_transition, history_is_consistent, meets_threshold, resolve_or_query,
    ClarificationReason, Guard, HitlQuery, Resolution, CONFIDENCE_EPSILON,
};
pub use votes::{aggregate_votes, MemoryEntry, TrackerMemory, RANKS};

pub const MAX_CANDIDATES: usize = 3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrackerError {
    #[error("tracker memory holds no predictions")]
    EmptyMemory,
    #[error("no clarification is pending")]
    NoPendingQuery,
    #[error("step {step} is outside 1..={steps}")]
    StepOutOfRange { step: i64, steps: usize },
    #[error("frame {frame_index} does not follow frame {last}")]
    OutOfOrderFrame { frame_index: u64, last: u64 },
}

/// One candidate as reported by a backend, before sanitizing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawCandidate {
    pub step: i64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPrediction {
    pub candidates: Vec<RawCandidate>,
    #[serde(default)]
    pub reasoning: String,
}

impl RawPrediction {
    pub fn single(step: i64, confidence: f64) -> Self {
        RawPrediction {
            candidates: vec![RawCandidate { step, confidence }],
            reasoning: String::new(),
        }
    }

    pub fn ranked(candidates: &[(i64, f64)]) -> Self {
        RawPrediction {
            candidates: candidates
                .iter()
                .map(|&(step, confidence)| RawCandidate { step, confidence })
                .collect(),
            reasoning: String::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepVote {
    pub step: usize,
    pub confidence: f64,
}

/// A sanitized per-frame prediction: 1..=3 distinct in-range steps, best
/// first, confidences in `[0, 1]` on a 1e-9 grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePrediction {
    pub frame_index: u64,
    pub candidates: Vec<StepVote>,
    #[serde(default)]
    pub reasoning: String,
}

pub fn clamp_confidence(c: f64) -> f64 {
    if c.is_nan() {
        return 0.0;
    }
    (c.clamp(0.0, 1.0) * votes::NANO).round() / votes::NANO
}

impl FramePrediction {
    /// Keep in-range, first-seen steps in backend order, truncate to three,
    /// and clamp confidences. `None` if nothing usable remains.
    pub fn sanitize(frame_index: u64, raw: &RawPrediction, steps: usize) -> Option<Self> {
        let mut candidates: Vec<StepVote> = Vec::with_capacity(MAX_CANDIDATES);
        for c in &raw.candidates {
            if c.step < 1 || c.step as u64 > steps as u64 {
                continue;
            }
            let step = c.step as usize;
            if candidates.iter().any(|v| v.step == step) {
                continue;
            }
            candidates.push(StepVote {
                step,
                confidence: clamp_confidence(c.confidence),
            });
            if candidates.len() == MAX_CANDIDATES {
                break;
            }
        }
        (!candidates.is_empty()).then(|| FramePrediction {
            frame_index,
            candidates,
            reasoning: raw.reasoning.clone(),
        })
    }

    pub fn top(&self) -> StepVote {
        self.candidates[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedStep {
    pub step: usize,
    pub aggregated_confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoteTally {
    pub rank: u8,
    pub step: usize,
    pub votes: u32,
    pub summed_confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepSource {
    Vote,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfirmedStep {
    pub frame_index: u64,
    pub top: Option<RankedStep>,
    pub second: Option<RankedStep>,
    pub third: Option<RankedStep>,
    #[serde(default)]
    pub vote_detail: Vec<VoteTally>,
    pub source: StepSource,
}

impl ConfirmedStep {
    pub fn human(frame_index: u64, step: usize) -> Self {
        ConfirmedStep {
            frame_index,
            top: Some(RankedStep {
                step,
                aggregated_confidence: 1.0,
            }),
            second: None,
            third: None,
            vote_detail: Vec::new(),
            source: StepSource::Human,
        }
    }

    pub fn step(&self) -> Option<usize> {
        self.top.map(|t| t.step)
    }

    pub fn confidence(&self) -> f64 {
        self.top.map(|t| t.aggregated_confidence).unwrap_or(0.0)
    }
}

/// What a prediction window produced.
#[derive(Debug, Clone, PartialEq)]
pub enum TrackerOutput {
    Accepted(ConfirmedStep),
    /// Low confidence on a consistent timeline: accepted without asking.
    AutoAccepted(ConfirmedStep),
    Query(HitlQuery),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub prediction: Option<FramePrediction>,
    pub prediction_error: Option<BackendError>,
    pub output: Option<TrackerOutput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerState {
    pub plan: StepTrackingPlan,
    pub steps: usize,
    pub memory: TrackerMemory,
    pub frames_ingested: u64,
    pub last_frame_index: Option<u64>,
    /// 0 until the first step is accepted.
    pub previous_step: usize,
    pub pending_query: Option<HitlQuery>,
}

impl TrackerState {
    pub fn new(plan: StepTrackingPlan, steps: usize) -> Self {
        let capacity = plan.memory_capacity();
        TrackerState {
            plan,
            steps,
            memory: TrackerMemory::new(capacity),
            frames_ingested: 0,
            last_frame_index: None,
            previous_step: 0,
            pending_query: None,
        }
    }

    /// Feed one contextualized frame. Predictions and votes happen on the
    /// plan's intervals; a prediction failure only skips the memory update.
    pub fn ingest_frame(
        &mut self,
        frame: ContextFrame,
        backend: &dyn PredictionBackend,
        sop_steps: &[SopStep],
        history: &[LogRecord],
    ) -> Result<IngestReport, TrackerError> {
        if let Some(last) = self.last_frame_index {
            if frame.frame_index <= last {
                return Err(TrackerError::OutOfOrderFrame {
                    frame_index: frame.frame_index,
                    last,
                });
            }
        }
        self.last_frame_index = Some(frame.frame_index);
        self.frames_ingested += 1;
        let n = self.frames_ingested;
        let mut report = IngestReport::default();

        if n.is_multiple_of(u64::from(self.plan.memory_update_interval)) {
            let request = PredictionRequest {
                frame: &frame,
                steps: sop_steps,
                history,
            };
            match backend.predict(&request) {
                Ok(raw) => match FramePrediction::sanitize(frame.frame_index, &raw, self.steps) {
                    Some(p) => {
                        self.memory.push(frame.clone(), p.clone());
                        report.prediction = Some(p);
                    }
                    None => {
                        report.prediction_error = Some(BackendError::BadReply(
                            "prediction has no in-range candidates".into(),
                        ))
                    }
                },
                Err(e) => report.prediction_error = Some(e),
            }
        }

        if self.pending_query.is_none()
            && n.is_multiple_of(u64::from(self.plan.prediction_interval))
            && self.memory.has_predictions()
        {
            let mut confirmed = aggregate_votes(&self.memory)?;
            confirmed.frame_index = frame.frame_index;
            report.output = Some(self.decide(confirmed, history));
        }
        Ok(report)
    }

    fn decide(&mut self, confirmed: ConfirmedStep, history: &[LogRecord]) -> TrackerOutput {
        match guard_transition(self.previous_step, &confirmed, self.plan.confidence_threshold) {
            Guard::Accept => {
                self.previous_step = confirmed.step().unwrap_or(self.previous_step);
                TrackerOutput::Accepted(confirmed)
            }
            Guard::NeedsClarification(reason) => {
                match resolve_or_query(self.previous_step, &confirmed, reason, &self.memory, history)
                {
                    Resolution::AutoAccept => {
                        self.previous_step = confirmed.step().unwrap_or(self.previous_step);
                        TrackerOutput::AutoAccepted(confirmed)
                    }
                    Resolution::Query(q) => {
                        self.pending_query = Some((*q).clone());
                        TrackerOutput::Query(*q)
                    }
                }
            }
        }
    }

    /// Apply the operator's answer to the pending query.
    pub fn apply_clarification(&mut self, answered_step: i64) -> Result<ConfirmedStep, TrackerError> {
        let Some(query) = &self.pending_query else {
            return Err(TrackerError::NoPendingQuery);
        };
        if answered_step < 1 || answered_step as u64 > self.steps as u64 {
            return Err(TrackerError::StepOutOfRange {
                step: answered_step,
                steps: self.steps,
            });
        }
        let frame_index = self.last_frame_index.unwrap_or(query.frame_index);
        let step = answered_step as usize;
        self.previous_step = step;
        self.pending_query = None;
        self.memory.clear_predictions();
        Ok(ConfirmedStep::human(frame_index, step))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ScriptRow, ScriptedBackend};
    use crate::planner::PlanDefaults;

    fn plan(m: u32, p: u32, t: f64) -> StepTrackingPlan {
        PlanDefaults {
            memory_update_interval: m,
            prediction_interval: p,
            confidence_threshold: t,
        }
        .to_plan("rie")
    }

    fn backend(preds: &[(u64, i64, f64)]) -> ScriptedBackend {
        let rows: Vec<ScriptRow> = preds
            .iter()
            .map(|&(i, s, c)| {
                let mut r = ScriptRow::new(i);
                r.prediction = Some(RawPrediction::single(s, c));
                r
            })
            .collect();
        ScriptedBackend::new(rows.into())
    }

    fn feed(
        state: &mut TrackerState,
        b: &ScriptedBackend,
        range: std::ops::Range<u64>,
    ) -> Vec<IngestReport> {
        range
            .map(|i| {
                state
                    .ingest_frame(ContextFrame::empty(i, i * 1000), b, &[], &[])
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn plan_1_3_confirms_on_third_frame() {
        let b = backend(&[(0, 1, 0.9), (1, 1, 0.9), (2, 1, 0.9)]);
        let mut s = TrackerState::new(plan(1, 3, 0.8), 8);
        let r = feed(&mut s, &b, 0..3);
        assert!(r.iter().all(|x| x.prediction.is_some()));
        assert!(r[0].output.is_none() && r[1].output.is_none());
        assert!(matches!(&r[2].output, Some(TrackerOutput::Accepted(c)) if c.step() == Some(1)));
        assert_eq!(s.previous_step, 1);
    }

    #[test]
    fn plan_2_5_updates_on_even_frames() {
        let b = backend(&[(1, 1, 0.9), (3, 1, 0.9)]);
        let mut s = TrackerState::new(plan(2, 5, 0.6), 6);
        assert_eq!(s.memory.capacity(), 3);
        let r = feed(&mut s, &b, 0..5);
        let updated: Vec<bool> = r.iter().map(|x| x.prediction.is_some()).collect();
        assert_eq!(updated, [false, true, false, true, false]);
        assert!(r[4].output.is_some());
        assert!(r[..4].iter().all(|x| x.output.is_none()));
    }

    #[test]
    fn sanitize_clamps_dedups_and_truncates() {
        let raw = RawPrediction::ranked(&[(0, 0.5), (2, 1.4), (2, 0.3), (9, 0.9), (3, -1.0), (4, 0.2), (5, 0.1)]);
        let p = FramePrediction::sanitize(0, &raw, 8).unwrap();
        let got: Vec<(usize, f64)> = p.candidates.iter().map(|v| (v.step, v.confidence)).collect();
        assert_eq!(got, vec![(2, 1.0), (3, 0.0), (4, 0.2)]);
        assert!(FramePrediction::sanitize(0, &RawPrediction::single(12, 0.5), 8).is_none());
    }

    #[test]
    fn query_blocks_until_answered() {
        let b = backend(&[(0, 3, 0.9), (1, 3, 0.9), (2, 3, 0.9), (3, 1, 0.9), (4, 1, 0.9), (5, 1, 0.9)]);
        let mut s = TrackerState::new(plan(1, 3, 0.8), 8);
        let r = feed(&mut s, &b, 0..3);
        let Some(TrackerOutput::Query(q)) = &r[2].output else {
            panic!("expected a query, got {:?}", r[2].output);
        };
        assert_eq!(q.reason, ClarificationReason::IllegalTransition);
        assert_eq!(q.candidate_steps, vec![1, 2, 3]);

        // Memory keeps filling but nothing is confirmed.
        let r = feed(&mut s, &b, 3..6);
        assert!(r.iter().all(|x| x.prediction.is_some() && x.output.is_none()));

        let c = s.apply_clarification(3).unwrap();
        assert_eq!(c.source, StepSource::Human);
        assert_eq!(c.frame_index, 5);
        assert_eq!(s.previous_step, 3);
        assert!(!s.memory.has_predictions());
        assert_eq!(s.memory.len(), 3);
        assert_eq!(s.apply_clarification(3), Err(TrackerError::NoPendingQuery));
    }

    #[test]
    fn answer_out_of_range() {
        let b = backend(&[(0, 4, 0.9)]);
        let mut s = TrackerState::new(plan(1, 1, 0.8), 8);
        feed(&mut s, &b, 0..1);
        assert!(s.pending_query.is_some());
        assert_eq!(
            s.apply_clarification(99),
            Err(TrackerError::StepOutOfRange { step: 99, steps: 8 })
        );
    }

    #[test]
    fn prediction_failure_skips_update() {
        let mut row = ScriptRow::new(0);
        row.prediction = Some(RawPrediction::single(1, 0.9));
        row.predict_failures = 1;
        let b = ScriptedBackend::new(vec![row].into());
        let mut s = TrackerState::new(plan(1, 1, 0.8), 8);
        let r = s.ingest_frame(ContextFrame::empty(0, 0), &b, &[], &[]).unwrap();
        assert_eq!(r.prediction_error, Some(BackendError::Timeout));
        assert!(r.output.is_none());
        assert_eq!(s.frames_ingested, 1);
    }

    #[test]
    fn out_of_order_frame_rejected() {
        let b = backend(&[(5, 1, 0.9)]);
        let mut s = TrackerState::new(plan(1, 3, 0.8), 8);
        feed(&mut s, &b, 5..6);
        assert_eq!(
            s.ingest_frame(ContextFrame::empty(5, 0), &b, &[], &[]),
            Err(TrackerError::OutOfOrderFrame { frame_index: 5, last: 5 })
        );
    }
}

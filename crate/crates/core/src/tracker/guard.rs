use serde::{Deserialize, Serialize};

use crate::analysis::LogRecord;
use crate::perception::EquipmentObservation;

use super::{ConfirmedStep, StepSource, TrackerMemory};

/// Float slack when comparing an aggregated confidence to the threshold, so
/// that e.g. 2.4 / 3 is not rejected against 0.8 by rounding.
pub const CONFIDENCE_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClarificationReason {
    LowConfidence,
    IllegalTransition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Guard {
    Accept,
    NeedsClarification(ClarificationReason),
}

/// A blocking question for the operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitlQuery {
    pub frame_index: u64,
    pub reason: ClarificationReason,
    pub last_accepted_step: usize,
    /// Steps the operator is asked to choose between, ascending.
    pub candidate_steps: Vec<usize>,
    pub confirmed: ConfirmedStep,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equipment: Option<EquipmentObservation>,
    pub question: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Resolution {
    AutoAccept,
    Query(Box<HitlQuery>),
}

fn step_delta(prev: usize, step: usize) -> i64 {
    step as i64 - prev as i64
}

pub fn meets_threshold(confidence: f64, threshold: f64) -> bool {
    confidence + CONFIDENCE_EPSILON >= threshold
}

pub fn guard_transition(prev: usize, confirmed: &ConfirmedStep, threshold: f64) -> Guard {
    let Some(top) = confirmed.top else {
        return Guard::NeedsClarification(ClarificationReason::LowConfidence);
    };
    if !matches!(step_delta(prev, top.step), 0 | 1) {
        Guard::NeedsClarification(ClarificationReason::IllegalTransition)
    } else if !meets_threshold(top.aggregated_confidence, threshold) {
        Guard::NeedsClarification(ClarificationReason::LowConfidence)
    } else {
        Guard::Accept
    }
}

/// True when every consecutive pair of records either stays on the same
/// step or advances by one. A human-sourced record may jump anywhere.
pub fn history_is_consistent(records: &[LogRecord]) -> bool {
    records.windows(2).all(|w| {
        w[1].source == StepSource::Human || matches!(step_delta(w[0].step, w[1].step), 0 | 1)
    })
}

/// Decide whether a guarded confirmation can be accepted silently or needs
/// the operator.
pub fn resolve_or_query(
    previous_step: usize,
    confirmed: &ConfirmedStep,
    reason: ClarificationReason,
    memory: &TrackerMemory,
    history: &[LogRecord],
) -> Resolution {
    let top = confirmed.top.map(|t| t.step).unwrap_or(previous_step);
    if reason == ClarificationReason::LowConfidence
        && matches!(step_delta(previous_step, top), 0 | 1)
        && history_is_consistent(history)
    {
        return Resolution::AutoAccept;
    }
    let lo = previous_step.max(1).min(top);
    let hi = previous_step.max(top);
    let candidate_steps: Vec<usize> = (lo..=hi).collect();
    let equipment = memory
        .entries()
        .rev()
        .find_map(|e| e.frame.equipment.first().cloned());
    let question = match reason {
        ClarificationReason::IllegalTransition => format!(
            "Tracking jumped from step {previous_step} to step {top}. Which step are you on ({}-{})?",
            lo, hi
        ),
        ClarificationReason::LowConfidence => format!(
            "Not sure whether you are on step {top}. Which step are you on ({}-{})?",
            lo, hi
        ),
    };
    Resolution::Query(Box::new(HitlQuery {
        frame_index: confirmed.frame_index,
        reason,
        last_accepted_step: previous_step,
        candidate_steps,
        confirmed: confirmed.clone(),
        equipment,
        question,
    }))
}

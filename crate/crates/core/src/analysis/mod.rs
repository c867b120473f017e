//! Analysis agent: the append-only experiment log, parameter checks,
//! guidance, and log-grounded question answering.

mod errors;
mod guidance;
mod query;

use serde::{Deserialize, Serialize};

use crate::perception::{ContextFrame, Reading, NONE_OBSERVED};
use crate::sop::SopDoc;
use crate::tracker::{meets_threshold, ConfirmedStep, StepSource};

pub use errors::{detect_errors, Alert, AlertKind};
pub use guidance::{make_guidance, Guidance, PROCEDURE_COMPLETE};
pub use query::{answer_query, fallback_answer, GroundedAnswer, NO_RECORDS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    pub timestamp: u64,
    pub frame_index: u64,
    pub sop_id: String,
    pub step: usize,
    pub key_actions: Vec<String>,
    pub key_parameters: Vec<Reading>,
    pub summary: String,
    /// `step / N` of the record's SOP.
    pub progress: f64,
    pub source: StepSource,
}

/// Append-only record list. Sequence numbers start at 1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnalysisHistory {
    records: Vec<LogRecord>,
}

impl AnalysisHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&LogRecord> {
        self.records.last()
    }

    pub fn get(&self, seq: u64) -> Option<&LogRecord> {
        seq.checked_sub(1).and_then(|i| self.records.get(i as usize))
    }

    pub fn next_seq(&self) -> u64 {
        self.records.len() as u64 + 1
    }

    /// Trailing run of records belonging to `sop_id`.
    pub fn tail_for(&self, sop_id: &str) -> &[LogRecord] {
        let start = self
            .records
            .iter()
            .rposition(|r| r.sop_id != sop_id)
            .map_or(0, |i| i + 1);
        &self.records[start..]
    }

    /// Last `n` records of the trailing run for `sop_id`, oldest first.
    pub fn window_for(&self, sop_id: &str, n: usize) -> &[LogRecord] {
        let tail = self.tail_for(sop_id);
        &tail[tail.len().saturating_sub(n)..]
    }

    fn push(&mut self, record: LogRecord) -> &LogRecord {
        debug_assert_eq!(record.seq, self.next_seq());
        self.records.push(record);
        self.records.last().expect("just pushed")
    }
}

fn summarize(doc: &SopDoc, step: usize, frame: &ContextFrame) -> String {
    let instruction = doc.step(step).map(|s| s.instruction.as_str()).unwrap_or("");
    let mut summary = format!("Step {}/{}: {}", step, doc.step_count(), instruction);
    if frame.action != NONE_OBSERVED {
        summary.push_str(&format!(" Operator: {}.", frame.action));
    }
    let seen: Vec<&str> = frame
        .equipment
        .iter()
        .map(|e| e.name.as_str())
        .filter(|n| *n != crate::perception::UNKNOWN_EQUIPMENT)
        .collect();
    if !seen.is_empty() {
        summary.push_str(&format!(" Equipment: {}.", seen.join("; ")));
    }
    summary
}

/// Append a record for `confirmed` if it is human-sourced or meets the
/// threshold. Key parameters are the frame's readings, copied as-is.
pub fn append_record(
    history: &mut AnalysisHistory,
    confirmed: &ConfirmedStep,
    frame: &ContextFrame,
    threshold: f64,
    doc: &SopDoc,
    timestamp: u64,
) -> Option<LogRecord> {
    let top = confirmed.top?;
    let logged = confirmed.source == StepSource::Human
        || meets_threshold(top.aggregated_confidence, threshold);
    if !logged || top.step == 0 || top.step > doc.step_count() {
        return None;
    }
    let key_actions = if frame.action == NONE_OBSERVED {
        Vec::new()
    } else {
        vec![frame.action.clone()]
    };
    let record = LogRecord {
        seq: history.next_seq(),
        timestamp,
        frame_index: frame.frame_index,
        sop_id: doc.id.clone(),
        step: top.step,
        key_actions,
        key_parameters: frame.readings().cloned().collect(),
        summary: summarize(doc, top.step, frame),
        progress: top.step as f64 / doc.step_count() as f64,
        source: confirmed.source,
    };
    Some(history.push(record).clone())
}

//! Evaluation harness: recording replay with scripted backends, synthetic
//! noisy sessions, accuracy and HITL metrics, score statistics.

mod stats;
mod suite;
mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::ScriptTable;
use crate::perception::{ContextFrame, Recording};
use crate::planner::{PlannerConfig, Protocol};
use crate::session::{
    BackendSelection, ClockMode, EventBody, LogDocument, Session, SessionConfig, SessionError,
    SessionEvent, SessionInput, DEFAULT_HISTORY_WINDOW,
};
use crate::sop::SopAtlas;

pub use stats::{
    eval_recognition, mean_sem, summarize_scores, MeanSem, RecognitionReport, StatsError,
    MAX_SCORE, MIN_SCORE,
};
pub use suite::{suite_cases, CaseOutcome, Expectations, LoadedCase, ReplayCase};
pub use synth::{synth_session, SynthSession, SynthSpec, FRAME_PERIOD_MS};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("recording has {frames} frames but ground truth has {truth}")]
    LengthMismatch { frames: usize, truth: usize },
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("{0}")]
    Io(String),
}

/// Per-frame ground truth for a recording.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub steps: Vec<usize>,
    #[serde(default)]
    pub equipment: Vec<Vec<String>>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
    }
}

/// How replay answers clarification queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnswerPolicy {
    /// Answer with the true step of the current frame.
    Oracle,
    /// Never answer; the tracker stays blocked.
    Refuse,
    Fixed(usize),
}

impl FromStr for AnswerPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(AnswerPolicy::Oracle),
            "refuse" => Ok(AnswerPolicy::Refuse),
            _ => s
                .strip_prefix("fixed:")
                .and_then(|k| k.parse().ok())
                .map(AnswerPolicy::Fixed)
                .ok_or_else(|| format!("expected oracle, refuse or fixed:K, got `{s}`")),
        }
    }
}

impl fmt::Display for AnswerPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnswerPolicy::Oracle => f.write_str("oracle"),
            AnswerPolicy::Refuse => f.write_str("refuse"),
            AnswerPolicy::Fixed(k) => write!(f, "fixed:{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub frames: usize,
    pub dropped: usize,
    /// Fraction of frames whose tracked step equals the truth.
    pub step_accuracy: f64,
    pub per_step_accuracy: BTreeMap<usize, f64>,
    /// Fraction of predicted frames whose top-1 prediction equals the truth.
    pub raw_accuracy: f64,
    pub predicted_frames: usize,
    pub confirmations: usize,
    pub hitl_count: usize,
    pub alerts: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equipment_accuracy: Option<MeanSem>,
}

/// Session config replaying `recording` with `script` under its header plans.
pub fn session_config_for(recording: &Recording, script: ScriptTable) -> SessionConfig {
    let h = &recording.header;
    SessionConfig {
        protocol: Protocol {
            intent: format!("replay {}", h.sop_id),
            sop_ids: vec![h.sop_id.clone()],
        },
        active_sop: h.sop_id.clone(),
        experiment_plan: h.experiment_plan.clone(),
        tracking_plan: h.tracking_plan.clone(),
        backend: Some(BackendSelection::Scripted { script }),
        clock: ClockMode::Replay,
        history_window: DEFAULT_HISTORY_WINDOW,
    }
}

/// Step tracked at each frame.
///
/// A frame is credited to the step confirmed by the first window that
/// covers it, i.e. the earliest confirmation at or after the frame (the
/// last one if several share that frame index). Frames after the final
/// confirmation keep its step; a session with no confirmation tracks 0.
pub fn tracked_steps(frame_indices: &[u64], events: &[SessionEvent]) -> Vec<usize> {
    let confirmations: Vec<(u64, usize)> = events
        .iter()
        .filter_map(|e| match &e.body {
            EventBody::StepConfirmed { confirmed, .. } => {
                confirmed.step().map(|s| (confirmed.frame_index, s))
            }
            _ => None,
        })
        .collect();
    let fallback = confirmations.last().map_or(0, |c| c.1);
    frame_indices
        .iter()
        .map(|&f| {
            let first = confirmations.partition_point(|c| c.0 < f);
            match confirmations.get(first) {
                Some(&(idx, _)) => {
                    let last_at = confirmations[first..].partition_point(|c| c.0 == idx);
                    confirmations[first + last_at - 1].1
                }
                None => fallback,
            }
        })
        .collect()
}

fn fraction(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Compute metrics for a finished session log against the truth.
pub fn score_events(
    recording: &Recording,
    truth: &GroundTruth,
    events: &[SessionEvent],
) -> Result<Metrics, HarnessError> {
    if recording.len() != truth.len() {
        return Err(HarnessError::LengthMismatch {
            frames: recording.len(),
            truth: truth.len(),
        });
    }
    let frame_indices: Vec<u64> = recording.frames.iter().map(|f| f.frame_index()).collect();
    let tracked = tracked_steps(&frame_indices, events);

    let mut per_step: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&t, &got) in truth.steps.iter().zip(&tracked) {
        let e = per_step.entry(t).or_default();
        e.0 += usize::from(t == got);
        e.1 += 1;
    }
    let hits: usize = per_step.values().map(|e| e.0).sum();

    let position: BTreeMap<u64, usize> = frame_indices.iter().enumerate().map(|(i, &f)| (f, i)).collect();
    let mut raw_hits = 0;
    let mut predicted = 0;
    let mut ingested: Vec<Option<ContextFrame>> = vec![None; recording.len()];
    let (mut dropped, mut confirmations, mut hitl, mut alerts) = (0, 0, 0, 0);
    for e in events {
        match &e.body {
            EventBody::FrameIngested {
                frame, prediction, ..
            } => {
                let i = position[&frame.frame_index];
                if let Some(p) = prediction {
                    predicted += 1;
                    raw_hits += usize::from(p.top().step == truth.steps[i]);
                }
                ingested[i] = Some(frame.clone());
            }
            EventBody::FrameDropped { .. } => dropped += 1,
            EventBody::StepConfirmed { .. } => confirmations += 1,
            EventBody::ClarificationRequested { .. } => hitl += 1,
            EventBody::AlertRaised { .. } => alerts += 1,
            _ => {}
        }
    }

    let equipment_accuracy = if truth.equipment.len() == recording.len()
        && truth.equipment.iter().any(|e| !e.is_empty())
    {
        let frames: Vec<ContextFrame> = ingested
            .into_iter()
            .zip(&frame_indices)
            .map(|(f, &i)| f.unwrap_or_else(|| ContextFrame::empty(i, 0)))
            .collect();
        let classes = &recording.header.experiment_plan.inventory;
        eval_recognition(&frames, truth, classes)?.summary
    } else {
        None
    };

    Ok(Metrics {
        frames: recording.len(),
        dropped,
        step_accuracy: fraction(hits, truth.len()),
        per_step_accuracy: per_step
            .into_iter()
            .map(|(s, (h, t))| (s, fraction(h, t)))
            .collect(),
        raw_accuracy: fraction(raw_hits, predicted),
        predicted_frames: predicted,
        confirmations,
        hitl_count: hitl,
        alerts,
        equipment_accuracy,
    })
}

/// Replay a recording through a full session and score it.
pub fn replay(
    recording: &Recording,
    truth: &GroundTruth,
    config: SessionConfig,
    policy: AnswerPolicy,
    atlas: &SopAtlas,
    planner: &PlannerConfig,
) -> Result<(Metrics, LogDocument), HarnessError> {
    if recording.len() != truth.len() {
        return Err(HarnessError::LengthMismatch {
            frames: recording.len(),
            truth: truth.len(),
        });
    }
    let mut session = Session::create("replay", config, atlas, planner)?;
    for (frame, &true_step) in recording.frames.iter().zip(&truth.steps) {
        session.handle(SessionInput::Frame {
            frame: frame.clone(),
        })?;
        if session.tracker().pending_query.is_some() {
            let answer = match policy {
                AnswerPolicy::Oracle => Some(true_step),
                AnswerPolicy::Fixed(k) => Some(k),
                AnswerPolicy::Refuse => None,
            };
            if let Some(step) = answer {
                session.handle(SessionInput::Answer { step: step as i64 })?;
            }
        }
    }
    session.handle(SessionInput::Close)?;
    let log = session.export_log();
    let metrics = score_events(recording, truth, &log.events)?;
    Ok((metrics, log))
}

/// Replay a synthetic session under its own header plan with oracle answers.
pub fn replay_synthetic(
    synth: &SynthSession,
    atlas: &SopAtlas,
    planner: &PlannerConfig,
) -> Result<(Metrics, LogDocument), HarnessError> {
    let config = session_config_for(&synth.recording, synth.script.clone());
    replay(&synth.recording, &synth.truth, config, AnswerPolicy::Oracle, atlas, planner)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityViolation {
    pub seed: u64,
    pub smaller_k: u32,
    pub larger_k: u32,
    pub accuracy_smaller: f64,
    pub accuracy_larger: f64,
}

/// Replay each seed under plans (1, K, threshold) for increasing K and list
/// every case where a larger memory tracked worse than a smaller one.
pub fn capacity_monotonicity(
    doc: &crate::sop::SopDoc,
    spec: &SynthSpec,
    seeds: impl IntoIterator<Item = u64>,
    ks: &[u32],
    atlas: &SopAtlas,
    planner: &PlannerConfig,
) -> Result<Vec<MonotonicityViolation>, HarnessError> {
    let mut violations = Vec::new();
    for seed in seeds {
        let mut prev: Option<(u32, f64)> = None;
        for &k in ks {
            let mut s = spec.clone();
            s.seed = seed;
            s.plan.memory_update_interval = 1;
            s.plan.prediction_interval = k;
            let synth = synth_session(doc, &s);
            let (m, _) = replay_synthetic(&synth, atlas, planner)?;
            if let Some((pk, pa)) = prev {
                if m.step_accuracy < pa {
                    violations.push(MonotonicityViolation {
                        seed,
                        smaller_k: pk,
                        larger_k: k,
                        accuracy_smaller: pa,
                        accuracy_larger: m.step_accuracy,
                    });
                }
            }
            prev = Some((k, m.step_accuracy));
        }
    }
    Ok(violations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptRow;
    use crate::tracker::RawPrediction;

    fn setup() -> (SopAtlas, PlannerConfig) {
        (SopAtlas::bundled(), PlannerConfig::bundled())
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("oracle".parse(), Ok(AnswerPolicy::Oracle));
        assert_eq!("fixed:4".parse(), Ok(AnswerPolicy::Fixed(4)));
        assert!("fixed:x".parse::<AnswerPolicy>().is_err());
        assert_eq!(AnswerPolicy::Fixed(2).to_string(), "fixed:2");
    }

    #[test]
    fn constant_step_one_scores_one_eighth() {
        let (atlas, planner) = setup();
        let doc = atlas.lookup("rie").unwrap();
        let mut synth = synth_session(doc, &SynthSpec::new(6, 0.0, 0));
        let mut script = ScriptTable::default();
        for i in 0..synth.recording.len() as u64 {
            let mut row = ScriptRow::new(i);
            row.prediction = Some(RawPrediction::single(1, 0.9));
            script.insert(row);
        }
        synth.script = script;
        let (m, _) = replay_synthetic(&synth, &atlas, &planner).unwrap();
        assert_eq!(m.step_accuracy, 0.125);
        assert_eq!(m.hitl_count, 0);
    }

    #[test]
    fn empty_recording_zero_metrics() {
        let (atlas, planner) = setup();
        let doc = atlas.lookup("rie").unwrap();
        let synth = synth_session(doc, &SynthSpec::new(0, 0.0, 0));
        let (m, log) = replay_synthetic(&synth, &atlas, &planner).unwrap();
        assert_eq!((m.frames, m.confirmations, m.hitl_count, m.alerts), (0, 0, 0, 0));
        assert_eq!(m.step_accuracy, 0.0);
        assert!(!log.partial);
    }

    #[test]
    fn noise_free_synthetic_is_perfect() {
        let (atlas, planner) = setup();
        let doc = atlas.lookup("rie").unwrap();
        let synth = synth_session(doc, &SynthSpec::new(6, 0.0, 3));
        let (m, _) = replay_synthetic(&synth, &atlas, &planner).unwrap();
        assert_eq!(m.step_accuracy, 1.0);
        assert_eq!(m.raw_accuracy, 1.0);
        assert_eq!(m.alerts, 0);
        assert_eq!(m.equipment_accuracy.unwrap().mean, 1.0);
    }

    #[test]
    fn length_mismatch() {
        let (atlas, planner) = setup();
        let doc = atlas.lookup("rie").unwrap();
        let mut synth = synth_session(doc, &SynthSpec::new(2, 0.0, 0));
        synth.truth.steps.pop();
        assert!(matches!(
            replay_synthetic(&synth, &atlas, &planner),
            Err(HarnessError::LengthMismatch { frames: 16, truth: 15 })
        ));
    }

    #[test]
    fn tracked_step_labels() {
        use crate::tracker::ConfirmedStep;
        let ev = |frame: u64, step: usize| SessionEvent {
            seq: 0,
            timestamp: 0,
            body: EventBody::StepConfirmed {
                sop_id: "rie".into(),
                confirmed: ConfirmedStep::human(frame, step),
                accepted_by: crate::session::AcceptedBy::Human,
            },
        };
        let events = vec![ev(2, 1), ev(5, 3), ev(5, 2)];
        assert_eq!(
            tracked_steps(&[0, 1, 2, 3, 5, 6, 9], &events),
            vec![1, 1, 1, 2, 2, 2, 2]
        );
        assert_eq!(tracked_steps(&[0], &[]), vec![0]);
    }
}

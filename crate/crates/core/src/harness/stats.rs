use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::perception::ContextFrame;
use crate::text::casefold;

use super::{GroundTruth, HarnessError};

pub const MIN_SCORE: i64 = 1;
pub const MAX_SCORE: i64 = 5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("no scores to summarize")]
    EmptyScores,
    #[error("score {0} is outside {MIN_SCORE}..={MAX_SCORE}")]
    OutOfRangeScore(i64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSem {
    pub mean: f64,
    /// Sample standard deviation over sqrt(n); 0 for a single value.
    pub sem: f64,
    pub n: usize,
}

/// Mean and standard error of arbitrary values. `None` when empty.
pub fn mean_sem(values: &[f64]) -> Option<MeanSem> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sem = if n == 1 {
        0.0
    } else {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1) as f64).sqrt() / (n as f64).sqrt()
    };
    Some(MeanSem { mean, sem, n })
}

/// Summarize rubric scores on the 1-5 scale.
pub fn summarize_scores(scores: &[i64]) -> Result<MeanSem, StatsError> {
    if let Some(&bad) = scores.iter().find(|s| !(MIN_SCORE..=MAX_SCORE).contains(*s)) {
        return Err(StatsError::OutOfRangeScore(bad));
    }
    let values: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
    mean_sem(&values).ok_or(StatsError::EmptyScores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognitionReport {
    pub per_class: BTreeMap<String, f64>,
    /// Classes that never appear in the ground truth.
    pub excluded: Vec<String>,
    /// Across included classes; `None` if every class was excluded.
    pub summary: Option<MeanSem>,
}

/// Per-equipment recognition accuracy: of the frames whose ground truth
/// contains a class, the fraction whose observations name it.
pub fn eval_recognition(
    frames: &[ContextFrame],
    truth: &GroundTruth,
    classes: &[String],
) -> Result<RecognitionReport, HarnessError> {
    if frames.len() != truth.equipment.len() {
        return Err(HarnessError::LengthMismatch {
            frames: frames.len(),
            truth: truth.equipment.len(),
        });
    }
    let mut tally: BTreeMap<String, (usize, usize)> = classes
        .iter()
        .map(|c| (c.clone(), (0, 0)))
        .collect();
    for (frame, expected) in frames.iter().zip(&truth.equipment) {
        for class in expected {
            let key = casefold(class);
            let hit = frame.equipment.iter().any(|o| casefold(&o.name) == key);
            let t = tally.entry(class.clone()).or_default();
            t.0 += usize::from(hit);
            t.1 += 1;
        }
    }
    let mut per_class = BTreeMap::new();
    let mut excluded = Vec::new();
    for (class, (hits, total)) in tally {
        if total == 0 {
            excluded.push(class);
        } else {
            per_class.insert(class, hits as f64 / total as f64);
        }
    }
    let values: Vec<f64> = per_class.values().copied().collect();
    Ok(RecognitionReport {
        summary: mean_sem(&values),
        per_class,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::EquipmentObservation;

    #[test]
    fn score_examples() {
        let s = summarize_scores(&[5, 5, 5]).unwrap();
        assert_eq!((s.mean, s.sem), (5.0, 0.0));
        let s = summarize_scores(&[1, 5]).unwrap();
        assert!((s.mean - 3.0).abs() < 1e-12 && (s.sem - 2.0).abs() < 1e-12);
        assert_eq!(summarize_scores(&[]), Err(StatsError::EmptyScores));
        assert_eq!(summarize_scores(&[3, 6]), Err(StatsError::OutOfRangeScore(6)));
        assert_eq!(summarize_scores(&[4]).unwrap().sem, 0.0);
    }

    fn frame(names: &[&str]) -> ContextFrame {
        let mut f = ContextFrame::empty(0, 0);
        f.equipment = names.iter().map(|n| EquipmentObservation::named(n)).collect();
        f
    }

    #[test]
    fn six_classes_one_weak() {
        // Class F is seen in 2 of 5 frames; A-E always.
        let classes: Vec<String> = ["A", "B", "C", "D", "E", "F"].map(String::from).to_vec();
        let mut frames = Vec::new();
        let mut truth = GroundTruth::default();
        for i in 0..5 {
            let seen: Vec<&str> = if i < 2 { vec!["A", "B", "C", "D", "E", "F"] } else { vec!["A", "B", "C", "D", "E"] };
            frames.push(frame(&seen));
            truth.steps.push(1);
            truth.equipment.push(classes.clone());
        }
        let r = eval_recognition(&frames, &truth, &classes).unwrap();
        assert_eq!(r.per_class["F"], 0.4);
        let s = r.summary.unwrap();
        assert!((s.mean - 0.9).abs() < 1e-12);
        let var: f64 = (5.0 * 0.01 + 0.25) / 5.0;
        assert!((s.sem - var.sqrt() / 6f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn unseen_class_is_excluded() {
        let truth = GroundTruth {
            steps: vec![1],
            equipment: vec![vec!["A".into()]],
        };
        let r = eval_recognition(&[frame(&["A"])], &truth, &["A".into(), "Z".into()]).unwrap();
        assert_eq!(r.excluded, vec!["Z".to_string()]);
        assert_eq!(r.per_class["A"], 1.0);
        assert!(matches!(
            eval_recognition(&[], &truth, &[]),
            Err(HarnessError::LengthMismatch { .. })
        ));
    }
}

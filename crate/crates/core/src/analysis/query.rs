use serde::{Deserialize, Serialize};

use crate::backend::{with_retry, BackendError, ReasoningBackend};
use crate::text::{keyword_tokens, keywords_match};

use super::{AnalysisHistory, LogRecord};

pub const NO_RECORDS: &str = "no records available";

/// Weight of a question keyword matching a recorded parameter name, relative
/// to a match in the record summary or actions.
const PARAMETER_WEIGHT: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedAnswer {
    pub text: String,
    /// Sequence numbers of the records the answer relies on.
    #[serde(default)]
    pub citations: Vec<u64>,
}

/// Answer through `backend` (one retry), dropping citations of records that
/// do not exist.
pub fn answer_query(
    question: &str,
    history: &AnalysisHistory,
    backend: &dyn ReasoningBackend,
) -> Result<GroundedAnswer, BackendError> {
    let mut answer = with_retry(|| backend.answer_query(question, history))?;
    answer.citations.retain(|seq| history.get(*seq).is_some());
    answer.citations.dedup();
    Ok(answer)
}

/// `"step 5"` or `"step #5"` anywhere in the question.
fn asked_step(question: &str) -> Option<usize> {
    let lower = question.to_lowercase();
    let words: Vec<&str> = lower
        .split(|c: char| !(c.is_alphanumeric() || c == '#'))
        .filter(|w| !w.is_empty())
        .collect();
    words
        .windows(2)
        .find(|w| w[0] == "step")
        .and_then(|w| w[1].trim_start_matches('#').parse().ok())
}

fn describe_parameters(record: &LogRecord) -> String {
    record
        .key_parameters
        .iter()
        .map(|r| format!("{} {}", r.name, r.display_value()))
        .collect::<Vec<_>>()
        .join(", ")
}

fn score(question: &[String], record: &LogRecord) -> usize {
    let mut text_tokens = keyword_tokens(&record.summary);
    for a in &record.key_actions {
        text_tokens.extend(keyword_tokens(a));
    }
    let param_tokens: Vec<String> = record
        .key_parameters
        .iter()
        .flat_map(|r| keyword_tokens(&r.name))
        .collect();
    question
        .iter()
        .map(|q| {
            if param_tokens.iter().any(|t| keywords_match(q, t)) {
                PARAMETER_WEIGHT
            } else if text_tokens.iter().any(|t| keywords_match(q, t)) {
                1
            } else {
                0
            }
        })
        .sum()
}

/// Deterministic keyword retrieval over the log.
///
/// A question naming a step is answered from the latest record of that step.
/// Otherwise every record is scored by keyword overlap with the question,
/// parameter names counting double, and the latest best-scoring record is
/// quoted with its recorded parameters.
pub fn fallback_answer(question: &str, history: &AnalysisHistory) -> GroundedAnswer {
    let Some(latest) = history.last() else {
        return GroundedAnswer {
            text: NO_RECORDS.to_string(),
            citations: Vec::new(),
        };
    };

    if let Some(step) = asked_step(question) {
        if let Some(r) = history.records().iter().rev().find(|r| r.step == step) {
            return GroundedAnswer {
                text: format!(
                    "Step {} of {} was last logged at timestamp {} ms (record {}): {}",
                    r.step, r.sop_id, r.timestamp, r.seq, r.summary
                ),
                citations: vec![r.seq],
            };
        }
    }

    let q = keyword_tokens(question);
    let best = history
        .records()
        .iter()
        .map(|r| (score(&q, r), r))
        .filter(|(s, _)| *s > 0)
        // max_by_key keeps the last maximum, i.e. the latest record.
        .max_by_key(|(s, _)| *s)
        .map(|(_, r)| r);

    match best {
        Some(r) => {
            let params = describe_parameters(r);
            let text = if params.is_empty() {
                format!("Record {} (step {}, {} ms): {}", r.seq, r.step, r.timestamp, r.summary)
            } else {
                format!(
                    "Record {} (step {}, {} ms): you set {}. {}",
                    r.seq, r.step, r.timestamp, params, r.summary
                )
            };
            GroundedAnswer {
                text,
                citations: vec![r.seq],
            }
        }
        None => GroundedAnswer {
            text: format!(
                "Nothing in the log matches that question. Latest record {} (step {}, {} ms): {}",
                latest.seq, latest.step, latest.timestamp, latest.summary
            ),
            citations: vec![latest.seq],
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::append_record;
    use crate::perception::{ContextFrame, EquipmentObservation, FrameDescription, Reading};
    use crate::sop::SopAtlas;
    use crate::tracker::ConfirmedStep;

    fn history() -> AnalysisHistory {
        let atlas = SopAtlas::bundled();
        let doc = atlas.lookup("rie").unwrap();
        let mut h = AnalysisHistory::new();
        for step in 1..=6usize {
            let readings = if step == 4 {
                vec![Reading::parse("Time", "30 s"), Reading::parse("RF Power", "50 W")]
            } else {
                vec![]
            };
            let frame = ContextFrame::from_description(
                step as u64,
                step as u64 * 1000,
                FrameDescription {
                    equipment: vec![EquipmentObservation {
                        name: "RF power supply".into(),
                        position: String::new(),
                        readings,
                    }],
                    ..Default::default()
                },
            );
            let c = ConfirmedStep::human(step as u64, step);
            append_record(&mut h, &c, &frame, 0.8, doc, step as u64 * 1000).unwrap();
        }
        h
    }

    #[test]
    fn etch_time_question_cites_step_four() {
        let a = fallback_answer("did I set the etch time?", &history());
        assert!(a.text.contains("30 s"), "{}", a.text);
        assert_eq!(a.citations, vec![4]);
    }

    #[test]
    fn step_question_cites_timestamp() {
        let a = fallback_answer("when did step 5 finish?", &history());
        assert_eq!(a.citations, vec![5]);
        assert!(a.text.contains("5000"));
    }

    #[test]
    fn empty_history() {
        let a = fallback_answer("anything?", &AnalysisHistory::new());
        assert_eq!(a.text, NO_RECORDS);
        assert!(a.citations.is_empty());
    }

    #[test]
    fn unmatched_question_cites_latest() {
        let a = fallback_answer("zebra?", &history());
        assert_eq!(a.citations, vec![6]);
    }

    struct Liar;

    impl ReasoningBackend for Liar {
        fn select_sops(&self, _: &str, _: &crate::sop::SopAtlas) -> Result<Vec<String>, BackendError> {
            unreachable!()
        }
        fn propose_inventory(&self, _: &crate::sop::SopDoc) -> Result<Vec<String>, BackendError> {
            unreachable!()
        }
        fn propose_tracking_plan(
            &self,
            _: &crate::sop::SopDoc,
        ) -> Result<Option<crate::planner::TrackingProposal>, BackendError> {
            unreachable!()
        }
        fn answer_query(&self, _: &str, _: &AnalysisHistory) -> Result<GroundedAnswer, BackendError> {
            Ok(GroundedAnswer {
                text: "see records".into(),
                citations: vec![2, 99, 0],
            })
        }
    }

    #[test]
    fn nonexistent_citations_are_dropped() {
        let a = answer_query("q", &history(), &Liar).unwrap();
        assert_eq!(a.citations, vec![2]);
    }
}

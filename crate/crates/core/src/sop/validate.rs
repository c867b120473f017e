use std::collections::BTreeSet;

use serde::Serialize;

use super::{SopDoc, Setpoint};
use crate::text::casefold;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// Field path, e.g. `steps[2].expected_equipment`.
    pub location: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }

    fn push(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            location: location.into(),
            message: message.into(),
        });
    }
}

/// Check every SopDoc / SopStep / ParameterSpec invariant. Violations are
/// collected, never raised.
pub fn validate_sop(doc: &SopDoc) -> ValidationReport {
    let mut report = ValidationReport::default();

    if doc.id.trim().is_empty() {
        report.push("id", "id must be non-empty");
    }
    if doc.steps.is_empty() {
        report.push("steps", "steps non-empty");
    }

    let mut names = BTreeSet::new();
    for (i, name) in doc.equipment.iter().enumerate() {
        if !names.insert(casefold(name)) {
            report.push(
                format!("equipment[{i}]"),
                format!("duplicate equipment name `{name}`"),
            );
        }
    }

    let mut seen = BTreeSet::new();
    for (pos, step) in doc.steps.iter().enumerate() {
        let loc = format!("steps[{pos}]");
        if !seen.insert(step.index) {
            report.push(
                format!("{loc}.index"),
                format!("duplicate step index {}", step.index),
            );
        } else if step.index != pos + 1 {
            report.push(
                format!("{loc}.index"),
                format!(
                    "step indices must be contiguous 1..N in order; found {} at position {}",
                    step.index,
                    pos + 1
                ),
            );
        }
        for item in &step.expected_equipment {
            if !names.contains(&casefold(item)) {
                report.push(
                    format!("{loc}.expected_equipment"),
                    format!(
                        "step {} references `{item}` which is not in the equipment list",
                        step.index
                    ),
                );
            }
        }
        for (j, param) in step.params.iter().enumerate() {
            let ploc = format!("{loc}.params[{j}]");
            if param.name.trim().is_empty() {
                report.push(format!("{ploc}.name"), "parameter name must be non-empty");
            }
            match &param.expected {
                Setpoint::Numeric {
                    value,
                    unit,
                    tolerance,
                } => {
                    if !value.is_finite() {
                        report.push(format!("{ploc}.expected"), "expected value must be finite");
                    }
                    if unit.trim().is_empty() {
                        report.push(format!("{ploc}.unit"), "numeric parameter needs a unit");
                    }
                    if !(tolerance.is_finite() && *tolerance >= 0.0) {
                        report.push(format!("{ploc}.tolerance"), "tolerance must be >= 0");
                    }
                }
                Setpoint::Enum(t) | Setpoint::Indicator(t) => {
                    if t.trim().is_empty() {
                        report.push(format!("{ploc}.expected"), "expected token must be non-empty");
                    }
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sop::{ParameterSpec, SopStep};

    fn doc() -> SopDoc {
        SopDoc {
            id: "d".into(),
            title: "D".into(),
            version: 1,
            equipment: vec!["Hot plate".into(), "Timer".into()],
            steps: vec![
                SopStep {
                    index: 1,
                    instruction: "Heat".into(),
                    expected_equipment: vec!["hot plate".into()],
                    params: vec![ParameterSpec::numeric("temperature", 95.0, "°C", 2.0)],
                },
                SopStep {
                    index: 2,
                    instruction: "Wait".into(),
                    expected_equipment: vec!["Timer".into()],
                    params: vec![],
                },
            ],
        }
    }

    #[test]
    fn valid_doc_has_empty_report() {
        assert!(validate_sop(&doc()).is_empty());
    }

    #[test]
    fn unknown_equipment_names_step_and_token() {
        let mut d = doc();
        d.steps[1].expected_equipment.push("Centrifuge".into());
        let report = validate_sop(&d);
        assert_eq!(report.len(), 1);
        let v = &report.violations[0];
        assert_eq!(v.location, "steps[1].expected_equipment");
        assert!(v.message.contains("step 2") && v.message.contains("Centrifuge"));
    }

    #[test]
    fn empty_steps() {
        let mut d = doc();
        d.steps.clear();
        let report = validate_sop(&d);
        assert_eq!(report.len(), 1);
        assert_eq!(report.violations[0].message, "steps non-empty");
    }

    #[test]
    fn gaps_duplicates_and_bad_params_all_reported() {
        let mut d = doc();
        d.equipment.push("TIMER".into());
        d.steps[1].index = 3;
        d.steps[0].params.push(ParameterSpec::numeric("power", 50.0, " ", -1.0));
        let report = validate_sop(&d);
        let msgs: Vec<_> = report.violations.iter().map(|v| v.message.as_str()).collect();
        assert_eq!(report.len(), 4, "{msgs:?}");
    }
}

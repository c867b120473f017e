use serde::{Deserialize, Serialize};

use crate::perception::{ContextFrame, Reading, ReadingValue};
use crate::sop::{ParameterSpec, Setpoint, SopStep};
use crate::text::{casefold, param_key};

/// Slack on tolerance comparisons so that decimal readings such as 6.4
/// against 6.2 ± 0.2 are not flagged by float rounding.
const TOLERANCE_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlertKind {
    ParameterMismatch,
    SequenceDeviation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub kind: AlertKind,
    pub step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameter: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed: Option<Reading>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<ParameterSpec>,
    #[serde(default)]
    pub unit_disagreement: bool,
    pub message: String,
}

impl Alert {
    pub fn sequence_deviation(step: usize, message: String) -> Self {
        Alert {
            kind: AlertKind::SequenceDeviation,
            step,
            parameter: None,
            observed: None,
            expected: None,
            unit_disagreement: false,
            message,
        }
    }
}

/// Outcome of checking one spec against the frame's readings.
enum Check<'a> {
    Ok,
    Absent,
    Mismatch(&'a Reading),
    UnitDisagreement(&'a Reading),
}

fn check<'a>(spec: &ParameterSpec, readings: &[&'a Reading]) -> Check<'a> {
    let key = param_key(&spec.name);
    let mut named = readings.iter().copied().filter(|r| param_key(&r.name) == key);
    let Some(first) = named.clone().next() else {
        return Check::Absent;
    };
    match &spec.expected {
        Setpoint::Numeric {
            value,
            unit,
            tolerance,
        } => {
            let unit = casefold(unit);
            let Some(reading) = named.find(|r| casefold(&r.unit) == unit) else {
                return Check::UnitDisagreement(first);
            };
            match reading.value {
                ReadingValue::Number(v) if (v - value).abs() <= tolerance + TOLERANCE_EPSILON => {
                    Check::Ok
                }
                _ => Check::Mismatch(reading),
            }
        }
        Setpoint::Enum(expected) | Setpoint::Indicator(expected) => {
            if casefold(&first.value.to_string()) == casefold(expected) {
                Check::Ok
            } else {
                Check::Mismatch(first)
            }
        }
    }
}

/// One alert per parameter of `step` whose reading in `frame` is out of
/// tolerance, has the wrong token, or is in a different unit. Parameters
/// without a reading are not checked.
pub fn detect_errors(frame: &ContextFrame, step: &SopStep) -> Vec<Alert> {
    let readings: Vec<&Reading> = frame.readings().collect();
    step.params
        .iter()
        .filter_map(|spec| {
            let (reading, unit_disagreement) = match check(spec, &readings) {
                Check::Ok | Check::Absent => return None,
                Check::Mismatch(r) => (r, false),
                Check::UnitDisagreement(r) => (r, true),
            };
            let message = if unit_disagreement {
                format!(
                    "{} reads {} but step {} specifies {} (unit disagreement)",
                    reading.name,
                    reading.display_value(),
                    step.index,
                    spec.describe_expected()
                )
            } else {
                format!(
                    "{} is set to {}; step {} requires {}",
                    reading.name,
                    reading.display_value(),
                    step.index,
                    spec.describe_expected()
                )
            };
            Some(Alert {
                kind: AlertKind::ParameterMismatch,
                step: step.index,
                parameter: Some(spec.name.clone()),
                observed: Some(reading.clone()),
                expected: Some(spec.clone()),
                unit_disagreement,
                message,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::{EquipmentObservation, FrameDescription};
    use crate::sop::SopAtlas;

    fn frame(readings: Vec<Reading>) -> ContextFrame {
        ContextFrame::from_description(
            0,
            0,
            FrameDescription {
                equipment: vec![EquipmentObservation {
                    name: "RF power supply".into(),
                    position: String::new(),
                    readings,
                }],
                ..Default::default()
            },
        )
    }

    fn step(sop: &str, index: usize) -> SopStep {
        SopAtlas::bundled().lookup(sop).unwrap().step(index).unwrap().clone()
    }

    #[test]
    fn wrong_rie_settings_raise_two_alerts() {
        let f = frame(vec![
            Reading::parse("RF Power", "100 W"),
            Reading::parse("Time", "10 s"),
        ]);
        let alerts = detect_errors(&f, &step("rie", 4));
        let params: Vec<&str> = alerts.iter().filter_map(|a| a.parameter.as_deref()).collect();
        assert_eq!(params, vec!["time", "rf_power"]);
        assert!(alerts.iter().all(|a| a.kind == AlertKind::ParameterMismatch && !a.unit_disagreement));
        assert!(alerts[1].message.contains("100 W") && alerts[1].message.contains("50 W"));
    }

    #[test]
    fn exact_and_within_tolerance_are_quiet() {
        let f = frame(vec![Reading::parse("RF Power", "50 W"), Reading::parse("Time", "30 s")]);
        assert!(detect_errors(&f, &step("rie", 4)).is_empty());
        let f = frame(vec![Reading::parse("Temperature", "96 °C")]);
        assert!(detect_errors(&f, &step("spin_coating", 6)).is_empty());
        let f = frame(vec![Reading::parse("Expose time", "6.4 s")]);
        assert!(detect_errors(&f, &step("patterning", 2)).is_empty());
    }

    #[test]
    fn missing_reading_is_not_an_error() {
        let f = frame(vec![Reading::parse("RF Power", "50 W")]);
        assert!(detect_errors(&f, &step("rie", 4)).is_empty());
    }

    #[test]
    fn unit_disagreement_is_flagged() {
        let f = frame(vec![Reading::parse("Time", "0.5 min")]);
        let alerts = detect_errors(&f, &step("rie", 4));
        assert_eq!(alerts.len(), 1);
        assert!(alerts[0].unit_disagreement);
    }

    #[test]
    fn indicator_tokens_compare_case_insensitively() {
        let s = step("patterning", 1);
        let ok = frame(vec![Reading::parse("Load indicator", "Green On")]);
        assert!(detect_errors(&ok, &s).is_empty());
        let off = frame(vec![Reading::parse("Load indicator", "Red")]);
        assert_eq!(detect_errors(&off, &s).len(), 1);
    }
}

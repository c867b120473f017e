//! Standard operating procedure documents: types, file parsing, invariant
//! validation and the versioned atlas the planner composes protocols from.

mod atlas;
mod parse;
mod validate;

use serde::{Deserialize, Serialize};

pub use atlas::{atlas_lookup, SopAtlas};
pub use parse::{parse_sop, serialize_sop};
pub use validate::{validate_sop, ValidationReport, Violation};

use crate::text::casefold;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SopError {
    #[error("malformed SOP document at line {line}, column {column}: {message}")]
    MalformedDocument {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("SOP schema violation at `{field}`: {message}")]
    SchemaViolation { field: String, message: String },
    #[error("unknown SOP `{0}`")]
    UnknownSop(String),
    #[error("failed to read SOP file {path}: {message}")]
    Io { path: String, message: String },
}

/// How a parameter setpoint is checked against observed readings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamMode {
    Numeric,
    Enum,
    Indicator,
}

/// Expected value of a parameter. Numeric setpoints carry a unit and an
/// absolute tolerance in that unit; enum and indicator setpoints are tokens
/// compared case-insensitively.
#[derive(Debug, Clone, PartialEq)]
pub enum Setpoint {
    Numeric {
        value: f64,
        unit: String,
        tolerance: f64,
    },
    Enum(String),
    Indicator(String),
}

/// A machine-checkable setpoint attached to one SOP step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "RawParam", try_from = "RawParam")]
pub struct ParameterSpec {
    pub name: String,
    pub expected: Setpoint,
}

impl ParameterSpec {
    pub fn numeric(name: &str, value: f64, unit: &str, tolerance: f64) -> Self {
        ParameterSpec {
            name: name.to_string(),
            expected: Setpoint::Numeric {
                value,
                unit: unit.to_string(),
                tolerance,
            },
        }
    }

    pub fn token(name: &str, mode: ParamMode, value: &str) -> Self {
        let expected = match mode {
            ParamMode::Indicator => Setpoint::Indicator(value.to_string()),
            _ => Setpoint::Enum(value.to_string()),
        };
        ParameterSpec {
            name: name.to_string(),
            expected,
        }
    }

    pub fn mode(&self) -> ParamMode {
        match self.expected {
            Setpoint::Numeric { .. } => ParamMode::Numeric,
            Setpoint::Enum(_) => ParamMode::Enum,
            Setpoint::Indicator(_) => ParamMode::Indicator,
        }
    }

    /// Unit of a numeric setpoint, empty for token setpoints.
    pub fn unit(&self) -> &str {
        match &self.expected {
            Setpoint::Numeric { unit, .. } => unit,
            _ => "",
        }
    }

    /// Human-readable expected value, e.g. `50 W` or `50 W ± 2`.
    pub fn describe_expected(&self) -> String {
        match &self.expected {
            Setpoint::Numeric {
                value,
                unit,
                tolerance,
            } => {
                if *tolerance > 0.0 {
                    format!("{} {} ± {}", value, unit, tolerance)
                } else {
                    format!("{} {}", value, unit)
                }
            }
            Setpoint::Enum(t) | Setpoint::Indicator(t) => t.clone(),
        }
    }
}

/// Flat on-disk form of a [`ParameterSpec`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParam {
    name: String,
    mode: ParamMode,
    expected: RawValue,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    unit: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tolerance: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum RawValue {
    Number(f64),
    Text(String),
}

impl From<ParameterSpec> for RawParam {
    fn from(p: ParameterSpec) -> Self {
        let mode = p.mode();
        match p.expected {
            Setpoint::Numeric {
                value,
                unit,
                tolerance,
            } => RawParam {
                name: p.name,
                mode,
                expected: RawValue::Number(value),
                unit: Some(unit),
                tolerance: Some(tolerance),
            },
            Setpoint::Enum(t) | Setpoint::Indicator(t) => RawParam {
                name: p.name,
                mode,
                expected: RawValue::Text(t),
                unit: None,
                tolerance: None,
            },
        }
    }
}

impl TryFrom<RawParam> for ParameterSpec {
    type Error = String;

    fn try_from(raw: RawParam) -> Result<Self, Self::Error> {
        let expected = match (raw.mode, raw.expected) {
            (ParamMode::Numeric, RawValue::Number(value)) => Setpoint::Numeric {
                value,
                unit: raw
                    .unit
                    .ok_or_else(|| format!("numeric parameter `{}` needs a unit", raw.name))?,
                tolerance: raw.tolerance.unwrap_or(0.0),
            },
            (ParamMode::Numeric, RawValue::Text(t)) => {
                return Err(format!(
                    "numeric parameter `{}` has non-numeric expected value `{t}`",
                    raw.name
                ))
            }
            (mode, RawValue::Text(t)) => {
                if raw.tolerance.is_some() {
                    return Err(format!(
                        "tolerance is only allowed on numeric parameters (`{}`)",
                        raw.name
                    ));
                }
                if mode == ParamMode::Indicator {
                    Setpoint::Indicator(t)
                } else {
                    Setpoint::Enum(t)
                }
            }
            (_, RawValue::Number(v)) => {
                return Err(format!(
                    "token parameter `{}` has numeric expected value {v}",
                    raw.name
                ))
            }
        };
        Ok(ParameterSpec {
            name: raw.name,
            expected,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SopStep {
    /// 1-based position within the procedure.
    pub index: usize,
    pub instruction: String,
    #[serde(default)]
    pub expected_equipment: Vec<String>,
    #[serde(default)]
    pub params: Vec<ParameterSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SopDoc {
    pub id: String,
    pub title: String,
    pub version: u32,
    pub equipment: Vec<String>,
    pub steps: Vec<SopStep>,
}

impl SopDoc {
    pub fn step_count(&self) -> usize {
        self.steps.len()
    }

    /// Step with the given 1-based index.
    pub fn step(&self, index: usize) -> Option<&SopStep> {
        self.steps.iter().find(|s| s.index == index)
    }

    pub fn has_equipment(&self, name: &str) -> bool {
        let key = casefold(name);
        self.equipment.iter().any(|e| casefold(e) == key)
    }
}

//! Context agent boundary: raw frames in, structured [`ContextFrame`]s out,
//! with equipment names grounded in the experiment plan inventory.

use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{with_retry, BackendError, PerceptionBackend};
use crate::planner::{ExperimentPlan, StepTrackingPlan};
use crate::sop::SopAtlas;
use crate::text::{casefold, word_tokens};

pub const UNKNOWN_EQUIPMENT: &str = "unknown";
pub const NONE_OBSERVED: &str = "none observed";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PerceptionError {
    #[error("frame {frame_index} dropped: {reason}")]
    FrameDropped { frame_index: u64, reason: BackendError },
    #[error("malformed recording at line {line}: {message}")]
    MalformedRecording { line: usize, message: String },
    #[error("cannot read recording {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FramePayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawFrame {
    /// 0-based, strictly increasing within a recording.
    pub frame_index: u64,
    /// Milliseconds since session start.
    pub timestamp: u64,
    #[serde(default)]
    pub payload: FramePayload,
    /// Free-text gaze / hand annotations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReadingValue {
    Number(f64),
    Token(String),
}

impl fmt::Display for ReadingValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReadingValue::Number(v) => write!(f, "{v}"),
            ReadingValue::Token(t) => f.write_str(t),
        }
    }
}

/// One instrument reading, e.g. `RF Power = 100 W` or `Load indicator = Green On`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reading {
    pub name: String,
    pub value: ReadingValue,
    #[serde(default)]
    pub unit: String,
}

impl Reading {
    pub fn number(name: &str, value: f64, unit: &str) -> Self {
        Reading {
            name: name.into(),
            value: ReadingValue::Number(value),
            unit: unit.into(),
        }
    }

    pub fn token(name: &str, value: &str) -> Self {
        Reading {
            name: name.into(),
            value: ReadingValue::Token(value.into()),
            unit: String::new(),
        }
    }

    /// Parse a display string: `"50 W"` and `"~6.2 s"` become numbers with a
    /// unit, anything else (`"Green On"`) is kept as a token.
    pub fn parse(name: &str, raw: &str) -> Self {
        let trimmed = raw.trim();
        let body = trimmed.trim_start_matches(['~', '≈']).trim_start();
        let split = body
            .find(|c: char| !(c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E')))
            .unwrap_or(body.len());
        let (num, unit) = body.split_at(split);
        // "e"/"E" alone would swallow the start of a unit like "eV".
        match num.parse::<f64>() {
            Ok(v) if v.is_finite() && !num.is_empty() => Reading::number(name, v, unit.trim()),
            _ => Reading::token(name, trimmed),
        }
    }

    pub fn display_value(&self) -> String {
        if self.unit.is_empty() {
            self.value.to_string()
        } else {
            format!("{} {}", self.value, self.unit)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquipmentObservation {
    /// Inventory name, or `"unknown"`.
    pub name: String,
    #[serde(default)]
    pub position: String,
    #[serde(default)]
    pub readings: Vec<Reading>,
}

impl EquipmentObservation {
    pub fn named(name: &str) -> Self {
        EquipmentObservation {
            name: name.into(),
            position: String::new(),
            readings: Vec::new(),
        }
    }
}

/// What a perception backend reports for one frame, before grounding.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameDescription {
    #[serde(default)]
    pub equipment: Vec<EquipmentObservation>,
    #[serde(default)]
    pub environment: String,
    #[serde(default)]
    pub action: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextFrame {
    pub frame_index: u64,
    pub timestamp: u64,
    #[serde(default)]
    pub equipment: Vec<EquipmentObservation>,
    pub environment: String,
    pub action: String,
}

impl ContextFrame {
    pub fn from_description(frame_index: u64, timestamp: u64, d: FrameDescription) -> Self {
        let or_none = |s: String| {
            if s.trim().is_empty() {
                NONE_OBSERVED.to_string()
            } else {
                s
            }
        };
        ContextFrame {
            frame_index,
            timestamp,
            equipment: d.equipment,
            environment: or_none(d.environment),
            action: or_none(d.action),
        }
    }

    /// An observation-free frame, used as a placeholder.
    pub fn empty(frame_index: u64, timestamp: u64) -> Self {
        Self::from_description(frame_index, timestamp, FrameDescription::default())
    }

    pub fn readings(&self) -> impl Iterator<Item = &Reading> {
        self.equipment.iter().flat_map(|e| e.readings.iter())
    }

    /// Replace every equipment name with its inventory match.
    pub fn normalize(&mut self, plan: &ExperimentPlan) {
        for obs in &mut self.equipment {
            obs.name = normalize_equipment_name(&obs.name, plan);
        }
    }
}

/// Map a free-form equipment name onto the plan inventory.
///
/// An exact case-insensitive match wins outright. Otherwise the inventory
/// entry sharing the most word tokens (length >= 3) with `raw` is chosen,
/// ties going to the longer entry and then the lexicographically smaller
/// one. No shared token yields `"unknown"`.
pub fn normalize_equipment_name(raw: &str, plan: &ExperimentPlan) -> String {
    let key = casefold(raw);
    if let Some(exact) = plan.inventory.iter().find(|i| casefold(i) == key) {
        return exact.clone();
    }
    let raw_tokens = word_tokens(raw);
    if raw_tokens.is_empty() || key == UNKNOWN_EQUIPMENT {
        return UNKNOWN_EQUIPMENT.to_string();
    }
    plan.inventory
        .iter()
        .map(|item| {
            let mut item_tokens = word_tokens(item);
            item_tokens.sort();
            item_tokens.dedup();
            let overlap = item_tokens.iter().filter(|t| raw_tokens.contains(t)).count();
            (item, overlap)
        })
        .filter(|(_, overlap)| *overlap > 0)
        .min_by(|(a, oa), (b, ob)| {
            ob.cmp(oa)
                .then(b.chars().count().cmp(&a.chars().count()))
                .then(a.cmp(b))
        })
        .map(|(item, _)| item.clone())
        .unwrap_or_else(|| UNKNOWN_EQUIPMENT.to_string())
}

/// Describe one frame through `backend` (one retry), then ground it in the
/// plan. A frame the backend cannot describe is dropped, never invented.
pub fn contextualize(
    frame: &RawFrame,
    plan: &ExperimentPlan,
    backend: &dyn PerceptionBackend,
) -> Result<ContextFrame, PerceptionError> {
    let description = with_retry(|| backend.describe(frame, plan)).map_err(|reason| {
        PerceptionError::FrameDropped {
            frame_index: frame.frame_index,
            reason,
        }
    })?;
    let mut ctx = ContextFrame::from_description(frame.frame_index, frame.timestamp, description);
    ctx.normalize(plan);
    Ok(ctx)
}

/// A frame as stored in a recording: either raw (needs perception) or
/// already contextualized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RecordedFrame {
    Raw(RawFrame),
    Context(ContextFrame),
}

impl RecordedFrame {
    pub fn frame_index(&self) -> u64 {
        match self {
            RecordedFrame::Raw(f) => f.frame_index,
            RecordedFrame::Context(f) => f.frame_index,
        }
    }

    pub fn timestamp(&self) -> u64 {
        match self {
            RecordedFrame::Raw(f) => f.timestamp,
            RecordedFrame::Context(f) => f.timestamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingHeader {
    pub sop_id: String,
    pub experiment_plan: ExperimentPlan,
    pub tracking_plan: StepTrackingPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub header: RecordingHeader,
    pub frames: Vec<RecordedFrame>,
}

impl Recording {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Serialize as line-delimited JSON: header line, then one frame per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for f in &self.frames {
            out.push_str(&serde_json::to_string(f).expect("frame serializes"));
            out.push('\n');
        }
        out
    }

    /// Parse line-delimited JSON and check header and frame-order invariants
    /// against `atlas`.
    pub fn parse_jsonl(text: &str, atlas: &SopAtlas) -> Result<Self, PerceptionError> {
        Self::parse_lines(text.lines().map(|l| Ok(l.to_string())), atlas)
    }

    fn parse_lines(
        lines: impl Iterator<Item = std::io::Result<String>>,
        atlas: &SopAtlas,
    ) -> Result<Self, PerceptionError> {
        let malformed = |line: usize, message: String| PerceptionError::MalformedRecording {
            line,
            message,
        };
        let mut header: Option<RecordingHeader> = None;
        let mut frames: Vec<RecordedFrame> = Vec::new();
        for (n, line) in lines.enumerate() {
            let lineno = n + 1;
            let line = line.map_err(|e| malformed(lineno, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            match &header {
                None => {
                    let h: RecordingHeader =
                        serde_json::from_str(&line).map_err(|e| malformed(lineno, e.to_string()))?;
                    if !atlas.contains(&h.sop_id) {
                        return Err(malformed(lineno, format!("unknown SOP `{}`", h.sop_id)));
                    }
                    header = Some(h);
                }
                Some(_) => {
                    let f: RecordedFrame =
                        serde_json::from_str(&line).map_err(|e| malformed(lineno, e.to_string()))?;
                    if let Some(prev) = frames.last() {
                        if f.frame_index() <= prev.frame_index() {
                            return Err(malformed(
                                lineno,
                                format!(
                                    "frame_index {} does not follow {}",
                                    f.frame_index(),
                                    prev.frame_index()
                                ),
                            ));
                        }
                        if f.timestamp() < prev.timestamp() {
                            return Err(malformed(
                                lineno,
                                format!("timestamp {} goes backwards", f.timestamp()),
                            ));
                        }
                    }
                    frames.push(f);
                }
            }
        }
        let header = header.ok_or_else(|| malformed(1, "missing header record".into()))?;
        Ok(Recording { header, frames })
    }
}

/// Load a recording, resolving its SOP against the bundled atlas.
pub fn load_recording(path: impl AsRef<Path>) -> Result<Recording, PerceptionError> {
    load_recording_with(path, &SopAtlas::bundled())
}

pub fn load_recording_with(
    path: impl AsRef<Path>,
    atlas: &SopAtlas,
) -> Result<Recording, PerceptionError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| PerceptionError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let recording = Recording::parse_lines(BufReader::new(file).lines(), atlas)?;
    tracing::debug!(path = %path.display(), frames = recording.len(), "loaded recording");
    Ok(recording)
}

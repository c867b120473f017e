use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::perception::{FrameDescription, RawFrame};
use crate::planner::ExperimentPlan;
use crate::tracker::RawPrediction;

use super::{BackendError, PerceptionBackend, PredictionBackend, PredictionRequest};

fn is_zero(n: &u32) -> bool {
    *n == 0
}

/// Scripted backend output for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRow {
    pub frame_index: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<FrameDescription>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<RawPrediction>,
    /// Leading `describe` attempts for this frame that time out.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub describe_failures: u32,
    /// Leading `predict` attempts for this frame that time out.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub predict_failures: u32,
}

impl ScriptRow {
    pub fn new(frame_index: u64) -> Self {
        ScriptRow {
            frame_index,
            context: None,
            prediction: None,
            describe_failures: 0,
            predict_failures: 0,
        }
    }
}

/// Script rows keyed by frame index. Serialized as a list of rows, and on
/// disk as JSON lines.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<ScriptRow>", into = "Vec<ScriptRow>")]
pub struct ScriptTable {
    rows: BTreeMap<u64, ScriptRow>,
}

impl From<Vec<ScriptRow>> for ScriptTable {
    fn from(rows: Vec<ScriptRow>) -> Self {
        ScriptTable {
            rows: rows.into_iter().map(|r| (r.frame_index, r)).collect(),
        }
    }
}

impl From<ScriptTable> for Vec<ScriptRow> {
    fn from(t: ScriptTable) -> Self {
        t.rows.into_values().collect()
    }
}

impl ScriptTable {
    pub fn get(&self, frame_index: u64) -> Option<&ScriptRow> {
        self.rows.get(&frame_index)
    }

    pub fn insert(&mut self, row: ScriptRow) {
        self.rows.insert(row.frame_index, row);
    }

    pub fn rows(&self) -> impl Iterator<Item = &ScriptRow> {
        self.rows.values()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut rows = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: ScriptRow = serde_json::from_str(&line).map_err(|e| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("script line {}: {e}", n + 1),
                )
            })?;
            rows.push(row);
        }
        Ok(rows.into())
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for row in self.rows.values() {
            serde_json::to_writer(&mut out, row)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Call {
    Describe,
    Predict,
}

/// Table-driven perception and prediction backend keyed by frame index.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    table: ScriptTable,
    attempts: Mutex<BTreeMap<(u64, Call), u32>>,
}

impl ScriptedBackend {
    pub fn new(table: ScriptTable) -> Self {
        ScriptedBackend {
            table,
            attempts: Mutex::default(),
        }
    }

    pub fn table(&self) -> &ScriptTable {
        &self.table
    }

    /// Counts the attempt and reports whether it should fail.
    fn should_fail(&self, frame_index: u64, call: Call, failures: u32) -> bool {
        if failures == 0 {
            return false;
        }
        let mut attempts = self.attempts.lock().expect("attempt counter poisoned");
        let n = attempts.entry((frame_index, call)).or_insert(0);
        *n += 1;
        *n <= failures
    }
}

impl PerceptionBackend for ScriptedBackend {
    fn describe(
        &self,
        frame: &RawFrame,
        _plan: &ExperimentPlan,
    ) -> Result<FrameDescription, BackendError> {
        let row = self
            .table
            .get(frame.frame_index)
            .ok_or(BackendError::NotScripted(frame.frame_index))?;
        if self.should_fail(frame.frame_index, Call::Describe, row.describe_failures) {
            return Err(BackendError::Timeout);
        }
        row.context
            .clone()
            .ok_or(BackendError::NotScripted(frame.frame_index))
    }
}

impl PredictionBackend for ScriptedBackend {
    fn predict(&self, request: &PredictionRequest<'_>) -> Result<RawPrediction, BackendError> {
        let idx = request.frame.frame_index;
        let row = self.table.get(idx).ok_or(BackendError::NotScripted(idx))?;
        if self.should_fail(idx, Call::Predict, row.predict_failures) {
            return Err(BackendError::Timeout);
        }
        row.prediction.clone().ok_or(BackendError::NotScripted(idx))
    }
}

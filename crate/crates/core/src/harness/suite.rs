use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backend::ScriptTable;
use crate::perception::load_recording_with;
use crate::planner::PlannerConfig;
use crate::session::LogDocument;
use crate::sop::SopAtlas;

use super::{replay, session_config_for, AnswerPolicy, GroundTruth, HarnessError, Metrics};

/// Thresholds a replay must meet. Absent fields are not checked.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectations {
    /// Minimum step accuracy.
    pub step_accuracy: Option<f64>,
    pub hitl_count: Option<usize>,
    pub alerts: Option<usize>,
    pub confirmations: Option<usize>,
    pub max_runtime_ms: Option<u64>,
}

/// A replay case file. Paths are relative to the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayCase {
    pub name: String,
    pub recording: PathBuf,
    pub truth: PathBuf,
    pub script: PathBuf,
    #[serde(default = "default_answer")]
    pub answer: String,
    #[serde(default)]
    pub expect: Expectations,
}

fn default_answer() -> String {
    AnswerPolicy::Oracle.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub name: String,
    pub metrics: Metrics,
    pub runtime_ms: f64,
    /// Unmet expectations, empty on success.
    pub failures: Vec<String>,
}

impl CaseOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl Expectations {
    pub fn check(&self, m: &Metrics, runtime_ms: f64) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(min) = self.step_accuracy {
            if m.step_accuracy + 1e-12 < min {
                out.push(format!("step_accuracy {:.4} < {min}", m.step_accuracy));
            }
        }
        let exact = [
            ("hitl_count", self.hitl_count, m.hitl_count),
            ("alerts", self.alerts, m.alerts),
            ("confirmations", self.confirmations, m.confirmations),
        ];
        for (name, want, got) in exact {
            if let Some(want) = want {
                if want != got {
                    out.push(format!("{name} {got} != {want}"));
                }
            }
        }
        if let Some(max) = self.max_runtime_ms {
            if runtime_ms > max as f64 {
                out.push(format!("runtime {runtime_ms:.1} ms > {max} ms"));
            }
        }
        out
    }
}

/// A loaded case, ready to run.
#[derive(Debug, Clone)]
pub struct LoadedCase {
    pub case: ReplayCase,
    pub recording: crate::perception::Recording,
    pub truth: GroundTruth,
    pub script: ScriptTable,
    pub policy: AnswerPolicy,
}

impl ReplayCase {
    pub fn load(path: impl AsRef<Path>, atlas: &SopAtlas) -> Result<LoadedCase, HarnessError> {
        let path = path.as_ref();
        let io = |e: String| HarnessError::Io(format!("{}: {e}", path.display()));
        let text = std::fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        let case: ReplayCase = toml::from_str(&text).map_err(|e| io(e.to_string()))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let recording = load_recording_with(dir.join(&case.recording), atlas)
            .map_err(|e| io(e.to_string()))?;
        let truth = GroundTruth::load(dir.join(&case.truth))?;
        let script = ScriptTable::load_jsonl(dir.join(&case.script)).map_err(|e| io(e.to_string()))?;
        let policy = case.answer.parse().map_err(io)?;
        Ok(LoadedCase {
            case,
            recording,
            truth,
            script,
            policy,
        })
    }
}

impl LoadedCase {
    pub fn run(
        &self,
        atlas: &SopAtlas,
        planner: &PlannerConfig,
    ) -> Result<(CaseOutcome, LogDocument), HarnessError> {
        let start = Instant::now();
        let config = session_config_for(&self.recording, self.script.clone());
        let (metrics, log) = replay(&self.recording, &self.truth, config, self.policy, atlas, planner)?;
        let runtime_ms = start.elapsed().as_secs_f64() * 1e3;
        let failures = self.case.expect.check(&metrics, runtime_ms);
        Ok((
            CaseOutcome {
                name: self.case.name.clone(),
                metrics,
                runtime_ms,
                failures,
            },
            log,
        ))
    }
}

/// Every `*.toml` case in `dir`, sorted by file name.
pub fn suite_cases(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, HarnessError> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
    let mut cases: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    cases.sort();
    Ok(cases)
}

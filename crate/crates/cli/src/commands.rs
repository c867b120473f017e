use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use apex_core::backend::ScriptTable;
use apex_core::harness::{
    replay, session_config_for, suite_cases, synth_session, CaseOutcome, Expectations, ReplayCase,
    SynthSpec,
};
use apex_core::perception::load_recording_with;
use apex_core::{AnswerPolicy, GroundTruth, Metrics, PlannerConfig, SessionConfig, SopAtlas};
use serde::Serialize;

/// Atlas and planner config from `dir`, or the bundled ones.
pub fn load_atlas(dir: Option<&Path>) -> Result<(SopAtlas, PlannerConfig)> {
    let Some(dir) = dir else {
        return Ok((SopAtlas::bundled(), PlannerConfig::bundled()));
    };
    let atlas = SopAtlas::load_dir(dir).with_context(|| format!("loading SOPs from {}", dir.display()))?;
    let planner_path = dir.join("planner.toml");
    let planner = if planner_path.exists() {
        PlannerConfig::load(&planner_path).with_context(|| format!("loading {}", planner_path.display()))?
    } else {
        PlannerConfig::bundled()
    };
    Ok((atlas, planner))
}

pub struct ReplayArgs<'a> {
    pub recording: &'a Path,
    pub truth: &'a Path,
    pub config: Option<&'a Path>,
    pub script: Option<&'a Path>,
    pub answer: AnswerPolicy,
    pub out: Option<&'a Path>,
}

pub fn run_replay(args: &ReplayArgs<'_>, atlas: &SopAtlas, planner: &PlannerConfig) -> Result<Metrics> {
    let recording = load_recording_with(args.recording, atlas)
        .with_context(|| format!("reading {}", args.recording.display()))?;
    let truth = GroundTruth::load(args.truth)?;
    let config: SessionConfig = match (args.config, args.script) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        (None, Some(path)) => {
            let script = ScriptTable::load_jsonl(path).with_context(|| format!("reading {}", path.display()))?;
            session_config_for(&recording, script)
        }
        (None, None) => bail!("either --config or --script is required"),
    };
    let (metrics, log) = replay(&recording, &truth, config, args.answer, atlas, planner)?;
    if let Some(out) = args.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
        fs::write(out.join("log.json"), log.to_json())?;
    }
    Ok(metrics)
}

pub fn metrics_summary(m: &Metrics) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "frames         {} ({} dropped)", m.frames, m.dropped);
    let _ = writeln!(s, "step accuracy  {:.4}", m.step_accuracy);
    let _ = writeln!(s, "raw accuracy   {:.4} over {} predicted frames", m.raw_accuracy, m.predicted_frames);
    let _ = writeln!(s, "confirmations  {}", m.confirmations);
    let _ = writeln!(s, "clarifications {}", m.hitl_count);
    let _ = writeln!(s, "alerts         {}", m.alerts);
    if let Some(e) = &m.equipment_accuracy {
        let _ = writeln!(s, "equipment      {:.4} ± {:.4} over {} classes", e.mean, e.sem, e.n);
    }
    for (step, acc) in &m.per_step_accuracy {
        let _ = writeln!(s, "  step {step:>2}      {acc:.4}");
    }
    s
}

/// Write a synthetic session as a replay case under `out`. Returns the
/// case file path.
pub fn run_synth(
    sop: &str,
    frames_per_step: usize,
    flip: f64,
    seed: u64,
    out: &Path,
    atlas: &SopAtlas,
) -> Result<PathBuf> {
    if !(0.0..1.0).contains(&flip) {
        bail!("--flip must lie in [0, 1), got {flip}");
    }
    let doc = atlas.lookup(sop)?;
    let synth = synth_session(doc, &SynthSpec::new(frames_per_step, flip, seed));
    let name = format!("{sop}_f{frames_per_step}_p{flip}_s{seed}");
    fs::create_dir_all(out)?;
    let file = |ext: &str| PathBuf::from(format!("{name}.{ext}"));
    fs::write(out.join(file("rec.jsonl")), synth.recording.to_jsonl())?;
    fs::write(out.join(file("truth.json")), serde_json::to_string_pretty(&synth.truth)?)?;
    synth.script.write_jsonl(fs::File::create(out.join(file("script.jsonl")))?)?;
    let case = ReplayCase {
        name: name.clone(),
        recording: file("rec.jsonl"),
        truth: file("truth.json"),
        script: file("script.jsonl"),
        answer: AnswerPolicy::Oracle.to_string(),
        expect: Expectations::default(),
    };
    let path = out.join(file("toml"));
    fs::write(&path, toml::to_string(&case)?)?;
    Ok(path)
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub passed: bool,
    pub cases: Vec<CaseOutcome>,
}

pub fn run_bench(suite: &Path, atlas: &SopAtlas, planner: &PlannerConfig) -> Result<BenchReport> {
    let paths = suite_cases(suite)?;
    if paths.is_empty() {
        bail!("no *.toml cases in {}", suite.display());
    }
    let mut cases = Vec::with_capacity(paths.len());
    for path in paths {
        let case = ReplayCase::load(&path, atlas)?;
        let (outcome, _) = case.run(atlas, planner)?;
        cases.push(outcome);
    }
    Ok(BenchReport {
        passed: cases.iter().all(CaseOutcome::passed),
        cases,
    })
}

pub fn bench_table(report: &BenchReport) -> String {
    let width = report.cases.iter().map(|c| c.name.len()).max().unwrap_or(4).max(4);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<width$}  {:>6}  {:>8}  {:>8}  {:>5}  {:>4}  {:>6}  {:>8}  status",
        "case", "frames", "step_acc", "raw_acc", "conf", "hitl", "alerts", "ms"
    );
    for c in &report.cases {
        let m = &c.metrics;
        let _ = writeln!(
            s,
            "{:<width$}  {:>6}  {:>8.4}  {:>8.4}  {:>5}  {:>4}  {:>6}  {:>8.1}  {}",
            c.name,
            m.frames,
            m.step_accuracy,
            m.raw_accuracy,
            m.confirmations,
            m.hitl_count,
            m.alerts,
            c.runtime_ms,
            if c.passed() { "ok" } else { "FAIL" }
        );
        for f in &c.failures {
            let _ = writeln!(s, "    {f}");
        }
    }
    s
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{ScriptRow, ScriptTable};
use crate::perception::{
    ContextFrame, EquipmentObservation, Reading, RecordedFrame, Recording, RecordingHeader,
};
use crate::planner::{ExperimentPlan, PlanDefaults};
use crate::sop::{Setpoint, SopDoc, SopStep};
use crate::tracker::RawPrediction;

use super::GroundTruth;

pub const FRAME_PERIOD_MS: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub frames_per_step: usize,
    /// Probability that a frame's top prediction is a wrong step.
    pub flip_prob: f64,
    pub seed: u64,
    /// Confidence range of a correct top prediction.
    pub correct_range: (f64, f64),
    /// Confidence range of a flipped top prediction.
    pub flipped_range: (f64, f64),
    /// Tracking plan written to the recording header.
    pub plan: PlanDefaults,
}

impl SynthSpec {
    pub fn new(frames_per_step: usize, flip_prob: f64, seed: u64) -> Self {
        SynthSpec {
            frames_per_step,
            flip_prob,
            seed,
            correct_range: (0.75, 0.95),
            flipped_range: (0.4, 0.7),
            plan: PlanDefaults {
                memory_update_interval: 1,
                prediction_interval: 3,
                confidence_threshold: 0.8,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSession {
    pub recording: Recording,
    pub truth: GroundTruth,
    pub script: ScriptTable,
}

/// Confidences land on a 0.01 grid so fixtures stay readable.
fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    let v = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    (v * 100.0).round() / 100.0
}

fn other_step(rng: &mut ChaCha8Rng, n: usize, exclude: &[usize]) -> Option<usize> {
    let pool: Vec<usize> = (1..=n).filter(|s| !exclude.contains(s)).collect();
    (!pool.is_empty()).then(|| pool[rng.random_range(0..pool.len())])
}

fn readings_at_setpoints(step: &SopStep) -> Vec<Reading> {
    step.params
        .iter()
        .map(|p| match &p.expected {
            Setpoint::Numeric { value, unit, .. } => Reading::number(&p.name, *value, unit),
            Setpoint::Enum(t) | Setpoint::Indicator(t) => Reading::token(&p.name, t),
        })
        .collect()
}

fn frame_for(step: &SopStep, frame_index: u64) -> ContextFrame {
    let mut equipment: Vec<EquipmentObservation> = step
        .expected_equipment
        .iter()
        .map(|name| EquipmentObservation::named(name))
        .collect();
    let readings = readings_at_setpoints(step);
    if !readings.is_empty() {
        match equipment.first_mut() {
            Some(first) => first.readings = readings,
            None => equipment.push(EquipmentObservation {
                name: crate::perception::UNKNOWN_EQUIPMENT.into(),
                position: String::new(),
                readings,
            }),
        }
    }
    ContextFrame {
        frame_index,
        timestamp: frame_index * FRAME_PERIOD_MS,
        equipment,
        environment: "cleanroom bench".into(),
        action: format!("working on step {}", step.index),
    }
}

/// Generate a noisy session over `doc`.
///
/// Truth advances one step every `frames_per_step` frames. Each frame's top
/// prediction is the true step with probability `1 - flip_prob`, otherwise
/// a uniformly drawn other step. The runner-up is a neighbouring step when
/// the top is correct and the true step when it is not; the third candidate
/// is random. Everything is determined by the seed.
pub fn synth_session(doc: &SopDoc, spec: &SynthSpec) -> SynthSession {
    let n = doc.step_count();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut frames = Vec::with_capacity(n * spec.frames_per_step);
    let mut truth = GroundTruth::default();
    let mut script = ScriptTable::default();

    for step in &doc.steps {
        for _ in 0..spec.frames_per_step {
            let frame_index = frames.len() as u64;
            let true_step = step.index;
            let flipped = n > 1 && rng.random_bool(spec.flip_prob.clamp(0.0, 1.0));

            let mut ranked: Vec<(i64, f64)> = Vec::with_capacity(3);
            let top = if flipped {
                other_step(&mut rng, n, &[true_step]).expect("n > 1")
            } else {
                true_step
            };
            let top_conf = draw(&mut rng, if flipped { spec.flipped_range } else { spec.correct_range });
            ranked.push((top as i64, top_conf));

            let second = if flipped {
                Some(true_step)
            } else if true_step < n {
                Some(true_step + 1)
            } else if true_step > 1 {
                Some(true_step - 1)
            } else {
                None
            };
            if let Some(s) = second {
                ranked.push((s as i64, draw(&mut rng, (0.05, 0.35))));
                if let Some(third) = other_step(&mut rng, n, &[top, s]) {
                    ranked.push((third as i64, draw(&mut rng, (0.0, 0.1))));
                }
            }

            let mut row = ScriptRow::new(frame_index);
            row.prediction = Some(RawPrediction::ranked(&ranked));
            script.insert(row);
            frames.push(RecordedFrame::Context(frame_for(step, frame_index)));
            truth.steps.push(true_step);
            truth.equipment.push(step.expected_equipment.clone());
        }
    }

    let recording = Recording {
        header: RecordingHeader {
            sop_id: doc.id.clone(),
            experiment_plan: ExperimentPlan {
                sop_id: doc.id.clone(),
                steps: doc.steps.clone(),
                inventory: doc.equipment.clone(),
            },
            tracking_plan: spec.plan.to_plan(&doc.id),
        },
        frames,
    };
    SynthSession {
        recording,
        truth,
        script,
    }
}

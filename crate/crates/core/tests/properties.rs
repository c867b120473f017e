mod common;

use apex_core::analysis::detect_errors;
use apex_core::harness::{session_config_for, synth_session, SynthSpec};
use apex_core::perception::{
    normalize_equipment_name, ContextFrame, EquipmentObservation, Reading, ReadingValue,
};
use apex_core::planner::{clamp_proposal, PlanDefaults, TrackingProposal};
use apex_core::sop::{parse_sop, serialize_sop, ParameterSpec, ParamMode, Setpoint};
use apex_core::tracker::{aggregate_votes, StepVote, TrackerMemory};
use apex_core::{
    EventBody, ExperimentPlan, FramePrediction, PlannerConfig, Session, SessionInput, SopAtlas,
    SopDoc, SopStep,
};
use proptest::prelude::*;

fn name() -> impl Strategy<Value = String> {
    "[A-Za-z][A-Za-z0-9 _/()-]{0,24}"
}

fn param() -> impl Strategy<Value = ParameterSpec> {
    prop_oneof![
        (
            "[a-z_]{1,10}",
            -4000i32..4000,
            "[A-Za-z/°]{0,5}",
            0u32..20
        )
            .prop_map(|(n, v, u, t)| ParameterSpec::numeric(&n, v as f64 / 4.0, &u, t as f64 / 10.0)),
        ("[a-z_]{1,10}", "[A-Za-z ]{1,10}", any::<bool>()).prop_map(|(n, v, ind)| {
            let mode = if ind { ParamMode::Indicator } else { ParamMode::Enum };
            ParameterSpec::token(&n, mode, &v)
        }),
    ]
}

fn sop_doc() -> impl Strategy<Value = SopDoc> {
    (
        "[a-z_]{1,12}",
        "\\PC{0,30}",
        any::<u32>(),
        prop::collection::vec(name(), 0..6),
        prop::collection::vec(("\\PC{0,40}", prop::collection::vec(param(), 0..4)), 1..6),
    )
        .prop_map(|(id, title, version, equipment, steps)| SopDoc {
            id,
            title,
            version,
            steps: steps
                .into_iter()
                .enumerate()
                .map(|(i, (instruction, params))| SopStep {
                    index: i + 1,
                    instruction,
                    expected_equipment: equipment.iter().take(i % 3).cloned().collect(),
                    params,
                })
                .collect(),
            equipment,
        })
}

fn inventory_plan(inventory: Vec<String>) -> ExperimentPlan {
    ExperimentPlan {
        sop_id: "x".into(),
        steps: vec![],
        inventory,
    }
}

/// Ranked candidates on a 0.05 grid with distinct steps.
fn prediction(max_step: usize) -> BoxedStrategy<Vec<(usize, f64)>> {
    prop::collection::btree_set(1..=max_step, 1..=3.min(max_step))
        .prop_flat_map(|steps| {
            let n = steps.len();
            (
                Just(steps.into_iter().collect::<Vec<_>>()).prop_shuffle(),
                prop::collection::vec(0u32..=20, n),
            )
        })
        .prop_map(|(steps, confs)| {
            steps
                .into_iter()
                .zip(confs)
                .map(|(s, c)| (s, c as f64 * 0.05))
                .collect()
        })
        .boxed()
}

fn frame_prediction(i: u64, c: &[(usize, f64)]) -> FramePrediction {
    FramePrediction {
        frame_index: i,
        candidates: c
            .iter()
            .map(|&(step, confidence)| StepVote { step, confidence })
            .collect(),
        reasoning: String::new(),
    }
}

fn reading() -> impl Strategy<Value = Reading> {
    let names = prop::sample::select(vec!["time", "RF Power", "rf_power", "speed", "gas on"]);
    let units = prop::sample::select(vec!["s", "W", "w", "rpm", ""]);
    prop_oneof![
        (names.clone(), -200i32..200, units).prop_map(|(n, v, u)| Reading::number(n, v as f64 / 2.0, u)),
        (names, prop::sample::select(vec!["green", "GREEN", "off", "on"]))
            .prop_map(|(n, t)| Reading::token(n, t)),
    ]
}

fn spec_for_step() -> impl Strategy<Value = Vec<ParameterSpec>> {
    let numeric = (
        prop::sample::select(vec!["time", "rf_power", "speed"]),
        -100i32..100,
        prop::sample::select(vec!["s", "W", "rpm"]),
        0u32..10,
    )
        .prop_map(|(n, v, u, t)| ParameterSpec::numeric(n, v as f64, u, t as f64 / 2.0));
    let token = (prop::sample::select(vec!["gas_on", "speed"]), prop::sample::select(vec!["green", "on"]))
        .prop_map(|(n, v)| ParameterSpec::token(n, ParamMode::Indicator, v));
    prop::collection::vec(prop_oneof![numeric, token], 0..4)
}

fn key(s: &str) -> String {
    let mut out = String::new();
    for part in s.split(|c: char| !c.is_alphanumeric()).filter(|p| !p.is_empty()) {
        if !out.is_empty() {
            out.push('_');
        }
        out.push_str(&part.to_lowercase());
    }
    out
}

/// Names of the parameters that should raise an alert, by direct reading
/// of the checking rules.
fn expected_alerts(readings: &[Reading], params: &[ParameterSpec]) -> Vec<(String, bool)> {
    let mut out = Vec::new();
    for spec in params {
        let named: Vec<&Reading> = readings.iter().filter(|r| key(&r.name) == key(&spec.name)).collect();
        if named.is_empty() {
            continue;
        }
        match &spec.expected {
            Setpoint::Numeric { value, unit, tolerance } => {
                match named.iter().find(|r| r.unit.trim().to_lowercase() == unit.to_lowercase()) {
                    None => out.push((spec.name.clone(), true)),
                    Some(r) => {
                        let ok = matches!(r.value, ReadingValue::Number(v) if (v - value).abs() <= tolerance + 1e-9);
                        if !ok {
                            out.push((spec.name.clone(), false));
                        }
                    }
                }
            }
            Setpoint::Enum(t) | Setpoint::Indicator(t) => {
                let got = match &named[0].value {
                    ReadingValue::Token(s) => s.trim().to_lowercase(),
                    ReadingValue::Number(v) => v.to_string(),
                };
                if got != t.trim().to_lowercase() {
                    out.push((spec.name.clone(), false));
                }
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn sop_serialization_round_trips(doc in sop_doc()) {
        let text = serialize_sop(&doc);
        let back = parse_sop(text.as_bytes()).unwrap();
        prop_assert_eq!(back, doc);
    }

    #[test]
    fn normalization_is_idempotent_and_closed(
        inventory in prop::collection::vec(name(), 0..8),
        raw in "\\PC{0,30}",
    ) {
        let plan = inventory_plan(inventory);
        let once = normalize_equipment_name(&raw, &plan);
        prop_assert!(once == "unknown" || plan.inventory.contains(&once), "invented `{}`", once);
        prop_assert_eq!(normalize_equipment_name(&once, &plan), once);
    }

    #[test]
    fn memory_is_fifo_and_matches_brute_force(
        capacity in 1usize..=7,
        preds in prop::collection::vec(prediction(12), 1..20),
    ) {
        let mut m = TrackerMemory::new(capacity);
        for (i, p) in preds.iter().enumerate() {
            m.push(ContextFrame::empty(i as u64, 0), frame_prediction(i as u64, p));
        }
        let start = preds.len().saturating_sub(capacity);
        let frames: Vec<u64> = m.entries().map(|e| e.frame.frame_index).collect();
        prop_assert_eq!(frames, (start as u64..preds.len() as u64).collect::<Vec<_>>());

        let got = aggregate_votes(&m).unwrap();
        let want = common::brute_votes(&preds[start..]);
        for (g, w) in [got.top, got.second, got.third].iter().zip(want) {
            prop_assert_eq!(g.map(|r| r.step), w.map(|w| w.0));
            if let (Some(g), Some(w)) = (g, w) {
                prop_assert!((g.aggregated_confidence - w.1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pool_confidences_sum_to_at_most_one(
        capacity in 1usize..=7,
        preds in prop::collection::vec(prediction(12), 1..15),
    ) {
        let mut m = TrackerMemory::new(capacity);
        for (i, p) in preds.iter().enumerate() {
            m.push(ContextFrame::empty(i as u64, 0), frame_prediction(i as u64, p));
        }
        let detail = aggregate_votes(&m).unwrap().vote_detail;
        for rank in 1..=3u8 {
            let pool: Vec<_> = detail.iter().filter(|t| t.rank == rank).collect();
            let size: u32 = pool.iter().map(|t| t.votes).sum();
            if size > 0 {
                let total: f64 = pool.iter().map(|t| t.summed_confidence / size as f64).sum();
                prop_assert!(total <= 1.0 + 1e-9, "rank {} sums to {}", rank, total);
            }
        }
    }

    #[test]
    fn clamped_plans_always_check(
        m in any::<i64>(),
        p in any::<i64>(),
        tau in prop_oneof![any::<f64>(), Just(f64::NAN), Just(f64::INFINITY), -2.0f64..2.0],
    ) {
        let defaults = PlanDefaults { memory_update_interval: 1, prediction_interval: 3, confidence_threshold: 0.8 };
        let plan = clamp_proposal("rie", TrackingProposal {
            memory_update_interval: m,
            prediction_interval: p,
            confidence_threshold: tau,
            rationale: String::new(),
        }, &defaults);
        prop_assert!(plan.check().is_ok(), "{:?}", plan);
    }

    #[test]
    fn detect_errors_matches_reference(
        readings in prop::collection::vec(reading(), 0..5),
        params in spec_for_step(),
    ) {
        let mut frame = ContextFrame::empty(0, 0);
        frame.equipment = vec![EquipmentObservation { name: "x".into(), position: String::new(), readings: readings.clone() }];
        let step = SopStep { index: 4, instruction: String::new(), expected_equipment: vec![], params: params.clone() };
        let got: Vec<(String, bool)> = detect_errors(&frame, &step)
            .into_iter()
            .map(|a| (a.parameter.unwrap(), a.unit_disagreement))
            .collect();
        prop_assert_eq!(got, expected_alerts(&readings, &params));
    }
}

#[derive(Debug, Clone)]
enum Op {
    Frame,
    Answer(i64),
    Question,
}

fn ops() -> impl Strategy<Value = Vec<Op>> {
    prop::collection::vec(
        prop_oneof![
            6 => Just(Op::Frame),
            2 => (0i64..6).prop_map(Op::Answer),
            1 => Just(Op::Question),
        ],
        0..80,
    )
}

fn drive(seed: u64, flip: f64, ops: &[Op], close: bool) -> (Session, Vec<usize>) {
    let atlas = SopAtlas::bundled();
    let planner = PlannerConfig::bundled();
    let doc = atlas.lookup("patterning").unwrap();
    let mut synth = synth_session(doc, &SynthSpec::new(5, flip, seed));
    // Sprinkle prediction timeouts over the script.
    let mut rows: Vec<_> = synth.script.rows().cloned().collect();
    for r in rows.iter_mut().filter(|r| (r.frame_index + seed).is_multiple_of(7)) {
        r.predict_failures = 2;
    }
    synth.script = rows.into();
    let config = session_config_for(&synth.recording, synth.script.clone());
    let mut session = Session::create("p", config, &atlas, &planner).unwrap();
    let mut frames = synth.recording.frames.iter();
    let mut history_lens = Vec::new();
    for op in ops {
        let input = match op {
            Op::Frame => match frames.next() {
                Some(f) => SessionInput::Frame { frame: f.clone() },
                None => continue,
            },
            Op::Answer(k) => SessionInput::Answer { step: *k },
            Op::Question => SessionInput::Question { question: "what step am I on?".into() },
        };
        let before: Vec<_> = session.history().records().to_vec();
        let _ = session.handle(input);
        assert!(session.history().records().starts_with(&before), "history is append-only");
        history_lens.push(session.history().len());
    }
    if close {
        session.handle(SessionInput::Close).unwrap();
    }
    (session, history_lens)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn restore_reproduces_derived_state(
        seed in 0u64..1000,
        flip in prop::sample::select(vec![0.0, 0.2, 0.4]),
        ops in ops(),
        close in any::<bool>(),
    ) {
        let (session, _) = drive(seed, flip, &ops, close);
        let restored = Session::restore(session.events(), &SopAtlas::bundled(), &PlannerConfig::bundled()).unwrap();
        prop_assert_eq!(restored.events(), session.events());
        prop_assert_eq!(restored.derived_state(), session.derived_state());
    }

    #[test]
    fn history_grows_by_prefix(seed in 0u64..1000, ops in ops()) {
        let (_, lens) = drive(seed, 0.3, &ops, false);
        prop_assert!(lens.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn no_confirmation_while_query_pending(seed in 0u64..1000, ops in ops()) {
        let (session, _) = drive(seed, 0.4, &ops, false);
        let mut pending = false;
        for e in session.events() {
            match &e.body {
                EventBody::ClarificationRequested { .. } => {
                    prop_assert!(!pending, "second query while one is pending");
                    pending = true;
                }
                EventBody::ClarificationAnswered { .. } => pending = false,
                EventBody::StepConfirmed { confirmed, .. } if pending => {
                    prop_assert!(false, "confirmation {:?} while a query is pending", confirmed.step());
                }
                _ => {}
            }
        }
    }
}

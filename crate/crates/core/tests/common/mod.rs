//! Independent reference implementations used as test oracles.

#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};

use apex_core::harness::SynthSession;
use apex_core::StepTrackingPlan;

const NANO: f64 = 1e9;

/// Rank-stratified plurality over a list of ranked predictions, recomputed
/// from scratch. Returns (step, confidence) for the top three ranks.
pub fn brute_votes(preds: &[Vec<(usize, f64)>]) -> [Option<(usize, f64)>; 3] {
    let mut out = [None; 3];
    let mut elected: Vec<usize> = Vec::new();
    for (rank, slot) in out.iter_mut().enumerate() {
        for pool in (0..=rank).rev() {
            let mut tally: BTreeMap<usize, (u32, u64)> = BTreeMap::new();
            let mut size = 0u64;
            for p in preds {
                if let Some(&(step, conf)) = p.get(pool) {
                    size += 1;
                    let t = tally.entry(step).or_default();
                    t.0 += 1;
                    t.1 += (conf * NANO).round() as u64;
                }
            }
            let mut best: Option<(usize, u32, u64)> = None;
            for (&step, &(votes, sum)) in &tally {
                if elected.contains(&step) {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((_, bv, bs)) => (votes, sum) > (bv, bs),
                };
                if better {
                    best = Some((step, votes, sum));
                }
            }
            if let Some((step, _, sum)) = best {
                elected.push(step);
                *slot = Some((step, sum as f64 / NANO / size as f64));
                break;
            }
        }
    }
    out
}

/// Frame indices at which a clarification is requested when replaying
/// `synth` with an oracle operator, simulated directly from the script.
pub fn simulate_hitl(synth: &SynthSession, plan: &StepTrackingPlan) -> Vec<u64> {
    let m = plan.memory_update_interval as u64;
    let p = plan.prediction_interval as u64;
    let capacity = p.div_ceil(m) as usize;
    let tau = plan.confidence_threshold;

    let mut memory: VecDeque<Option<Vec<(usize, f64)>>> = VecDeque::new();
    // (step, human) for every logged acceptance.
    let mut records: Vec<(usize, bool)> = Vec::new();
    let mut prev = 0usize;
    let mut queries = Vec::new();

    for (i, &truth) in synth.truth.steps.iter().enumerate() {
        let n = i as u64 + 1;
        let frame_index = synth.recording.frames[i].frame_index();
        if n.is_multiple_of(m) {
            let row = synth.script.get(frame_index).expect("scripted frame");
            let raw = row.prediction.as_ref().expect("scripted prediction");
            let pred: Vec<(usize, f64)> = raw
                .candidates
                .iter()
                .map(|c| (c.step as usize, c.confidence))
                .collect();
            if memory.len() == capacity {
                memory.pop_front();
            }
            memory.push_back(Some(pred));
        }
        let preds: Vec<Vec<(usize, f64)>> = memory.iter().flatten().cloned().collect();
        if !n.is_multiple_of(p) || preds.is_empty() {
            continue;
        }
        let (top, conf) = brute_votes(&preds)[0].expect("non-empty memory elects a top step");
        let legal = top == prev || top == prev + 1;
        let confident = conf + 1e-9 >= tau;
        if legal && confident {
            prev = top;
            records.push((top, false));
            continue;
        }
        let window = &records[records.len().saturating_sub(3)..];
        let consistent = window
            .windows(2)
            .all(|w| w[1].1 || w[1].0 == w[0].0 || w[1].0 == w[0].0 + 1);
        if legal && consistent {
            prev = top;
            continue;
        }
        queries.push(frame_index);
        prev = truth;
        for e in memory.iter_mut() {
            *e = None;
        }
        records.push((truth, true));
    }
    queries
}

/// Textbook mean and standard error via Welford's online update.
pub fn reference_mean_sem(xs: &[f64]) -> (f64, f64) {
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (k, &x) in xs.iter().enumerate() {
        let d = x - mean;
        mean += d / (k + 1) as f64;
        m2 += d * (x - mean);
    }
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    (mean, (m2 / (n - 1.0)).sqrt() / n.sqrt())
}

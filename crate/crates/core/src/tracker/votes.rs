use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::perception::ContextFrame;

use super::{ConfirmedStep, FramePrediction, RankedStep, StepSource, TrackerError, VoteTally};

pub const RANKS: usize = 3;

/// Confidences are tallied in integer nano-units so that incremental
/// updates and a full recount agree exactly.
pub(crate) const NANO: f64 = 1e9;

pub(crate) fn to_nano(confidence: f64) -> u64 {
    (confidence * NANO).round() as u64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Tally {
    votes: u32,
    sum_nano: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub frame: ContextFrame,
    /// Cleared after a human clarification; the frame stays.
    pub prediction: Option<FramePrediction>,
}

/// Fixed-capacity FIFO of (frame, prediction) pairs with per-rank vote
/// tallies maintained on every push, eviction, and clear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "MemorySnapshot", into = "MemorySnapshot")]
pub struct TrackerMemory {
    capacity: usize,
    entries: VecDeque<MemoryEntry>,
    tallies: [BTreeMap<usize, Tally>; RANKS],
    pool_sizes: [u32; RANKS],
}

#[derive(Serialize, Deserialize)]
struct MemorySnapshot {
    capacity: usize,
    entries: Vec<MemoryEntry>,
}

impl From<MemorySnapshot> for TrackerMemory {
    fn from(s: MemorySnapshot) -> Self {
        let mut m = TrackerMemory::new(s.capacity);
        for e in s.entries {
            m.push_entry(e);
        }
        m
    }
}

impl From<TrackerMemory> for MemorySnapshot {
    fn from(m: TrackerMemory) -> Self {
        MemorySnapshot {
            capacity: m.capacity,
            entries: m.entries.into(),
        }
    }
}

impl TrackerMemory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "memory capacity must be positive");
        TrackerMemory {
            capacity,
            entries: VecDeque::with_capacity(capacity),
            tallies: Default::default(),
            pool_sizes: [0; RANKS],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl DoubleEndedIterator<Item = &MemoryEntry> + ExactSizeIterator {
        self.entries.iter()
    }

    pub fn predictions(&self) -> impl Iterator<Item = &FramePrediction> {
        self.entries.iter().filter_map(|e| e.prediction.as_ref())
    }

    pub fn has_predictions(&self) -> bool {
        self.pool_sizes[0] > 0
    }

    pub fn last_frame_index(&self) -> Option<u64> {
        self.entries.back().map(|e| e.frame.frame_index)
    }

    /// Push a new entry, evicting the oldest at capacity. Returns the
    /// evicted entry, if any.
    pub fn push(&mut self, frame: ContextFrame, prediction: FramePrediction) -> Option<MemoryEntry> {
        self.push_entry(MemoryEntry {
            frame,
            prediction: Some(prediction),
        })
    }

    fn push_entry(&mut self, entry: MemoryEntry) -> Option<MemoryEntry> {
        let evicted = if self.entries.len() == self.capacity {
            let old = self.entries.pop_front();
            if let Some(p) = old.as_ref().and_then(|e| e.prediction.as_ref()) {
                self.retract(p);
            }
            old
        } else {
            None
        };
        if let Some(p) = &entry.prediction {
            self.count(p);
        }
        self.entries.push_back(entry);
        evicted
    }

    /// Drop every stored prediction, keeping the frames.
    pub fn clear_predictions(&mut self) {
        for e in &mut self.entries {
            e.prediction = None;
        }
        self.tallies = Default::default();
        self.pool_sizes = [0; RANKS];
    }

    fn count(&mut self, p: &FramePrediction) {
        for (rank, c) in p.candidates.iter().enumerate().take(RANKS) {
            let t = self.tallies[rank].entry(c.step).or_default();
            t.votes += 1;
            t.sum_nano += to_nano(c.confidence);
            self.pool_sizes[rank] += 1;
        }
    }

    fn retract(&mut self, p: &FramePrediction) {
        for (rank, c) in p.candidates.iter().enumerate().take(RANKS) {
            let pool = &mut self.tallies[rank];
            let t = pool.get_mut(&c.step).expect("tally exists for stored vote");
            t.votes -= 1;
            t.sum_nano -= to_nano(c.confidence);
            if t.votes == 0 {
                pool.remove(&c.step);
            }
            self.pool_sizes[rank] -= 1;
        }
    }

    /// Per-rank vote detail, rank-major then by step.
    pub fn vote_detail(&self) -> Vec<VoteTally> {
        let mut out = Vec::new();
        for (rank, pool) in self.tallies.iter().enumerate() {
            for (&step, t) in pool {
                out.push(VoteTally {
                    rank: rank as u8 + 1,
                    step,
                    votes: t.votes,
                    summed_confidence: t.sum_nano as f64 / NANO,
                });
            }
        }
        out
    }

    /// Plurality winner of `pool` among steps not yet elected.
    fn elect(&self, pool: usize, elected: &[usize]) -> Option<RankedStep> {
        let size = self.pool_sizes[pool];
        self.tallies[pool]
            .iter()
            .filter(|(step, _)| !elected.contains(step))
            // Ascending step order, so `max_by` keeps the later entry on a
            // full tie; reverse the step comparison to prefer the smaller.
            .max_by(|(sa, a), (sb, b)| {
                a.votes
                    .cmp(&b.votes)
                    .then(a.sum_nano.cmp(&b.sum_nano))
                    .then(sb.cmp(sa))
            })
            .map(|(&step, t)| RankedStep {
                step,
                aggregated_confidence: t.sum_nano as f64 / NANO / size as f64,
            })
    }
}

/// Elect the top, second, and third confirmed steps from memory.
///
/// Rank r is elected from the rank-r pool, skipping steps already elected
/// at a higher rank. When that pool has no eligible step, the next pool up
/// is consulted instead, so a memory holding single-candidate predictions
/// still yields a runner-up. Confidence is the step's summed confidence
/// divided by the size of the pool it was elected from.
pub fn aggregate_votes(memory: &TrackerMemory) -> Result<ConfirmedStep, TrackerError> {
    if !memory.has_predictions() {
        return Err(TrackerError::EmptyMemory);
    }
    let mut ranked: [Option<RankedStep>; RANKS] = [None, None, None];
    let mut elected: Vec<usize> = Vec::with_capacity(RANKS);
    for (rank, slot) in ranked.iter_mut().enumerate() {
        let pick = (0..=rank).rev().find_map(|pool| memory.elect(pool, &elected));
        if let Some(r) = pick {
            elected.push(r.step);
            *slot = Some(r);
        }
    }
    let [top, second, third] = ranked;
    Ok(ConfirmedStep {
        frame_index: memory.last_frame_index().unwrap_or(0),
        top,
        second,
        third,
        vote_detail: memory.vote_detail(),
        source: StepSource::Vote,
    })
}

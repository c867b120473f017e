//! Planning agent: protocol composition and per-SOP experiment and
//! step-tracking plans.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{with_retry, BackendError, ReasoningBackend};
use crate::sop::{SopAtlas, SopDoc, SopError, SopStep};
use crate::text::casefold;

/// Lower bound used when clamping a proposed confidence threshold into (0, 1].
pub const MIN_CONFIDENCE_THRESHOLD: f64 = 0.01;

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("no SOP in the atlas matches intent `{0}`")]
    NoMatchingSop(String),
    #[error("the SOP atlas is empty")]
    EmptyAtlas,
    #[error(transparent)]
    Sop(#[from] SopError),
    #[error("reasoning backend failed: {0}")]
    Backend(#[from] BackendError),
    #[error("invalid plan defaults: {0}")]
    InvalidDefaults(String),
    #[error("invalid planner config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub intent: String,
    pub sop_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub sop_id: String,
    /// Verbatim copy of the SOP steps. Nothing downstream may add or remove
    /// entries.
    pub steps: Vec<SopStep>,
    pub inventory: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrackingPlan {
    pub sop_id: String,
    /// Frames between tracker memory updates.
    pub memory_update_interval: u32,
    /// Frames between step decisions.
    pub prediction_interval: u32,
    pub confidence_threshold: f64,
    pub rationale: String,
}

impl StepTrackingPlan {
    /// Memory capacity: enough entries to span one prediction window.
    pub fn memory_capacity(&self) -> usize {
        self.prediction_interval.div_ceil(self.memory_update_interval.max(1)) as usize
    }

    pub fn check(&self) -> Result<(), String> {
        if self.memory_update_interval == 0 {
            return Err("memory_update_interval must be positive".into());
        }
        if self.prediction_interval < self.memory_update_interval {
            return Err("prediction_interval must be >= memory_update_interval".into());
        }
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold <= 1.0) {
            return Err("confidence_threshold must lie in (0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanDefaults {
    pub memory_update_interval: u32,
    pub prediction_interval: u32,
    pub confidence_threshold: f64,
}

impl PlanDefaults {
    pub fn to_plan(&self, sop_id: &str) -> StepTrackingPlan {
        StepTrackingPlan {
            sop_id: sop_id.to_string(),
            memory_update_interval: self.memory_update_interval,
            prediction_interval: self.prediction_interval,
            confidence_threshold: self.confidence_threshold,
            rationale: "configured defaults".into(),
        }
    }
}

/// Unvalidated tracking-plan values as proposed by a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingProposal {
    pub memory_update_interval: i64,
    pub prediction_interval: i64,
    pub confidence_threshold: f64,
    #[serde(default)]
    pub rationale: String,
}

/// A named protocol whose SOP list is selected when its keywords match the
/// intent better than any SOP title does.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolTemplate {
    pub name: String,
    pub keywords: Vec<String>,
    pub sops: Vec<String>,
}

/// Planner configuration file (`planner.toml`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub canonical_order: Vec<String>,
    pub defaults: PlanDefaults,
    #[serde(default)]
    pub templates: Vec<ProtocolTemplate>,
}

impl PlannerConfig {
    pub fn bundled() -> Self {
        Self::parse(crate::fixtures::PLANNER_CONFIG).expect("bundled planner.toml is valid")
    }

    pub fn parse(text: &str) -> Result<Self, PlanError> {
        let cfg: PlannerConfig = toml::from_str(text).map_err(|e| PlanError::Config(e.to_string()))?;
        cfg.defaults
            .to_plan("defaults")
            .check()
            .map_err(PlanError::InvalidDefaults)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PlanError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| PlanError::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::parse(&text)
    }

    /// Position of `id` in the canonical process order; unknown ids sort last.
    pub fn order_key<'a>(&self, id: &'a str) -> (usize, &'a str) {
        let pos = self
            .canonical_order
            .iter()
            .position(|o| o == id)
            .unwrap_or(usize::MAX);
        (pos, id)
    }
}

/// Bundled step-tracking plan examples, keyed by SOP id.
pub fn bundled_tracking_example(sop_id: &str) -> Option<TrackingProposal> {
    match sop_id {
        "rie" => Some(TrackingProposal {
            memory_update_interval: 1,
            prediction_interval: 3,
            confidence_threshold: 0.8,
            rationale: "Rapid pressure changes need frequent memory updates; the procedure \
                        stays at one machine, so predictions are robust and a high threshold \
                        is used before asking the operator."
                .into(),
        }),
        "spin_coating" => Some(TrackingProposal {
            memory_update_interval: 2,
            prediction_interval: 5,
            confidence_threshold: 0.6,
            rationale: "Few steps with a single timed parameter allow sparser memory updates; \
                        many tools and materials make tracking less robust, so a lower \
                        threshold is used before asking the operator."
                .into(),
        }),
        _ => None,
    }
}

/// Compose an ordered protocol for `intent` from the atlas.
pub fn compose_protocol(
    intent: &str,
    atlas: &SopAtlas,
    backend: &dyn ReasoningBackend,
) -> Result<Protocol, PlanError> {
    if atlas.is_empty() {
        return Err(PlanError::EmptyAtlas);
    }
    let ids = with_retry(|| backend.select_sops(intent, atlas))?;
    if ids.is_empty() {
        return Err(PlanError::NoMatchingSop(intent.to_string()));
    }
    for id in &ids {
        atlas.lookup(id)?;
    }
    Ok(Protocol {
        intent: intent.to_string(),
        sop_ids: ids,
    })
}

pub fn make_experiment_plan(
    doc: &SopDoc,
    backend: &dyn ReasoningBackend,
) -> Result<ExperimentPlan, PlanError> {
    let proposed = with_retry(|| backend.propose_inventory(doc))?;
    let mut seen = BTreeSet::new();
    let inventory = doc
        .equipment
        .iter()
        .chain(proposed.iter())
        .filter(|name| !name.trim().is_empty() && seen.insert(casefold(name)))
        .cloned()
        .collect();
    Ok(ExperimentPlan {
        sop_id: doc.id.clone(),
        steps: doc.steps.clone(),
        inventory,
    })
}

pub fn make_tracking_plan(
    doc: &SopDoc,
    backend: &dyn ReasoningBackend,
    defaults: &PlanDefaults,
) -> Result<StepTrackingPlan, PlanError> {
    let fallback = defaults.to_plan(&doc.id);
    fallback.check().map_err(PlanError::InvalidDefaults)?;
    let plan = match with_retry(|| backend.propose_tracking_plan(doc))? {
        Some(proposal) => clamp_proposal(&doc.id, proposal, defaults),
        None => fallback,
    };
    debug_assert!(plan.check().is_ok());
    Ok(plan)
}

/// Force backend-proposed values into the plan invariants: intervals >= 1,
/// prediction interval >= memory interval, threshold in (0, 1].
pub fn clamp_proposal(
    sop_id: &str,
    proposal: TrackingProposal,
    defaults: &PlanDefaults,
) -> StepTrackingPlan {
    let memory = proposal.memory_update_interval.clamp(1, u32::MAX as i64) as u32;
    let prediction = proposal
        .prediction_interval
        .clamp(memory as i64, u32::MAX as i64) as u32;
    let threshold = if proposal.confidence_threshold.is_nan() {
        defaults.confidence_threshold
    } else {
        proposal
            .confidence_threshold
            .clamp(MIN_CONFIDENCE_THRESHOLD, 1.0)
    };
    StepTrackingPlan {
        sop_id: sop_id.to_string(),
        memory_update_interval: memory,
        prediction_interval: prediction,
        confidence_threshold: threshold,
        rationale: proposal.rationale,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::FallbackReasoner;

    fn setup() -> (SopAtlas, FallbackReasoner) {
        (SopAtlas::bundled(), FallbackReasoner::bundled())
    }

    #[test]
    fn full_fabrication_intent_yields_seven_sops() {
        let (atlas, backend) = setup();
        let p = compose_protocol("fabricate SU-8 flexible BCI", &atlas, &backend).unwrap();
        assert_eq!(
            p.sop_ids,
            vec![
                "wafer_cleaning",
                "rie",
                "spin_coating",
                "patterning",
                "developing",
                "pvd",
                "lift_off"
            ]
        );
    }

    #[test]
    fn single_sop_intent() {
        let (atlas, backend) = setup();
        let p = compose_protocol("spin coat a wafer", &atlas, &backend).unwrap();
        assert_eq!(p.sop_ids, vec!["spin_coating"]);
    }

    #[test]
    fn unrelated_intent_has_no_match() {
        let (atlas, backend) = setup();
        assert!(matches!(
            compose_protocol("bake a cake", &atlas, &backend),
            Err(PlanError::NoMatchingSop(_))
        ));
    }

    #[test]
    fn empty_atlas_rejected() {
        let (_, backend) = setup();
        assert!(matches!(
            compose_protocol("spin coat", &SopAtlas::new(), &backend),
            Err(PlanError::EmptyAtlas)
        ));
    }

    #[test]
    fn tie_on_title_overlap_keeps_canonical_order() {
        let (atlas, backend) = setup();
        let p = compose_protocol("clean the wafer, then spin coat it", &atlas, &backend).unwrap();
        assert_eq!(p.sop_ids, vec!["wafer_cleaning", "spin_coating"]);
    }

    #[test]
    fn fallback_inventory_is_doc_equipment() {
        let (atlas, backend) = setup();
        let rie = atlas.lookup("rie").unwrap();
        let plan = make_experiment_plan(rie, &backend).unwrap();
        assert_eq!(plan.inventory, rie.equipment);
        assert_eq!(plan.steps, rie.steps);
        assert!(plan.inventory.iter().any(|i| i == "Wafer tweezers"));
        assert!(plan.inventory.iter().any(|i| i == "RF power supply"));
        let spin = atlas.lookup("spin_coating").unwrap();
        let plan = make_experiment_plan(spin, &backend).unwrap();
        assert!(plan.inventory.iter().any(|i| i == "SU-8 TF 6002 photoresist"));
    }

    #[test]
    fn tracking_plans_from_bundled_examples() {
        let (atlas, backend) = setup();
        let defaults = PlanDefaults {
            memory_update_interval: 1,
            prediction_interval: 3,
            confidence_threshold: 0.7,
        };
        let rie = make_tracking_plan(atlas.lookup("rie").unwrap(), &backend, &defaults).unwrap();
        assert_eq!(
            (rie.memory_update_interval, rie.prediction_interval, rie.confidence_threshold),
            (1, 3, 0.8)
        );
        let spin =
            make_tracking_plan(atlas.lookup("spin_coating").unwrap(), &backend, &defaults).unwrap();
        assert_eq!(
            (spin.memory_update_interval, spin.prediction_interval, spin.confidence_threshold),
            (2, 5, 0.6)
        );
        let pvd = make_tracking_plan(atlas.lookup("pvd").unwrap(), &backend, &defaults).unwrap();
        assert_eq!(pvd, defaults.to_plan("pvd"));
    }

    #[test]
    fn invalid_defaults_rejected() {
        let (atlas, backend) = setup();
        let defaults = PlanDefaults {
            memory_update_interval: 3,
            prediction_interval: 1,
            confidence_threshold: 0.7,
        };
        assert!(matches!(
            make_tracking_plan(atlas.lookup("pvd").unwrap(), &backend, &defaults),
            Err(PlanError::InvalidDefaults(_))
        ));
    }

    #[test]
    fn memory_capacity_spans_one_window() {
        let mut plan = PlanDefaults {
            memory_update_interval: 2,
            prediction_interval: 5,
            confidence_threshold: 0.6,
        }
        .to_plan("x");
        assert_eq!(plan.memory_capacity(), 3);
        plan.memory_update_interval = 1;
        plan.prediction_interval = 3;
        assert_eq!(plan.memory_capacity(), 3);
    }
}

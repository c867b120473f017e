use crate::analysis::{fallback_answer, AnalysisHistory, GroundedAnswer};
use crate::planner::{bundled_tracking_example, PlannerConfig, TrackingProposal};
use crate::sop::{SopAtlas, SopDoc};
use crate::text::{keyword_tokens, keywords_match};

use super::{BackendError, ReasoningBackend};

/// Deterministic offline reasoner.
///
/// Protocol selection scores each SOP title (and each configured protocol
/// template) by how many intent keywords it matches. The best template wins
/// if it scores at least as high as the best title; otherwise every SOP tied
/// at the best title score is selected, in canonical process order.
#[derive(Debug, Clone)]
pub struct FallbackReasoner {
    config: PlannerConfig,
}

impl FallbackReasoner {
    pub fn new(config: PlannerConfig) -> Self {
        FallbackReasoner { config }
    }

    pub fn bundled() -> Self {
        Self::new(PlannerConfig::bundled())
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.config
    }
}

fn overlap(intent: &[String], target: &[String]) -> usize {
    intent
        .iter()
        .filter(|t| target.iter().any(|w| keywords_match(t, w)))
        .count()
}

impl ReasoningBackend for FallbackReasoner {
    fn select_sops(&self, intent: &str, atlas: &SopAtlas) -> Result<Vec<String>, BackendError> {
        let intent_tokens = keyword_tokens(intent);

        let mut best_title = 0;
        let mut by_title: Vec<(&str, usize)> = Vec::new();
        for doc in atlas.docs() {
            let score = overlap(&intent_tokens, &keyword_tokens(&doc.title));
            best_title = best_title.max(score);
            by_title.push((doc.id.as_str(), score));
        }

        let best_template = self
            .config
            .templates
            .iter()
            .map(|t| {
                let kw: Vec<String> = t.keywords.iter().flat_map(|k| keyword_tokens(k)).collect();
                (t, overlap(&intent_tokens, &kw))
            })
            .filter(|(_, s)| *s > 0)
            .max_by_key(|(_, s)| *s);

        if let Some((template, score)) = best_template {
            if score >= best_title {
                return Ok(template
                    .sops
                    .iter()
                    .filter(|id| atlas.contains(id))
                    .cloned()
                    .collect());
            }
        }
        if best_title == 0 {
            return Ok(Vec::new());
        }
        let mut ids: Vec<&str> = by_title
            .into_iter()
            .filter(|(_, s)| *s == best_title)
            .map(|(id, _)| id)
            .collect();
        ids.sort_by_key(|id| self.config.order_key(id));
        Ok(ids.into_iter().map(String::from).collect())
    }

    fn propose_inventory(&self, _doc: &SopDoc) -> Result<Vec<String>, BackendError> {
        Ok(Vec::new())
    }

    fn propose_tracking_plan(
        &self,
        doc: &SopDoc,
    ) -> Result<Option<TrackingProposal>, BackendError> {
        Ok(bundled_tracking_example(&doc.id))
    }

    fn answer_query(
        &self,
        question: &str,
        history: &AnalysisHistory,
    ) -> Result<GroundedAnswer, BackendError> {
        Ok(fallback_answer(question, history))
    }
}

use serde::{Deserialize, Serialize};

use crate::perception::ContextFrame;
use crate::sop::SopDoc;
use crate::tracker::ConfirmedStep;

pub const PROCEDURE_COMPLETE: &str = "procedure complete";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Guidance {
    pub step: usize,
    pub current_action: String,
    pub required_action: String,
    pub next_step_preview: String,
}

/// Template guidance for the confirmed step: what the operator is doing,
/// what the step asks for, and what comes next.
pub fn make_guidance(confirmed: &ConfirmedStep, frame: &ContextFrame, doc: &SopDoc) -> Guidance {
    let step = confirmed.step().unwrap_or(0);
    let required_action = doc
        .step(step)
        .map(|s| s.instruction.clone())
        .unwrap_or_default();
    let next_step_preview = match doc.step(step + 1) {
        Some(next) if step >= 1 => format!("Step {}: {}", next.index, next.instruction),
        _ => PROCEDURE_COMPLETE.to_string(),
    };
    Guidance {
        step,
        current_action: frame.action.clone(),
        required_action,
        next_step_preview,
    }
}

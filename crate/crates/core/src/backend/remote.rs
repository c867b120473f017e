use std::collections::BTreeMap;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{AnalysisHistory, GroundedAnswer};
use crate::perception::{FrameDescription, RawFrame};
use crate::planner::{bundled_tracking_example, ExperimentPlan, TrackingProposal};
use crate::sop::{SopAtlas, SopDoc};
use crate::tracker::RawPrediction;

use super::{
    BackendError, PerceptionBackend, PredictionBackend, PredictionRequest, ReasoningBackend,
};

pub const BACKEND_URL_ENV: &str = "APEX_BACKEND_URL";
pub const BACKEND_KEY_ENV: &str = "APEX_BACKEND_KEY";

const DEFAULT_TIMEOUT_MS: u64 = 30_000;

/// Remote backend settings carried in a session config. The credential is
/// never stored here; it is read from `APEX_BACKEND_KEY`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Endpoint; falls back to `APEX_BACKEND_URL` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    /// Opaque model settings forwarded with every request.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, Value>,
    /// In-context description examples forwarded to the perception task.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub examples: Vec<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_ms: Option<u64>,
}

/// HTTP adapter for a hosted model service.
///
/// Every call is a `POST` of a JSON object `{"task": ..., "params": ..., ...}`
/// to the configured URL, with `Authorization: Bearer <key>` when a key is
/// set. The reply body is the task's structured result.
#[derive(Debug)]
pub struct RemoteBackend {
    url: String,
    key: Option<String>,
    params: BTreeMap<String, Value>,
    examples: Vec<Value>,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct SopIdsReply {
    sop_ids: Vec<String>,
}

#[derive(Deserialize)]
struct InventoryReply {
    inventory: Vec<String>,
}

#[derive(Deserialize)]
struct PlanReply {
    #[serde(default)]
    plan: Option<TrackingProposal>,
}

impl RemoteBackend {
    pub fn new(url: &str, key: Option<String>, config: &RemoteConfig) -> Result<Self, BackendError> {
        let timeout = Duration::from_millis(config.timeout_ms.unwrap_or(DEFAULT_TIMEOUT_MS));
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Unreachable(e.to_string()))?;
        Ok(RemoteBackend {
            url: url.to_string(),
            key,
            params: config.params.clone(),
            examples: config.examples.clone(),
            client,
        })
    }

    /// Build from a session config, reading the URL (if not set) and the key
    /// from the environment.
    pub fn from_config(config: &RemoteConfig) -> Result<Self, BackendError> {
        let url = match &config.url {
            Some(u) => u.clone(),
            None => std::env::var(BACKEND_URL_ENV)
                .map_err(|_| BackendError::Unreachable(format!("{BACKEND_URL_ENV} is not set")))?,
        };
        let key = std::env::var(BACKEND_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::new(&url, key, config)
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn call<T: DeserializeOwned>(&self, task: &str, mut body: Value) -> Result<T, BackendError> {
        if let Value::Object(map) = &mut body {
            map.insert("task".into(), Value::String(task.into()));
            map.insert("params".into(), json!(self.params));
        }
        let mut req = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Unreachable(e.to_string())
            }
        })?;
        let status = resp.status();
        if status.is_server_error() {
            return Err(BackendError::Unreachable(format!("{task}: HTTP {status}")));
        }
        if !status.is_success() {
            return Err(BackendError::BadReply(format!("{task}: HTTP {status}")));
        }
        let text = resp.text().map_err(|e| BackendError::BadReply(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| BackendError::BadReply(format!("{task}: {e}")))
    }
}

impl ReasoningBackend for RemoteBackend {
    fn select_sops(&self, intent: &str, atlas: &SopAtlas) -> Result<Vec<String>, BackendError> {
        let sops: Vec<Value> = atlas
            .docs()
            .map(|d| json!({"id": d.id, "title": d.title}))
            .collect();
        let reply: SopIdsReply = self.call("select_sops", json!({"intent": intent, "sops": sops}))?;
        Ok(reply.sop_ids)
    }

    fn propose_inventory(&self, doc: &SopDoc) -> Result<Vec<String>, BackendError> {
        let reply: InventoryReply = self.call("propose_inventory", json!({"sop": doc}))?;
        Ok(reply.inventory)
    }

    fn propose_tracking_plan(
        &self,
        doc: &SopDoc,
    ) -> Result<Option<TrackingProposal>, BackendError> {
        let examples: Vec<Value> = ["rie", "spin_coating"]
            .iter()
            .filter_map(|id| bundled_tracking_example(id).map(|p| json!({"sop_id": id, "plan": p})))
            .collect();
        let reply: PlanReply =
            self.call("propose_tracking_plan", json!({"sop": doc, "examples": examples}))?;
        Ok(reply.plan)
    }

    fn answer_query(
        &self,
        question: &str,
        history: &AnalysisHistory,
    ) -> Result<GroundedAnswer, BackendError> {
        self.call(
            "answer_query",
            json!({"question": question, "history": history.records()}),
        )
    }
}

impl PerceptionBackend for RemoteBackend {
    fn describe(
        &self,
        frame: &RawFrame,
        plan: &ExperimentPlan,
    ) -> Result<FrameDescription, BackendError> {
        self.call(
            "contextualize",
            json!({
                "frame": frame,
                "inventory": plan.inventory,
                "examples": self.examples,
            }),
        )
    }
}

impl PredictionBackend for RemoteBackend {
    fn predict(&self, request: &PredictionRequest<'_>) -> Result<RawPrediction, BackendError> {
        self.call(
            "predict_step",
            json!({
                "frame": request.frame,
                "steps": request.steps,
                "history": request.history,
            }),
        )
    }
}

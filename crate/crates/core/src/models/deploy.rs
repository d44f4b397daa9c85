use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use super::artifacts::ArtifactStore;
use super::task::{LinearModel, WEIGHTS_KIND};
use super::ModelError;
use crate::clock::Clock;
use crate::stream::{Broker, Payload, TimestampNs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeploymentKind {
    Deployed,
    /// Redeploy of the active weights.
    NoOp,
    /// Not approved; nothing changed.
    Declined,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentEvent {
    pub seq: u64,
    pub model_id: String,
    pub kind: DeploymentKind,
    pub from_ref: Option<String>,
    pub to_ref: String,
    pub ts_ns: TimestampNs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    pub score: f64,
    pub weights_ref: String,
}

struct Deployed {
    weights_ref: String,
    model: LinearModel,
}

#[derive(Default)]
struct Slot {
    current: RwLock<Option<Arc<Deployed>>>,
    log: Mutex<Vec<DeploymentEvent>>,
}

/// Deployed task models. Predictions read an immutable snapshot, so a swap
/// never disturbs one in flight.
pub struct ModelRegistry {
    artifacts: Arc<ArtifactStore>,
    clock: Arc<dyn Clock>,
    control: Option<(Arc<Broker>, String)>,
    slots: RwLock<BTreeMap<String, Arc<Slot>>>,
}

impl ModelRegistry {
    pub fn new(artifacts: Arc<ArtifactStore>, clock: Arc<dyn Clock>) -> Self {
        Self {
            artifacts,
            clock,
            control: None,
            slots: RwLock::new(BTreeMap::new()),
        }
    }

    /// Deployment events are also published to `topic`.
    pub fn with_control_topic(mut self, broker: Arc<Broker>, topic: impl Into<String>) -> Self {
        let topic = topic.into();
        if let Err(e) = broker.ensure_topic(&topic) {
            tracing::warn!(error = %e, "control topic unavailable");
        }
        self.control = Some((broker, topic));
        self
    }

    pub fn artifacts(&self) -> &Arc<ArtifactStore> {
        &self.artifacts
    }

    pub fn register_weights(&self, model: &LinearModel) -> Result<String, ModelError> {
        let r = model.weights_ref();
        self.artifacts.put_as(WEIGHTS_KIND, &r, &model.canonical_bytes())?;
        Ok(r)
    }

    fn slot(&self, model_id: &str) -> Arc<Slot> {
        if let Some(s) = self.slots.read().get(model_id) {
            return Arc::clone(s);
        }
        Arc::clone(self.slots.write().entry(model_id.to_string()).or_default())
    }

    pub fn deploy(&self, model_id: &str, weights_ref: &str, approve: bool) -> Result<DeploymentEvent, ModelError> {
        let model = LinearModel::load(&self.artifacts, weights_ref)?;
        let slot = self.slot(model_id);
        let mut log = slot.log.lock();
        let from_ref = slot.current.read().as_ref().map(|d| d.weights_ref.clone());
        let kind = if !approve {
            DeploymentKind::Declined
        } else if from_ref.as_deref() == Some(weights_ref) {
            DeploymentKind::NoOp
        } else {
            *slot.current.write() = Some(Arc::new(Deployed {
                weights_ref: weights_ref.to_string(),
                model,
            }));
            DeploymentKind::Deployed
        };
        let event = DeploymentEvent {
            seq: log.len() as u64 + 1,
            model_id: model_id.to_string(),
            kind,
            from_ref,
            to_ref: weights_ref.to_string(),
            ts_ns: self.clock.now_ns(),
        };
        log.push(event.clone());
        if let Some((broker, topic)) = &self.control {
            if let Err(e) = broker.publish_next(topic, model_id, event.ts_ns.max(1), Payload::json(&event)) {
                tracing::warn!(error = %e, "deployment event not published");
            }
        }
        tracing::info!(model_id, ?kind, weights_ref, "deployment");
        Ok(event)
    }

    pub fn predict(&self, model_id: &str, features: &[f64]) -> Result<Prediction, ModelError> {
        let slot = self
            .slots
            .read()
            .get(model_id)
            .cloned()
            .ok_or_else(|| ModelError::UnknownModel(model_id.to_string()))?;
        let snap = slot
            .current
            .read()
            .clone()
            .ok_or_else(|| ModelError::NotDeployed(model_id.to_string()))?;
        let (label, score) = snap.model.predict(features)?;
        Ok(Prediction {
            label,
            score,
            weights_ref: snap.weights_ref.clone(),
        })
    }

    pub fn deployed_model(&self, model_id: &str) -> Option<LinearModel> {
        let slot = self.slots.read().get(model_id).cloned()?;
        let snap = slot.current.read().clone()?;
        Some(snap.model.clone())
    }

    pub fn deployed_ref(&self, model_id: &str) -> Option<String> {
        let slot = self.slots.read().get(model_id).cloned()?;
        let r = slot.current.read().as_ref().map(|d| d.weights_ref.clone());
        r
    }

    pub fn events(&self, model_id: &str) -> Vec<DeploymentEvent> {
        self.slots
            .read()
            .get(model_id)
            .map(|s| s.log.lock().clone())
            .unwrap_or_default()
    }

    pub fn model_ids(&self) -> Vec<String> {
        self.slots.read().keys().cloned().collect()
    }
}

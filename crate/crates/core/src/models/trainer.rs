use std::sync::Arc;

use chrono::Timelike;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::dataset::version_dataset;
use super::deploy::ModelRegistry;
use super::features::SampleStore;
use super::task::{task_train, TrainParams};
use crate::clock::Clock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetScope {
    /// Every sample collected so far.
    #[default]
    Cumulative,
    /// Only samples added since the previous training.
    NewSinceLast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerPolicy {
    pub min_new_samples: usize,
    /// Local wall-clock hours `[start, end)`; wraps past midnight when start > end.
    pub allowed_hours: (u32, u32),
    /// Ignore `allowed_hours`.
    #[serde(default)]
    pub override_hours: bool,
    pub require_approval: bool,
    #[serde(default = "yes")]
    pub auto_deploy: bool,
    #[serde(default)]
    pub scope: DatasetScope,
}

fn yes() -> bool {
    true
}

impl Default for TrainerPolicy {
    fn default() -> Self {
        Self {
            min_new_samples: 100,
            allowed_hours: (0, 6),
            override_hours: false,
            require_approval: false,
            auto_deploy: true,
            scope: DatasetScope::Cumulative,
        }
    }
}

impl TrainerPolicy {
    pub fn hour_allowed(&self, hour: u32) -> bool {
        let (a, b) = self.allowed_hours;
        self.override_hours || if a <= b { (a..b).contains(&hour) } else { hour >= a || hour < b }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum TrainerAction {
    None { reason: String },
    PendingApproval { new_samples: usize },
    Trained {
        version_id: String,
        parent: Option<String>,
        weights_ref: String,
        holdout_accuracy: Option<f64>,
        deployed: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerStatus {
    pub model_id: String,
    pub policy: TrainerPolicy,
    pub total_samples: usize,
    pub new_samples: usize,
    pub pending_approval: bool,
    pub approved: bool,
    pub last_version: Option<String>,
    pub last_weights_ref: Option<String>,
    pub deployed_ref: Option<String>,
    pub last_action: Option<TrainerAction>,
    pub alerts: Vec<String>,
}

#[derive(Default)]
struct State {
    consumed: usize,
    pending: bool,
    approved: bool,
    last_version: Option<String>,
    last_weights: Option<String>,
    last_action: Option<TrainerAction>,
    alerts: Vec<String>,
}

/// Watches the self-labeled sample count and retrains the task model when
/// the policy allows.
pub struct Trainer {
    model_id: String,
    samples: Arc<SampleStore>,
    registry: Arc<ModelRegistry>,
    clock: Arc<dyn Clock>,
    policy: Mutex<TrainerPolicy>,
    params: TrainParams,
    state: Mutex<State>,
}

impl Trainer {
    pub fn new(
        model_id: impl Into<String>,
        samples: Arc<SampleStore>,
        registry: Arc<ModelRegistry>,
        clock: Arc<dyn Clock>,
        policy: TrainerPolicy,
        params: TrainParams,
    ) -> Self {
        Self {
            model_id: model_id.into(),
            samples,
            registry,
            clock,
            policy: Mutex::new(policy),
            params,
            state: Mutex::new(State::default()),
        }
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn set_policy(&self, policy: TrainerPolicy) {
        *self.policy.lock() = policy;
    }

    /// Grants one pending training. Returns false when nothing was pending.
    pub fn approve(&self) -> bool {
        let mut st = self.state.lock();
        if st.pending {
            st.approved = true;
        }
        st.pending
    }

    pub fn poll(&self) -> TrainerAction {
        self.poll_at_hour(chrono::Local::now().hour())
    }

    pub fn poll_at_hour(&self, hour: u32) -> TrainerAction {
        let policy = self.policy.lock().clone();
        let mut st = self.state.lock();
        let total = self.samples.len();
        let new = total - st.consumed.min(total);
        let action = if new < policy.min_new_samples {
            TrainerAction::None {
                reason: format!("{new} new samples, need {}", policy.min_new_samples),
            }
        } else if !policy.hour_allowed(hour) {
            TrainerAction::None {
                reason: format!("hour {hour} outside allowed window"),
            }
        } else if policy.require_approval && !st.approved {
            st.pending = true;
            TrainerAction::PendingApproval { new_samples: new }
        } else {
            self.train(&policy, &mut st, total)
        };
        st.last_action = Some(action.clone());
        action
    }

    fn train(&self, policy: &TrainerPolicy, st: &mut State, total: usize) -> TrainerAction {
        let samples = match policy.scope {
            DatasetScope::Cumulative => self.samples.snapshot(),
            DatasetScope::NewSinceLast => self.samples.since(st.consumed),
        };
        let samples = samples.into_iter().take(total).collect();
        let artifacts = self.registry.artifacts();
        let result = version_dataset(samples, st.last_version.clone(), self.clock.now_ns(), Some(artifacts))
            .and_then(|ds| task_train(&ds.samples, &self.params, Some(artifacts)).map(|r| (ds, r)));
        let (ds, report) = match result {
            Ok(x) => x,
            Err(e) => {
                let alert = format!("training failed: {e}");
                tracing::error!(model = %self.model_id, "{alert}");
                st.alerts.push(alert.clone());
                return TrainerAction::None { reason: alert };
            }
        };
        st.consumed = total;
        st.pending = false;
        st.approved = false;
        st.last_version = Some(ds.version.version_id.clone());
        st.last_weights = Some(report.weights_ref.clone());
        let deployed = policy.auto_deploy
            && match self.registry.deploy(&self.model_id, &report.weights_ref, true) {
                Ok(_) => true,
                Err(e) => {
                    st.alerts.push(format!("deploy failed: {e}"));
                    false
                }
            };
        TrainerAction::Trained {
            version_id: ds.version.version_id,
            parent: ds.version.parent,
            weights_ref: report.weights_ref,
            holdout_accuracy: report.holdout_accuracy,
            deployed,
        }
    }

    pub fn status(&self) -> TrainerStatus {
        let st = self.state.lock();
        let total = self.samples.len();
        TrainerStatus {
            model_id: self.model_id.clone(),
            policy: self.policy.lock().clone(),
            total_samples: total,
            new_samples: total - st.consumed.min(total),
            pending_approval: st.pending,
            approved: st.approved,
            last_version: st.last_version.clone(),
            last_weights_ref: st.last_weights.clone(),
            deployed_ref: self.registry.deployed_ref(&self.model_id),
            last_action: st.last_action.clone(),
            alerts: st.alerts.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::models::{ArtifactStore, LabeledSample, Provenance, SplitTag};

    fn fill(store: &SampleStore, n: usize, offset: usize, single: bool) {
        for i in offset..offset + n {
            let a = single || i % 2 == 0;
            store.push(LabeledSample {
                features: vec![if a { 0.0 } else { 3.0 } + (i % 7) as f64 * 0.1],
                label: if a { "a" } else { "b" }.into(),
                provenance: Provenance {
                    record_id: format!("r{i}"),
                    t0_ns: 0,
                    t1_ns: 1,
                },
                split_tag: SplitTag::for_record(&format!("r{i}")),
            });
        }
    }

    fn trainer(policy: TrainerPolicy) -> (Trainer, Arc<SampleStore>, Arc<ModelRegistry>) {
        let samples = Arc::new(SampleStore::new());
        let clock = Arc::new(ManualClock::new(1));
        let reg = Arc::new(ModelRegistry::new(Arc::new(ArtifactStore::in_memory()), clock.clone()));
        let t = Trainer::new("task", samples.clone(), reg.clone(), clock, policy, TrainParams::default());
        (t, samples, reg)
    }

    #[test]
    fn below_threshold_does_nothing() {
        let (t, s, _) = trainer(TrainerPolicy::default());
        fill(&s, 99, 0, false);
        assert!(matches!(t.poll_at_hour(2), TrainerAction::None { .. }));
    }

    #[test]
    fn outside_hours_waits_unless_overridden() {
        let (t, s, _) = trainer(TrainerPolicy::default());
        fill(&s, 100, 0, false);
        assert!(matches!(t.poll_at_hour(14), TrainerAction::None { .. }));
        assert!(matches!(t.poll_at_hour(3), TrainerAction::Trained { .. }));
        let p = TrainerPolicy { allowed_hours: (22, 4), ..Default::default() };
        assert!(p.hour_allowed(23) && p.hour_allowed(1) && !p.hour_allowed(12));
    }

    #[test]
    fn approval_gate_persists_until_approved() {
        let (t, s, reg) = trainer(TrainerPolicy {
            require_approval: true,
            override_hours: true,
            ..Default::default()
        });
        fill(&s, 120, 0, false);
        assert_eq!(t.poll_at_hour(12), TrainerAction::PendingApproval { new_samples: 120 });
        assert_eq!(t.poll_at_hour(12), TrainerAction::PendingApproval { new_samples: 120 });
        assert!(reg.deployed_ref("task").is_none());
        assert!(t.approve());
        assert!(matches!(t.poll_at_hour(12), TrainerAction::Trained { deployed: true, .. }));
        assert!(reg.deployed_ref("task").is_some());
        assert!(!t.status().pending_approval);
    }

    #[test]
    fn versions_chain_to_parent() {
        let (t, s, reg) = trainer(TrainerPolicy {
            override_hours: true,
            ..Default::default()
        });
        fill(&s, 100, 0, false);
        let TrainerAction::Trained { version_id: v1, parent: None, .. } = t.poll_at_hour(0) else { panic!() };
        fill(&s, 100, 100, false);
        let TrainerAction::Trained { parent, weights_ref, .. } = t.poll_at_hour(0) else { panic!() };
        assert_eq!(parent, Some(v1));
        assert_eq!(reg.deployed_ref("task"), Some(weights_ref));
    }

    #[test]
    fn failure_alerts_and_keeps_deployment() {
        let (t, s, reg) = trainer(TrainerPolicy {
            override_hours: true,
            scope: DatasetScope::NewSinceLast,
            ..Default::default()
        });
        fill(&s, 100, 0, false);
        assert!(matches!(t.poll_at_hour(0), TrainerAction::Trained { .. }));
        let before = reg.deployed_ref("task");
        fill(&s, 100, 100, true);
        assert!(matches!(t.poll_at_hour(0), TrainerAction::None { .. }));
        assert_eq!(reg.deployed_ref("task"), before);
        assert_eq!(t.status().alerts.len(), 1);
    }
}

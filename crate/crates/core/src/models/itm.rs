use std::collections::HashMap;

use parking_lot::Mutex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::slb::{EffectEvent, InteractionTimeModel, ItmError};

/// Keyed by an effect as `node.symbol` or by a cause state symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItmLookupEntry {
    pub key: String,
    pub mu_ns: i64,
    pub sigma_ns: i64,
}

/// Lookup table of Gaussian interaction times. Point mode returns the mean;
/// sampling mode draws `mu + sigma * z` truncated at zero and is meant for
/// evaluation studies only.
pub struct GaussianItm {
    entries: HashMap<String, ItmLookupEntry>,
    default_tau_ns: Option<i64>,
    sampler: Option<Mutex<ChaCha8Rng>>,
}

impl GaussianItm {
    pub fn new(entries: impl IntoIterator<Item = ItmLookupEntry>) -> Result<Self, ModelError> {
        let mut map = HashMap::new();
        for e in entries {
            if e.mu_ns < 0 || e.sigma_ns < 0 {
                return Err(ModelError::InvalidConfig(format!("{}: negative mu or sigma", e.key)));
            }
            map.insert(e.key.clone(), e);
        }
        Ok(Self {
            entries: map,
            default_tau_ns: None,
            sampler: None,
        })
    }

    pub fn with_default(mut self, tau_ns: i64) -> Self {
        self.default_tau_ns = Some(tau_ns.max(0));
        self
    }

    pub fn with_sampling(mut self, seed: u64) -> Self {
        self.sampler = Some(Mutex::new(ChaCha8Rng::seed_from_u64(seed)));
        self
    }

    fn entry_for(&self, cause_state: &str, effect: &EffectEvent) -> Option<&ItmLookupEntry> {
        self.entries
            .get(&format!("{}.{}", effect.node_id, effect.state.symbol))
            .or_else(|| self.entries.get(cause_state))
    }

    fn tau(&self, e: &ItmLookupEntry) -> i64 {
        match &self.sampler {
            None => e.mu_ns,
            Some(rng) => {
                let z: f64 = StandardNormal.sample(&mut *rng.lock());
                (e.mu_ns as f64 + e.sigma_ns as f64 * z).round().max(0.0) as i64
            }
        }
    }
}

impl InteractionTimeModel for GaussianItm {
    fn infer(&self, cause_state: &str, effects: &[EffectEvent]) -> Result<Vec<i64>, ItmError> {
        effects
            .iter()
            .map(|e| match self.entry_for(cause_state, e) {
                Some(entry) => Ok(self.tau(entry)),
                None => match self.default_tau_ns {
                    Some(d) => {
                        tracing::warn!(cause_state, effect = %e.state.symbol, "no interaction time entry; using default");
                        Ok(d)
                    }
                    None => Err(ItmError::MissingKey(format!("{cause_state}/{}.{}", e.node_id, e.state.symbol))),
                },
            })
            .collect()
    }
}

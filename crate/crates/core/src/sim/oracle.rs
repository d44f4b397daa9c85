use std::collections::HashMap;

use super::{GroundTruthEvent, EFFECT_NODE};
use crate::kg::{StateKind, StateSymbol};
use crate::slb::{EffectEvent, InteractionTimeModel, ItmError};

/// Perfect effect events, one per ground-truth entry, ids shared with the log.
pub fn oracle_esd(truth: &[GroundTruthEvent]) -> Vec<EffectEvent> {
    truth
        .iter()
        .map(|g| {
            EffectEvent::positive(
                g.event_id.clone(),
                StateSymbol::new(EFFECT_NODE, &g.effect_state, StateKind::Transition),
                g.effect_transition_ts_ns,
                1.0,
            )
        })
        .collect()
}

/// Returns each event's true lag, keyed by event id.
pub struct OracleItm {
    taus: HashMap<String, i64>,
}

impl OracleItm {
    pub fn new(truth: &[GroundTruthEvent]) -> Self {
        Self {
            taus: truth.iter().map(|g| (g.event_id.clone(), g.true_tau_ns)).collect(),
        }
    }

    pub fn tau(&self, event_id: &str) -> Option<i64> {
        self.taus.get(event_id).copied()
    }
}

impl InteractionTimeModel for OracleItm {
    fn infer(&self, _cause_state: &str, effects: &[EffectEvent]) -> Result<Vec<i64>, ItmError> {
        effects
            .iter()
            .map(|e| self.tau(&e.event_id).ok_or_else(|| ItmError::MissingKey(e.event_id.clone())))
            .collect()
    }
}

use serde::{Deserialize, Serialize};

use super::window::CauseWindow;
use crate::kg::StateSymbol;
use crate::stream::{secs_to_ns, SampleEnvelope, TimestampNs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    #[default]
    Positive,
    NegativeSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordPolarity {
    Positive,
    Negative,
}

/// Window of some stream referenced by an event.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureRef {
    pub topic: String,
    pub t0_ns: TimestampNs,
    pub t1_ns: TimestampNs,
}

/// Output of an effect state detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEvent {
    pub event_id: String,
    pub node_id: String,
    pub state: StateSymbol,
    pub transition_ts_ns: TimestampNs,
    pub confidence: f64,
    #[serde(default)]
    pub feature_ref: Option<FeatureRef>,
    #[serde(default)]
    pub polarity: Polarity,
}

impl EffectEvent {
    pub fn positive(
        event_id: impl Into<String>,
        state: StateSymbol,
        transition_ts_ns: TimestampNs,
        confidence: f64,
    ) -> Self {
        Self {
            event_id: event_id.into(),
            node_id: state.node_id.clone(),
            state,
            transition_ts_ns,
            confidence,
            feature_ref: None,
            polarity: Polarity::Positive,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(format!("confidence {} outside [0, 1]", self.confidence));
        }
        match self.polarity {
            Polarity::Positive => {
                if self.state.node_id != self.node_id {
                    return Err("state belongs to another node".into());
                }
                if self.transition_ts_ns <= 0 {
                    return Err("transition_ts_ns must be positive".into());
                }
            }
            Polarity::NegativeSample => match &self.feature_ref {
                Some(r) if r.t0_ns < r.t1_ns => {}
                Some(_) => return Err("background window must have t0 < t1".into()),
                None => return Err("negative sample needs a background window".into()),
            },
        }
        Ok(())
    }
}

/// Outcome of mapping cached effects to a cause state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum CauseResolution {
    Resolved {
        cause_state: String,
        row: usize,
        events: Vec<EffectEvent>,
    },
    /// Still waiting on effects from these nodes.
    Ambiguous {
        event_id: String,
        missing: Vec<String>,
    },
    /// Several rows with different causes completed at once; members evicted.
    Inconsistent {
        event_ids: Vec<String>,
        causes: Vec<String>,
    },
    Evicted {
        event_id: String,
    },
}

/// The three self-labeling values plus provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelfLabelRecord {
    pub record_id: String,
    pub workflow_id: String,
    pub cause_state: StateSymbol,
    pub cause_end_ts_ns: TimestampNs,
    pub duration_ns: i64,
    pub tau_ns: i64,
    pub contributing_effects: Vec<String>,
    /// Earliest transition among contributing effects (0 for negatives).
    #[serde(default)]
    pub earliest_effect_ts_ns: TimestampNs,
    pub polarity: RecordPolarity,
}

impl SelfLabelRecord {
    pub fn dedupe_key(workflow_id: &str, cause_end_ts_ns: TimestampNs) -> String {
        format!("{workflow_id}@{cause_end_ts_ns}")
    }

    pub fn window(&self) -> CauseWindow {
        CauseWindow {
            start_ns: self.cause_end_ts_ns - self.duration_ns,
            end_ns: self.cause_end_ts_ns,
            clamped: false,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.duration_ns <= 0 {
            return Err("duration must be positive".into());
        }
        if self.tau_ns < 0 {
            return Err("interaction time must be non-negative".into());
        }
        if self.polarity == RecordPolarity::Positive && self.cause_end_ts_ns >= self.earliest_effect_ts_ns {
            return Err(format!(
                "cause end {} not before earliest effect {}",
                self.cause_end_ts_ns, self.earliest_effect_ts_ns
            ));
        }
        Ok(())
    }
}

/// A cause-stream window packaged with its self-label (Mode 2).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSegment {
    pub record_id: String,
    pub workflow_id: String,
    pub label: String,
    pub polarity: RecordPolarity,
    pub window: CauseWindow,
    pub samples: Vec<SampleEnvelope>,
    pub empty_window: bool,
}

/// Receives Mode 2 segments.
pub trait SegmentSink: Send + Sync {
    fn accept(&self, segment: LabeledSegment);
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ItmError {
    #[error("interaction time model unavailable: {0}")]
    Unavailable(String),
    #[error("no interaction time entry for {0}")]
    MissingKey(String),
}

/// Interaction time model: one lag estimate per contributing effect.
pub trait InteractionTimeModel: Send + Sync {
    fn infer(&self, cause_state: &str, effects: &[EffectEvent]) -> Result<Vec<i64>, ItmError>;
}

/// How per-effect lags combine into one cause end when several effects
/// resolve one row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TauAggregation {
    /// cause_end = t_earliest - tau_earliest.
    #[default]
    EarliestEffect,
    /// cause_end = mean over effects of (t_i - tau_i).
    MeanImpliedEnd,
}

impl TauAggregation {
    /// Returns (cause_end, tau relative to the earliest effect).
    pub fn combine(self, effects: &[EffectEvent], taus: &[i64]) -> (TimestampNs, i64) {
        let earliest = effects
            .iter()
            .enumerate()
            .min_by_key(|(i, e)| (e.transition_ts_ns, *i))
            .map(|(i, _)| i)
            .expect("at least one effect");
        let t_first = effects[earliest].transition_ts_ns;
        match self {
            TauAggregation::EarliestEffect => (t_first - taus[earliest], taus[earliest]),
            TauAggregation::MeanImpliedEnd => {
                let sum: i128 = effects
                    .iter()
                    .zip(taus)
                    .map(|(e, t)| (e.transition_ts_ns - t) as i128)
                    .sum();
                let end = (sum as f64 / effects.len() as f64).round() as i64;
                (end, t_first - end)
            }
        }
    }
}

fn default_threshold() -> f64 {
    0.5
}
fn default_background() -> String {
    "background".into()
}
fn default_retry_budget() -> u32 {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowSpec {
    pub workflow_id: String,
    pub cause_node: String,
    pub effect_nodes: Vec<String>,
    pub truth_table_id: String,
    pub effect_event_topics: Vec<String>,
    pub cause_stream_topic: String,
    pub itm_ref: String,
    pub mode1_enabled: bool,
    pub mode2_enabled: bool,
    /// Cause window length d, seconds.
    pub cause_window_duration_s: f64,
    pub max_wait_s: f64,
    pub output_topic: String,
    #[serde(default = "default_threshold")]
    pub confidence_threshold: f64,
    #[serde(default = "default_background")]
    pub background_state: String,
    #[serde(default)]
    pub tau_aggregation: TauAggregation,
    #[serde(default = "default_retry_budget")]
    pub itm_retry_budget: u32,
}

impl WorkflowSpec {
    pub fn window_ns(&self) -> i64 {
        secs_to_ns(self.cause_window_duration_s)
    }

    pub fn max_wait_ns(&self) -> i64 {
        secs_to_ns(self.max_wait_s)
    }

    /// min(1 s, max_wait / 4).
    pub fn scan_period_ns(&self) -> i64 {
        (self.max_wait_ns() / 4).clamp(1, crate::stream::NANOS_PER_SEC)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.workflow_id.is_empty() {
            return Err("empty workflow_id".into());
        }
        if !(self.mode1_enabled || self.mode2_enabled) {
            return Err("at least one mode must be enabled".into());
        }
        if !(self.cause_window_duration_s > 0.0) || self.window_ns() <= 0 {
            return Err("cause_window_duration must be > 0".into());
        }
        if !(self.max_wait_s > 0.0) || self.max_wait_ns() <= 0 {
            return Err("max_wait must be > 0".into());
        }
        if self.effect_nodes.is_empty() {
            return Err("no effect nodes".into());
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err("confidence_threshold outside [0, 1]".into());
        }
        Ok(())
    }
}

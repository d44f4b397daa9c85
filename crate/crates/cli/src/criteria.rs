//! Pass/fail thresholds for benchmark and evaluation runs.

use adaptloop::models::TrainerAction;
use adaptloop::pipeline::{AdaptationReport, EndToEndReport};
use adaptloop::sim::SimConfig;

use crate::bench::{EdgeReport, ThroughputReport};
use crate::report::Check;

pub const BROKER_MIN_MSG_PER_S: f64 = 100_000.0;
pub const BROKER_MAX_MEAN_LATENCY_MS: f64 = 1000.0;
pub const EDGE_MIN_MSG_PER_S: f64 = 284.0;
pub const EDGE_MAX_MEAN_LATENCY_MS: f64 = 100.0;
pub const NOISY_MAX_ERROR_RATE: f64 = 0.05;
pub const NOISY_MIN_MEAN_IOU: f64 = 0.7;
pub const ADAPT_MIN_FROZEN_DROP: f64 = 0.10;
pub const ADAPT_MAX_GAP_TO_TWIN: f64 = 0.03;
pub const ADAPT_MIN_SAMPLES: usize = 100;

pub fn broker(r: &ThroughputReport) -> Vec<Check> {
    vec![
        Check::at_least("throughput msg/s", r.msg_per_s, BROKER_MIN_MSG_PER_S),
        Check::at_most("mean latency ms", r.latency.mean_ms, BROKER_MAX_MEAN_LATENCY_MS),
        Check::equals("lost", r.lost, 0),
        Check::equals("lagged", r.lagged, false),
    ]
}

pub fn edge(r: &EdgeReport) -> Vec<Check> {
    vec![
        Check::at_least("sustained msg/s", r.msg_per_s, EDGE_MIN_MSG_PER_S),
        Check::equals("rejected", r.rejected, 0),
        Check::equals("lost", r.lost, 0),
        Check::at_most("mean latency ms", r.latency.mean_ms, EDGE_MAX_MEAN_LATENCY_MS),
    ]
}

/// IoU may fall short of 1 by one cause-stream sample period.
pub fn oracle(sim: &SimConfig, r: &EndToEndReport) -> Vec<Check> {
    let min_iou = 1.0 - (1.0 / sim.cause_hz) / sim.interaction_s;
    vec![
        Check::equals("positive records", r.eval.positive_records, r.eval.truth_events),
        Check::equals("missed", r.eval.missed, 0),
        Check::at_least("label accuracy", r.eval.label_accuracy, 1.0),
        Check::at_least("min window IoU", r.eval.min_iou, min_iou),
        Check::equals("evicted", r.stats.evicted, 0),
    ]
}

pub fn noisy(r: &EndToEndReport) -> Vec<Check> {
    vec![
        Check::at_most("(missed+spurious)/events", r.eval.error_rate(), NOISY_MAX_ERROR_RATE),
        Check::at_least("mean window IoU", r.eval.mean_iou, NOISY_MIN_MEAN_IOU),
    ]
}

pub fn adaptation(r: &AdaptationReport) -> Vec<Check> {
    let retrained = matches!(r.retraining, TrainerAction::Trained { deployed: true, .. });
    vec![
        Check::at_least("frozen accuracy drop", r.frozen_drop(), ADAPT_MIN_FROZEN_DROP),
        Check::equals("retrained and deployed", retrained, true),
        Check::at_least(
            "post-drift self-labeled samples",
            r.samples_after_drift as f64,
            ADAPT_MIN_SAMPLES as f64,
        ),
        Check::at_most("twin minus retrained accuracy", r.gap_to_twin(), ADAPT_MAX_GAP_TO_TWIN),
    ]
}

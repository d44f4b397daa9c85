use serde::{Deserialize, Serialize};

use super::GroundTruthEvent;
use crate::slb::{RecordPolarity, SelfLabelRecord};
use crate::stream::TimestampNs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub truth_events: usize,
    pub positive_records: usize,
    pub matched: usize,
    /// Matched records whose cause label equals the truth label.
    pub label_accuracy: f64,
    /// Mean IoU over matched pairs.
    pub mean_iou: f64,
    pub min_iou: f64,
    pub missed: usize,
    pub spurious: usize,
    pub negative_records: usize,
    /// Negative records whose window overlaps a true interaction.
    pub negative_overlaps: usize,
}

impl EvalReport {
    /// (missed + spurious) / truth events.
    pub fn error_rate(&self) -> f64 {
        if self.truth_events == 0 {
            return if self.spurious == 0 { 0.0 } else { f64::INFINITY };
        }
        (self.missed + self.spurious) as f64 / self.truth_events as f64
    }
}

/// IoU of closed intervals `[a0, a1]` and `[b0, b1]`.
pub fn interval_iou(a0: TimestampNs, a1: TimestampNs, b0: TimestampNs, b1: TimestampNs) -> f64 {
    let inter = (a1.min(b1) - a0.max(b0)).max(0) as f64;
    let union = (a1.max(b1) - a0.min(b0)) as f64;
    if union <= 0.0 {
        return if a0 == b0 && a1 == b1 { 1.0 } else { 0.0 };
    }
    inter / union
}

/// Greedy matching of positive records to truth by cause-end proximity
/// (closest pairs first, each side used once, distance <= tolerance).
pub fn eval_report(records: &[SelfLabelRecord], truth: &[GroundTruthEvent], tolerance_ns: i64) -> EvalReport {
    let positives: Vec<&SelfLabelRecord> = records.iter().filter(|r| r.polarity == RecordPolarity::Positive).collect();
    let mut pairs: Vec<(i64, usize, usize)> = Vec::new();
    for (ri, r) in positives.iter().enumerate() {
        for (ti, t) in truth.iter().enumerate() {
            let dist = (r.cause_end_ts_ns - t.cause_end_ts_ns).abs();
            if dist <= tolerance_ns {
                pairs.push((dist, ri, ti));
            }
        }
    }
    pairs.sort_unstable();
    let mut r_used = vec![false; positives.len()];
    let mut t_used = vec![false; truth.len()];
    let (mut matched, mut correct, mut iou_sum, mut min_iou) = (0usize, 0usize, 0.0, f64::INFINITY);
    for (_, ri, ti) in pairs {
        if r_used[ri] || t_used[ti] {
            continue;
        }
        r_used[ri] = true;
        t_used[ti] = true;
        matched += 1;
        let (r, t) = (positives[ri], &truth[ti]);
        if r.cause_state.symbol == t.cause_state {
            correct += 1;
        }
        let iou = interval_iou(r.cause_end_ts_ns - r.duration_ns, r.cause_end_ts_ns, t.cause_start_ts_ns, t.cause_end_ts_ns);
        iou_sum += iou;
        min_iou = min_iou.min(iou);
    }
    let negatives: Vec<&SelfLabelRecord> = records.iter().filter(|r| r.polarity == RecordPolarity::Negative).collect();
    let negative_overlaps = negatives
        .iter()
        .filter(|r| {
            let (a0, a1) = (r.cause_end_ts_ns - r.duration_ns, r.cause_end_ts_ns);
            truth.iter().any(|t| a0 < t.cause_end_ts_ns && t.cause_start_ts_ns < a1)
        })
        .count();
    let ratio = |a: usize, b: usize| if b == 0 { f64::NAN } else { a as f64 / b as f64 };
    EvalReport {
        truth_events: truth.len(),
        positive_records: positives.len(),
        matched,
        label_accuracy: ratio(correct, matched),
        mean_iou: if matched == 0 { f64::NAN } else { iou_sum / matched as f64 },
        min_iou: if matched == 0 { f64::NAN } else { min_iou },
        missed: truth.len() - matched,
        spurious: positives.len() - matched,
        negative_records: negatives.len(),
        negative_overlaps,
    }
}

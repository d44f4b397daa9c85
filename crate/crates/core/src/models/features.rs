use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelError;
use crate::slb::{LabeledSegment, SegmentSink};
use crate::stream::{SampleEnvelope, TimestampNs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    /// 80/10/10 by hash of the record id.
    pub fn for_record(record_id: &str) -> Self {
        let h = Sha256::digest(record_id.as_bytes());
        match h[0] as u32 * 100 / 256 {
            0..80 => SplitTag::Train,
            80..90 => SplitTag::Val,
            _ => SplitTag::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub record_id: String,
    pub t0_ns: TimestampNs,
    pub t1_ns: TimestampNs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: String,
    pub provenance: Provenance,
    pub split_tag: SplitTag,
}

/// Per-channel mean then per-channel population std, concatenated. Channel
/// order follows the first sample's fields.
pub fn pool_features(samples: &[SampleEnvelope]) -> Result<Vec<f64>, ModelError> {
    let first = samples
        .first()
        .ok_or_else(|| ModelError::InvalidFeatures("empty window".into()))?;
    let Some(names) = first.payload.field_names() else {
        return Err(ModelError::InvalidFeatures("byte payload".into()));
    };
    let k = names.len();
    let n = samples.len() as f64;
    let mut sum = vec![0.0; k];
    let mut sq = vec![0.0; k];
    for s in samples {
        let vals: Vec<f64> = match s.payload.values() {
            Some(v) => v.collect(),
            None => return Err(ModelError::InvalidFeatures("byte payload".into())),
        };
        if vals.len() != k {
            return Err(ModelError::InvalidFeatures("channel count changed within window".into()));
        }
        for (i, v) in vals.into_iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    let means: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let stds = sq
        .iter()
        .zip(&means)
        .map(|(q, m)| (q / n - m * m).max(0.0).sqrt());
    let out: Vec<f64> = means.iter().copied().chain(stds).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::InvalidFeatures("non-finite feature".into()));
    }
    Ok(out)
}

/// Collects labeled samples from Mode 2 segments.
#[derive(Default)]
pub struct SampleStore {
    inner: Mutex<StoreInner>,
}

#[derive(Default)]
struct StoreInner {
    samples: Vec<LabeledSample>,
    skipped_empty: u64,
    skipped_invalid: u64,
}

impl SampleStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, sample: LabeledSample) {
        self.inner.lock().samples.push(sample);
    }

    pub fn len(&self) -> usize {
        self.inner.lock().samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> Vec<LabeledSample> {
        self.inner.lock().samples.clone()
    }

    pub fn since(&self, start: usize) -> Vec<LabeledSample> {
        let inner = self.inner.lock();
        inner.samples.get(start..).map(<[_]>::to_vec).unwrap_or_default()
    }

    /// (empty windows, windows with unusable payloads)
    pub fn skipped(&self) -> (u64, u64) {
        let inner = self.inner.lock();
        (inner.skipped_empty, inner.skipped_invalid)
    }
}

impl SegmentSink for SampleStore {
    fn accept(&self, segment: LabeledSegment) {
        if segment.empty_window {
            self.inner.lock().skipped_empty += 1;
            return;
        }
        match pool_features(&segment.samples) {
            Ok(features) => self.push(LabeledSample {
                features,
                label: segment.label,
                split_tag: SplitTag::for_record(&segment.record_id),
                provenance: Provenance {
                    record_id: segment.record_id,
                    t0_ns: segment.window.start_ns,
                    t1_ns: segment.window.end_ns,
                },
            }),
            Err(e) => {
                tracing::warn!(record = %segment.record_id, error = %e, "segment not usable as sample");
                self.inner.lock().skipped_invalid += 1;
            }
        }
    }
}

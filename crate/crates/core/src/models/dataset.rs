use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::artifacts::{sha256_hex, ArtifactStore};
use super::features::LabeledSample;
use super::ModelError;
use crate::stream::TimestampNs;

pub const DATASET_KIND: &str = "datasets";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetVersion {
    pub version_id: String,
    pub parent: Option<String>,
    pub sample_count: usize,
    pub created_ts_ns: TimestampNs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub version: DatasetVersion,
    /// Sorted by sample hash.
    pub samples: Vec<LabeledSample>,
}

pub fn sample_hash(sample: &LabeledSample) -> String {
    sha256_hex(&serde_json::to_vec(sample).expect("sample serializes"))
}

/// Snapshots `samples` as a content-addressed version: the id hashes the
/// sorted per-sample hashes, so any ordering of one multiset gives one id.
pub fn version_dataset(
    samples: Vec<LabeledSample>,
    parent: Option<String>,
    created_ts_ns: TimestampNs,
    artifacts: Option<&ArtifactStore>,
) -> Result<Dataset, ModelError> {
    let mut keyed: Vec<(String, LabeledSample)> = samples.into_iter().map(|s| (sample_hash(&s), s)).collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    let mut h = Sha256::new();
    for (k, _) in &keyed {
        h.update(k.as_bytes());
        h.update(b"\n");
    }
    let version = DatasetVersion {
        version_id: hex::encode(h.finalize()),
        parent,
        sample_count: keyed.len(),
        created_ts_ns,
    };
    let ds = Dataset {
        version,
        samples: keyed.into_iter().map(|(_, s)| s).collect(),
    };
    if let Some(store) = artifacts {
        let bytes = serde_json::to_vec(&ds).expect("dataset serializes");
        store.put_as(DATASET_KIND, &ds.version.version_id, &bytes)?;
    }
    Ok(ds)
}

impl Dataset {
    pub fn load(store: &ArtifactStore, version_id: &str) -> Result<Self, ModelError> {
        let bytes = store
            .get(DATASET_KIND, version_id)
            .ok_or_else(|| ModelError::UnknownDataset(version_id.to_string()))?;
        serde_json::from_slice(&bytes).map_err(|e| ModelError::Io(e.to_string()))
    }
}

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU32, Ordering};

use parking_lot::Mutex;

use super::types::SelfLabelRecord;
use crate::stream::TimestampNs;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SinkError {
    #[error("label sink unavailable: {0}")]
    Unavailable(String),
}

/// Destination for self-label records. Saving must be idempotent on
/// [`SelfLabelRecord::dedupe_key`]; `Ok(false)` reports a duplicate.
pub trait RecordSink: Send + Sync {
    fn save(&self, record: &SelfLabelRecord) -> Result<bool, SinkError>;
}

/// Record store, optionally backed by a JSON-lines file.
#[derive(Default)]
pub struct LabelStore {
    inner: Mutex<Inner>,
    fail_next: AtomicU32,
}

#[derive(Default)]
struct Inner {
    records: Vec<SelfLabelRecord>,
    keys: HashSet<String>,
    file: Option<(PathBuf, File)>,
}

impl LabelStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open(path: impl Into<PathBuf>) -> std::io::Result<Self> {
        let path = path.into();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut inner = Inner::default();
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                // torn tail from a crash
                let Ok(rec) = serde_json::from_str::<SelfLabelRecord>(&line) else { continue };
                if inner.keys.insert(SelfLabelRecord::dedupe_key(&rec.workflow_id, rec.cause_end_ts_ns)) {
                    inner.records.push(rec);
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        inner.file = Some((path, file));
        Ok(Self {
            inner: Mutex::new(inner),
            fail_next: AtomicU32::new(0),
        })
    }

    /// Makes the next `n` saves fail as unavailable.
    pub fn fail_next(&self, n: u32) {
        self.fail_next.store(n, Ordering::SeqCst);
    }

    pub fn len(&self) -> usize {
        self.inner.lock().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> Vec<SelfLabelRecord> {
        self.inner.lock().records.clone()
    }

    /// Records whose cause window overlaps `[t0, t1]`, in save order.
    pub fn query(
        &self,
        workflow_id: Option<&str>,
        t0: Option<TimestampNs>,
        t1: Option<TimestampNs>,
    ) -> Vec<SelfLabelRecord> {
        self.inner
            .lock()
            .records
            .iter()
            .filter(|r| workflow_id.is_none_or(|w| r.workflow_id == w))
            .filter(|r| t1.is_none_or(|t1| r.cause_end_ts_ns - r.duration_ns <= t1))
            .filter(|r| t0.is_none_or(|t0| r.cause_end_ts_ns >= t0))
            .cloned()
            .collect()
    }

    pub fn count(&self, workflow_id: &str) -> usize {
        self.inner.lock().records.iter().filter(|r| r.workflow_id == workflow_id).count()
    }
}

impl RecordSink for LabelStore {
    fn save(&self, record: &SelfLabelRecord) -> Result<bool, SinkError> {
        if self
            .fail_next
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok()
        {
            return Err(SinkError::Unavailable("injected failure".into()));
        }
        let mut inner = self.inner.lock();
        let key = SelfLabelRecord::dedupe_key(&record.workflow_id, record.cause_end_ts_ns);
        if inner.keys.contains(&key) {
            return Ok(false);
        }
        if let Some((path, file)) = inner.file.as_mut() {
            let mut line = serde_json::to_vec(record).expect("record serializes");
            line.push(b'\n');
            file.write_all(&line)
                .and_then(|_| file.flush())
                .map_err(|e| SinkError::Unavailable(format!("{}: {e}", path.display())))?;
        }
        inner.keys.insert(key);
        inner.records.push(record.clone());
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{StateKind, StateSymbol};
    use crate::slb::RecordPolarity;

    fn rec(wf: &str, end: i64) -> SelfLabelRecord {
        SelfLabelRecord {
            record_id: format!("{wf}-{end}"),
            workflow_id: wf.into(),
            cause_state: StateSymbol::new("hand", "press", StateKind::Transition),
            cause_end_ts_ns: end,
            duration_ns: 10,
            tau_ns: 5,
            contributing_effects: vec!["e".into()],
            earliest_effect_ts_ns: end + 5,
            polarity: RecordPolarity::Positive,
        }
    }

    #[test]
    fn dedupes_on_workflow_and_cause_end() {
        let s = LabelStore::new();
        assert_eq!(s.save(&rec("w", 100)), Ok(true));
        let mut again = rec("w", 100);
        again.record_id = "other".into();
        assert_eq!(s.save(&again), Ok(false));
        assert_eq!(s.save(&rec("v", 100)), Ok(true));
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn query_filters_by_overlap() {
        let s = LabelStore::new();
        for end in [100, 200, 300] {
            s.save(&rec("w", end)).unwrap();
        }
        assert_eq!(s.query(Some("w"), Some(195), Some(295)).len(), 2);
        assert_eq!(s.query(Some("x"), None, None).len(), 0);
    }

    #[test]
    fn injected_failures_then_recovery() {
        let s = LabelStore::new();
        s.fail_next(2);
        assert!(s.save(&rec("w", 1)).is_err());
        assert!(s.save(&rec("w", 1)).is_err());
        assert_eq!(s.save(&rec("w", 1)), Ok(true));
    }

    #[test]
    fn file_backed_reload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.jsonl");
        {
            let s = LabelStore::open(&path).unwrap();
            s.save(&rec("w", 1)).unwrap();
            s.save(&rec("w", 2)).unwrap();
        }
        let s = LabelStore::open(&path).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.save(&rec("w", 2)), Ok(false));
    }
}

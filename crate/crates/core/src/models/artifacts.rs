use std::collections::HashMap;
use std::path::PathBuf;

use parking_lot::RwLock;
use sha2::{Digest, Sha256};

use super::ModelError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content-addressed blobs grouped by kind (`datasets`, `weights`).
/// Files live at `{root}/{kind}/{hash}.json`; without a root, in memory.
#[derive(Default)]
pub struct ArtifactStore {
    root: Option<PathBuf>,
    mem: RwLock<HashMap<(String, String), Vec<u8>>>,
}

impl ArtifactStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ModelError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| ModelError::Io(e.to_string()))?;
        Ok(Self {
            root: Some(root),
            mem: RwLock::default(),
        })
    }

    fn path(&self, kind: &str, hash: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join(kind).join(format!("{hash}.json")))
    }

    /// Stores `bytes` and returns their hash. Idempotent.
    pub fn put(&self, kind: &str, bytes: &[u8]) -> Result<String, ModelError> {
        let hash = sha256_hex(bytes);
        self.put_as(kind, &hash, bytes)?;
        Ok(hash)
    }

    /// Stores under a caller-computed content hash.
    pub fn put_as(&self, kind: &str, hash: &str, bytes: &[u8]) -> Result<(), ModelError> {
        if let Some(path) = self.path(kind, hash) {
            if !path.exists() {
                let dir = path.parent().expect("kind dir");
                std::fs::create_dir_all(dir).map_err(|e| ModelError::Io(e.to_string()))?;
                let tmp = dir.join(format!(".{hash}.tmp"));
                std::fs::write(&tmp, bytes)
                    .and_then(|_| std::fs::rename(&tmp, &path))
                    .map_err(|e| ModelError::Io(e.to_string()))?;
            }
        }
        self.mem
            .write()
            .entry((kind.to_string(), hash.to_string()))
            .or_insert_with(|| bytes.to_vec());
        Ok(())
    }

    pub fn get(&self, kind: &str, hash: &str) -> Option<Vec<u8>> {
        if let Some(b) = self.mem.read().get(&(kind.to_string(), hash.to_string())) {
            return Some(b.clone());
        }
        let bytes = std::fs::read(self.path(kind, hash)?).ok()?;
        self.mem
            .write()
            .insert((kind.to_string(), hash.to_string()), bytes.clone());
        Some(bytes)
    }

    pub fn contains(&self, kind: &str, hash: &str) -> bool {
        self.mem.read().contains_key(&(kind.to_string(), hash.to_string()))
            || self.path(kind, hash).is_some_and(|p| p.exists())
    }
}

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use super::table::{validate_table, TruthTable};
use super::{KgEdge, KgError, KgNode};

/// On-disk / wire format of a knowledge graph.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KgDocument {
    #[serde(default)]
    pub nodes: Vec<KgNode>,
    #[serde(default)]
    pub edges: Vec<KgEdge>,
    #[serde(default)]
    pub truth_tables: Vec<TruthTable>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalPair {
    pub cause_node: String,
    pub effect_nodes: Vec<String>,
    pub table_id: String,
}

/// Immutable view of the store at one version.
#[derive(Debug, Clone, Default)]
pub struct KgSnapshot {
    pub version: u64,
    pub nodes: BTreeMap<String, KgNode>,
    pub edges: BTreeMap<String, KgEdge>,
    pub tables: BTreeMap<String, TruthTable>,
}

impl KgSnapshot {
    pub fn node(&self, id: &str) -> Option<&KgNode> {
        self.nodes.get(id)
    }

    pub fn table(&self, id: &str) -> Option<&TruthTable> {
        self.tables.get(id)
    }

    pub fn table_for(&self, cause: &str, effects: &[String]) -> Option<&TruthTable> {
        self.tables
            .values()
            .find(|t| t.cause_node == cause && t.effect_nodes == effects)
    }

    pub fn to_document(&self) -> KgDocument {
        KgDocument {
            nodes: self.nodes.values().cloned().collect(),
            edges: self.edges.values().cloned().collect(),
            truth_tables: self.tables.values().cloned().collect(),
        }
    }
}

/// Copy-on-write store: writers are serialized and publish a new snapshot;
/// readers take an `Arc` to a complete snapshot.
pub struct KgStore {
    current: RwLock<Arc<KgSnapshot>>,
    write: Mutex<()>,
    path: Option<PathBuf>,
}

impl Default for KgStore {
    fn default() -> Self {
        Self::new()
    }
}

impl KgStore {
    pub fn new() -> Self {
        Self {
            current: RwLock::new(Arc::new(KgSnapshot::default())),
            write: Mutex::new(()),
            path: None,
        }
    }

    /// Store backed by a JSON file; loads it if present and rewrites it on every change.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, KgError> {
        let path = path.into();
        let mut store = Self::new();
        if path.is_file() {
            let bytes = std::fs::read(&path).map_err(|e| KgError::Io(e.to_string()))?;
            let doc: KgDocument = serde_json::from_slice(&bytes).map_err(|e| KgError::Io(e.to_string()))?;
            store.import(doc)?;
        }
        store.path = Some(path);
        Ok(store)
    }

    pub fn snapshot(&self) -> Arc<KgSnapshot> {
        Arc::clone(&self.current.read())
    }

    fn mutate<T>(&self, f: impl FnOnce(&mut KgSnapshot) -> Result<(T, bool), KgError>) -> Result<T, KgError> {
        let _guard = self.write.lock();
        let mut next = (*self.snapshot()).clone();
        let (out, changed) = f(&mut next)?;
        if changed {
            next.version += 1;
            if let Some(path) = &self.path {
                let json = serde_json::to_vec_pretty(&next.to_document()).expect("kg serializes");
                let tmp = path.with_extension("json.tmp");
                std::fs::write(&tmp, json).map_err(|e| KgError::Io(e.to_string()))?;
                std::fs::rename(&tmp, path).map_err(|e| KgError::Io(e.to_string()))?;
            }
            *self.current.write() = Arc::new(next);
        }
        Ok(out)
    }

    pub fn upsert_node(&self, node: KgNode) -> Result<String, KgError> {
        node.validate()?;
        self.mutate(|snap| {
            if snap.nodes.get(&node.node_id) == Some(&node) {
                return Ok((node.node_id.clone(), false));
            }
            let id = node.node_id.clone();
            snap.nodes.insert(id.clone(), node);
            for table in snap.tables.values() {
                if table.cause_node == id || table.effect_nodes.contains(&id) {
                    let report = validate_table(table, |n| snap.nodes.get(n));
                    if !report.is_ok() {
                        return Err(KgError::AlphabetInUse(table.table_id.clone()));
                    }
                }
            }
            Ok((id, true))
        })
    }

    pub fn upsert_edge(&self, edge: KgEdge) -> Result<String, KgError> {
        if edge.edge_id.is_empty() {
            return Err(KgError::InvalidEdge("empty edge_id".into()));
        }
        if edge.from_node == edge.to_node {
            return Err(KgError::InvalidEdge(format!("self-loop on {}", edge.from_node)));
        }
        self.mutate(|snap| {
            for endpoint in [&edge.from_node, &edge.to_node] {
                if !snap.nodes.contains_key(endpoint) {
                    return Err(KgError::DanglingEndpoint(endpoint.clone()));
                }
            }
            if snap.edges.get(&edge.edge_id) == Some(&edge) {
                return Ok((edge.edge_id.clone(), false));
            }
            let id = edge.edge_id.clone();
            snap.edges.insert(id.clone(), edge);
            Ok((id, true))
        })
    }

    pub fn validate_table(&self, table: &TruthTable) -> super::ValidationReport {
        let snap = self.snapshot();
        validate_table(table, |n| snap.nodes.get(n))
    }

    pub fn put_truth_table(&self, table: TruthTable) -> Result<String, KgError> {
        self.mutate(|snap| {
            let report = validate_table(&table, |n| snap.nodes.get(n));
            if !report.is_ok() {
                return Err(KgError::InvalidTable(report));
            }
            if let Some(other) = snap.table_for(&table.cause_node, &table.effect_nodes) {
                if other.table_id != table.table_id {
                    return Err(KgError::DuplicateKey {
                        existing: other.table_id.clone(),
                        cause: table.cause_node.clone(),
                        effects: table.effect_nodes.clone(),
                    });
                }
            }
            if snap.tables.get(&table.table_id) == Some(&table) {
                return Ok((table.table_id.clone(), false));
            }
            let id = table.table_id.clone();
            snap.tables.insert(id.clone(), table);
            Ok((id, true))
        })
    }

    pub fn get_truth_table(&self, cause_node: &str, effect_nodes: &[String]) -> Result<TruthTable, KgError> {
        self.snapshot()
            .table_for(cause_node, effect_nodes)
            .cloned()
            .ok_or_else(|| KgError::NoTable {
                cause: cause_node.to_string(),
                effects: effect_nodes.to_vec(),
            })
    }

    pub fn table_by_id(&self, table_id: &str) -> Result<TruthTable, KgError> {
        self.snapshot()
            .table(table_id)
            .cloned()
            .ok_or_else(|| KgError::UnknownTable(table_id.to_string()))
    }

    /// Pairs are defined by truth tables, not by edges.
    pub fn list_causal_pairs(&self) -> Vec<CausalPair> {
        self.snapshot()
            .tables
            .values()
            .map(|t| CausalPair {
                cause_node: t.cause_node.clone(),
                effect_nodes: t.effect_nodes.clone(),
                table_id: t.table_id.clone(),
            })
            .collect()
    }

    pub fn export(&self) -> KgDocument {
        self.snapshot().to_document()
    }

    /// Loads a document: nodes first, then edges, then tables.
    pub fn import(&self, doc: KgDocument) -> Result<(), KgError> {
        for node in doc.nodes {
            self.upsert_node(node)?;
        }
        for edge in doc.edges {
            self.upsert_edge(edge)?;
        }
        for table in doc.truth_tables {
            self.put_truth_table(table)?;
        }
        Ok(())
    }
}

//! Causal knowledge graphs and truth tables.

mod sample;
mod store;
mod table;

use serde::{Deserialize, Serialize};

pub use sample::printer_kg;
pub use store::{CausalPair, KgDocument, KgSnapshot, KgStore};
pub use table::{validate_table, EffectPattern, RowConflict, TruthRow, TruthTable, ValidationReport, WILDCARD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    #[default]
    Transition,
    Level,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateDef {
    pub symbol: String,
    #[serde(default)]
    pub kind: StateKind,
}

/// A state symbol qualified by its node.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateSymbol {
    pub node_id: String,
    pub symbol: String,
    #[serde(default)]
    pub kind: StateKind,
}

impl StateSymbol {
    pub fn new(node_id: impl Into<String>, symbol: impl Into<String>, kind: StateKind) -> Self {
        Self {
            node_id: node_id.into(),
            symbol: symbol.into(),
            kind,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeBindings {
    #[serde(default)]
    pub topics: Vec<String>,
    #[serde(default)]
    pub esd_service: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgNode {
    pub node_id: String,
    pub label: String,
    pub state_alphabet: Vec<StateDef>,
    #[serde(default)]
    pub bindings: NodeBindings,
}

impl KgNode {
    pub fn new(node_id: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            node_id: node_id.into(),
            label: label.into(),
            state_alphabet: Vec::new(),
            bindings: NodeBindings::default(),
        }
    }

    pub fn with_state(mut self, symbol: impl Into<String>, kind: StateKind) -> Self {
        self.state_alphabet.push(StateDef {
            symbol: symbol.into(),
            kind,
        });
        self
    }

    pub fn has_state(&self, symbol: &str) -> bool {
        self.state_alphabet.iter().any(|s| s.symbol == symbol)
    }

    pub fn state(&self, symbol: &str) -> Option<StateSymbol> {
        self.state_alphabet
            .iter()
            .find(|s| s.symbol == symbol)
            .map(|s| StateSymbol::new(&self.node_id, &s.symbol, s.kind))
    }

    fn validate(&self) -> Result<(), KgError> {
        if self.node_id.is_empty() {
            return Err(KgError::InvalidNode("empty node_id".into()));
        }
        if self.state_alphabet.is_empty() {
            return Err(KgError::InvalidNode(format!("{}: empty state alphabet", self.node_id)));
        }
        for (i, s) in self.state_alphabet.iter().enumerate() {
            if s.symbol.is_empty() || s.symbol == WILDCARD {
                return Err(KgError::InvalidNode(format!("{}: bad symbol {:?}", self.node_id, s.symbol)));
            }
            if self.state_alphabet[..i].iter().any(|o| o.symbol == s.symbol) {
                return Err(KgError::InvalidNode(format!(
                    "{}: duplicate symbol {}",
                    self.node_id, s.symbol
                )));
            }
        }
        Ok(())
    }
}

/// Directed interaction link. A bidirectional relation is two edges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgEdge {
    pub edge_id: String,
    pub from_node: String,
    pub to_node: String,
}

impl KgEdge {
    pub fn new(edge_id: impl Into<String>, from: impl Into<String>, to: impl Into<String>) -> Self {
        Self {
            edge_id: edge_id.into(),
            from_node: from.into(),
            to_node: to.into(),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum KgError {
    #[error("invalid node: {0}")]
    InvalidNode(String),
    #[error("invalid edge: {0}")]
    InvalidEdge(String),
    #[error("dangling edge endpoint {0}")]
    DanglingEndpoint(String),
    #[error("truth table rejected: {}", describe(.0))]
    InvalidTable(ValidationReport),
    #[error("table {existing} already holds key ({cause}, {effects:?})")]
    DuplicateKey {
        existing: String,
        cause: String,
        effects: Vec<String>,
    },
    #[error("node change would orphan symbols used by table {0}")]
    AlphabetInUse(String),
    #[error("no truth table for ({cause}, {effects:?})")]
    NoTable { cause: String, effects: Vec<String> },
    #[error("unknown table {0}")]
    UnknownTable(String),
    #[error("io: {0}")]
    Io(String),
}

fn describe(report: &ValidationReport) -> String {
    let mut parts: Vec<String> = report.errors.clone();
    if !report.conflicts.is_empty() {
        parts.push(format!(
            "ambiguous rows: {}",
            report
                .conflicts
                .iter()
                .map(|c| format!("{}/{}", c.row_a, c.row_b))
                .collect::<Vec<_>>()
                .join(", ")
        ));
    }
    parts.join("; ")
}

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::KgNode;

/// One position of a truth-table row: a concrete effect state or "don't care".
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum EffectPattern {
    Any,
    Is(String),
}

pub const WILDCARD: &str = "*";

impl EffectPattern {
    pub fn is(symbol: impl Into<String>) -> Self {
        EffectPattern::Is(symbol.into())
    }

    pub fn matches(&self, symbol: &str) -> bool {
        match self {
            EffectPattern::Any => true,
            EffectPattern::Is(s) => s == symbol,
        }
    }

    pub fn symbol(&self) -> Option<&str> {
        match self {
            EffectPattern::Any => None,
            EffectPattern::Is(s) => Some(s),
        }
    }

    /// Two patterns share at least one concrete expansion.
    pub fn overlaps(&self, other: &EffectPattern) -> bool {
        match (self, other) {
            (EffectPattern::Is(a), EffectPattern::Is(b)) => a == b,
            _ => true,
        }
    }
}

impl fmt::Display for EffectPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EffectPattern::Any => f.write_str(WILDCARD),
            EffectPattern::Is(s) => f.write_str(s),
        }
    }
}

impl Serialize for EffectPattern {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EffectPattern {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(if s == WILDCARD {
            EffectPattern::Any
        } else {
            EffectPattern::Is(s)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRow {
    pub effects: Vec<EffectPattern>,
    pub cause: String,
}

impl TruthRow {
    pub fn new<I, S>(effects: I, cause: impl Into<String>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            effects: effects
                .into_iter()
                .map(|s| {
                    let s = s.as_ref();
                    if s == WILDCARD {
                        EffectPattern::Any
                    } else {
                        EffectPattern::is(s)
                    }
                })
                .collect(),
            cause: cause.into(),
        }
    }

    /// Indices of non-wildcard positions, i.e. the effects this row waits for.
    pub fn required_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.effects
            .iter()
            .enumerate()
            .filter(|(_, p)| matches!(p, EffectPattern::Is(_)))
            .map(|(i, _)| i)
    }

    fn overlaps(&self, other: &TruthRow) -> bool {
        self.effects.len() == other.effects.len()
            && self.effects.iter().zip(&other.effects).all(|(a, b)| a.overlaps(b))
    }
}

/// Mapping from tuples of effect states (one per effect node) to a cause state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthTable {
    pub table_id: String,
    pub cause_node: String,
    pub effect_nodes: Vec<String>,
    pub rows: Vec<TruthRow>,
    /// Window within which all members of a tuple must arrive.
    pub max_wait_ns: i64,
}

impl TruthTable {
    pub fn key(&self) -> (String, Vec<String>) {
        (self.cause_node.clone(), self.effect_nodes.clone())
    }

    pub fn effect_position(&self, node_id: &str) -> Option<usize> {
        self.effect_nodes.iter().position(|n| n == node_id)
    }

    /// Cause states of every row matching a fully specified tuple.
    pub fn lookup<'a>(&'a self, tuple: &'a [&str]) -> impl Iterator<Item = &'a str> + 'a {
        self.rows
            .iter()
            .filter(move |r| r.effects.len() == tuple.len() && r.effects.iter().zip(tuple).all(|(p, s)| p.matches(s)))
            .map(|r| r.cause.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowConflict {
    pub row_a: usize,
    pub row_b: usize,
    pub cause_a: String,
    pub cause_b: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub conflicts: Vec<RowConflict>,
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.conflicts.is_empty() && self.errors.is_empty()
    }
}

/// Checks a table against the node alphabets. `lookup_node` resolves node ids.
///
/// Conflicts are found pairwise: two rows overlap iff every position pair
/// overlaps (wildcard overlaps anything), which is exactly when their
/// wildcard expansions share a tuple.
pub fn validate_table<'a, F>(table: &TruthTable, lookup_node: F) -> ValidationReport
where
    F: Fn(&str) -> Option<&'a KgNode>,
{
    let mut report = ValidationReport::default();
    if table.table_id.is_empty() {
        report.errors.push("empty table_id".into());
    }
    if table.max_wait_ns <= 0 {
        report.errors.push("max_wait must be positive".into());
    }
    if table.effect_nodes.is_empty() {
        report.errors.push("table needs at least one effect node".into());
    }
    for (i, n) in table.effect_nodes.iter().enumerate() {
        if table.effect_nodes[..i].contains(n) {
            report.errors.push(format!("effect node {n} listed twice"));
        }
        if *n == table.cause_node {
            report.errors.push(format!("node {n} is both cause and effect"));
        }
    }
    let cause = lookup_node(&table.cause_node);
    if cause.is_none() {
        report.errors.push(format!("unknown cause node {}", table.cause_node));
    }
    let effects: Vec<Option<&KgNode>> = table.effect_nodes.iter().map(|n| lookup_node(n)).collect();
    for (n, node) in table.effect_nodes.iter().zip(&effects) {
        if node.is_none() {
            report.errors.push(format!("unknown effect node {n}"));
        }
    }
    if table.rows.is_empty() {
        report.warnings.push("table has no rows".into());
    }
    for (i, row) in table.rows.iter().enumerate() {
        if row.effects.len() != table.effect_nodes.len() {
            report.errors.push(format!(
                "row {i} has arity {} but table has {} effect nodes",
                row.effects.len(),
                table.effect_nodes.len()
            ));
            continue;
        }
        if row.required_positions().next().is_none() {
            report.errors.push(format!("row {i} is all wildcards"));
        }
        if let Some(cause) = cause {
            if !cause.has_state(&row.cause) {
                report
                    .errors
                    .push(format!("row {i}: cause state {} not in {} alphabet", row.cause, cause.node_id));
            }
        }
        for (pattern, node) in row.effects.iter().zip(&effects) {
            if let (Some(symbol), Some(node)) = (pattern.symbol(), node) {
                if !node.has_state(symbol) {
                    report
                        .errors
                        .push(format!("row {i}: effect state {symbol} not in {} alphabet", node.node_id));
                }
            }
        }
    }
    for i in 0..table.rows.len() {
        for j in i + 1..table.rows.len() {
            let (a, b) = (&table.rows[i], &table.rows[j]);
            if a.cause != b.cause && a.overlaps(b) {
                report.conflicts.push(RowConflict {
                    row_a: i,
                    row_b: j,
                    cause_a: a.cause.clone(),
                    cause_b: b.cause.clone(),
                });
            }
        }
    }
    report
}

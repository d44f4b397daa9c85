//! Causal state mapping over a FIFO of effect events.
//!
//! Matching policy, applied on every scan:
//!
//! 1. Walk cached events in arrival order; each unconsumed event in turn is the
//!    anchor.
//! 2. Candidate rows are those whose pattern at the anchor's node is the
//!    anchor's state (wildcard positions do not wait for an event).
//! 3. A candidate completes when, for each other required position, some later
//!    cached event of that node with a matching state arrived within
//!    `max_wait` of the anchor; the earliest such event is taken.
//! 4. No completed row: the anchor stays (Ambiguous) unless it arrived more
//!    than `max_wait` before `now`, or its state appears in no row, in which
//!    case it is Evicted.
//! 5. Completed rows that all name the same cause: the first one in table
//!    order is Resolved and its events consumed. Different causes: the
//!    tuple is Inconsistent and every member of every completed row is evicted.
//!
//! The state machine is deterministic in (FIFO contents, now).

use std::collections::VecDeque;

use super::types::{CauseResolution, EffectEvent, Polarity};
use super::SlbError;
use crate::kg::{EffectPattern, KgSnapshot, TruthTable};
use crate::stream::TimestampNs;

#[derive(Debug, Clone, PartialEq)]
pub struct CachedEvent {
    pub event: EffectEvent,
    pub arrival_ns: TimestampNs,
    /// Index of the event's node in the table's effect list.
    pub position: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnqueueOutcome {
    Queued { fifo_len: usize },
    /// Confidence below the workflow threshold; not cached.
    Gated,
    /// Negative samples bypass the FIFO.
    Negative,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CoreCounts {
    pub received_positive: u64,
    pub consumed: u64,
    pub evicted: u64,
    pub inconsistent: u64,
    pub gated: u64,
}

enum AnchorResult {
    Resolved { row: usize, members: Vec<usize> },
    Conflict { members: Vec<usize>, causes: Vec<String> },
    Incomplete { missing: Vec<String>, matchable: bool },
}

pub struct WorkflowCore {
    table: TruthTable,
    max_wait_ns: i64,
    confidence_threshold: f64,
    fifo: VecDeque<CachedEvent>,
    counts: CoreCounts,
}

impl WorkflowCore {
    pub fn new(table: TruthTable, max_wait_ns: i64, confidence_threshold: f64) -> Self {
        Self {
            table,
            max_wait_ns,
            confidence_threshold,
            fifo: VecDeque::new(),
            counts: CoreCounts::default(),
        }
    }

    pub fn table(&self) -> &TruthTable {
        &self.table
    }

    pub fn fifo(&self) -> &VecDeque<CachedEvent> {
        &self.fifo
    }

    pub fn counts(&self) -> &CoreCounts {
        &self.counts
    }

    /// Validates and caches a positive event. `kg` (when given) checks the
    /// state against the node alphabet.
    pub fn enqueue(
        &mut self,
        event: EffectEvent,
        arrival_ns: TimestampNs,
        kg: Option<&KgSnapshot>,
    ) -> Result<EnqueueOutcome, SlbError> {
        event.validate().map_err(SlbError::InvalidEvent)?;
        if event.polarity == Polarity::NegativeSample {
            return Ok(EnqueueOutcome::Negative);
        }
        let position = self
            .table
            .effect_position(&event.node_id)
            .ok_or_else(|| SlbError::UnknownNode(event.node_id.clone()))?;
        if let Some(node) = kg.and_then(|k| k.node(&event.node_id)) {
            if !node.has_state(&event.state.symbol) {
                return Err(SlbError::InvalidEvent(format!(
                    "state {} not in {} alphabet",
                    event.state.symbol, event.node_id
                )));
            }
        }
        if event.confidence < self.confidence_threshold {
            self.counts.gated += 1;
            return Ok(EnqueueOutcome::Gated);
        }
        if let Some(last) = self.fifo.back() {
            if arrival_ns < last.arrival_ns {
                return Err(SlbError::InvalidEvent("arrival time went backwards".into()));
            }
        }
        self.counts.received_positive += 1;
        self.fifo.push_back(CachedEvent {
            event,
            arrival_ns,
            position,
        });
        Ok(EnqueueOutcome::Queued {
            fifo_len: self.fifo.len(),
        })
    }

    fn try_anchor(&self, i: usize) -> AnchorResult {
        let anchor = &self.fifo[i];
        let symbol = anchor.event.state.symbol.as_str();
        let mut completed: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut missing: Vec<String> = Vec::new();
        let mut matchable = false;
        for (r, row) in self.table.rows.iter().enumerate() {
            match &row.effects[anchor.position] {
                EffectPattern::Is(s) if s == symbol => {}
                _ => continue,
            }
            matchable = true;
            let mut members = vec![i];
            let mut complete = true;
            for q in row.required_positions().filter(|&q| q != anchor.position) {
                let pattern = &row.effects[q];
                let found = (i + 1..self.fifo.len()).find(|&j| {
                    let c = &self.fifo[j];
                    c.position == q
                        && pattern.matches(&c.event.state.symbol)
                        && c.arrival_ns - anchor.arrival_ns <= self.max_wait_ns
                });
                match found {
                    Some(j) => members.push(j),
                    None => {
                        complete = false;
                        let node = &self.table.effect_nodes[q];
                        if !missing.contains(node) {
                            missing.push(node.clone());
                        }
                    }
                }
            }
            if complete {
                completed.push((r, members));
            }
        }
        if completed.is_empty() {
            return AnchorResult::Incomplete { missing, matchable };
        }
        let first_cause = &self.table.rows[completed[0].0].cause;
        if completed.iter().all(|(r, _)| &self.table.rows[*r].cause == first_cause) {
            let (row, members) = completed.swap_remove(0);
            return AnchorResult::Resolved { row, members };
        }
        let mut members: Vec<usize> = completed.iter().flat_map(|(_, m)| m.iter().copied()).collect();
        members.sort_unstable();
        members.dedup();
        let mut causes: Vec<String> = Vec::new();
        for (r, _) in &completed {
            let c = &self.table.rows[*r].cause;
            if !causes.contains(c) {
                causes.push(c.clone());
            }
        }
        AnchorResult::Conflict { members, causes }
    }

    fn take(&mut self, mut members: Vec<usize>) -> Vec<EffectEvent> {
        members.sort_unstable_by(|a, b| b.cmp(a));
        let mut events: Vec<(TimestampNs, usize, EffectEvent)> = members
            .into_iter()
            .map(|j| {
                let c = self.fifo.remove(j).expect("member index");
                (c.arrival_ns, j, c.event)
            })
            .collect();
        events.sort_by_key(|(a, j, _)| (*a, *j));
        events.into_iter().map(|(_, _, e)| e).collect()
    }

    /// One scan at `now_ns`. `evict` is false only while draining at stop.
    pub fn scan(&mut self, now_ns: TimestampNs, evict: bool) -> Vec<CauseResolution> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < self.fifo.len() {
            match self.try_anchor(i) {
                AnchorResult::Resolved { row, members } => {
                    let cause_state = self.table.rows[row].cause.clone();
                    let events = self.take(members);
                    self.counts.consumed += events.len() as u64;
                    out.push(CauseResolution::Resolved {
                        cause_state,
                        row,
                        events,
                    });
                }
                AnchorResult::Conflict { members, causes } => {
                    let events = self.take(members);
                    self.counts.evicted += events.len() as u64;
                    self.counts.inconsistent += 1;
                    tracing::warn!(?causes, "inconsistent effect tuple evicted");
                    out.push(CauseResolution::Inconsistent {
                        event_ids: events.into_iter().map(|e| e.event_id).collect(),
                        causes,
                    });
                }
                AnchorResult::Incomplete { missing, matchable } => {
                    let expired = self.fifo[i].arrival_ns < now_ns.saturating_sub(self.max_wait_ns);
                    if evict && (expired || !matchable) {
                        let c = self.fifo.remove(i).expect("anchor");
                        self.counts.evicted += 1;
                        tracing::debug!(event = %c.event.event_id, "effect evicted");
                        out.push(CauseResolution::Evicted {
                            event_id: c.event.event_id,
                        });
                    } else {
                        out.push(CauseResolution::Ambiguous {
                            event_id: self.fifo[i].event.event_id.clone(),
                            missing,
                        });
                        i += 1;
                    }
                }
            }
        }
        out
    }

    /// Resolves what can be resolved without eviction, then discards the
    /// rest. Returns the resolutions and the number discarded.
    pub fn drain(&mut self) -> (Vec<CauseResolution>, u64) {
        let resolutions: Vec<CauseResolution> = self
            .scan(TimestampNs::MAX, false)
            .into_iter()
            .filter(|r| !matches!(r, CauseResolution::Ambiguous { .. }))
            .collect();
        let left = self.fifo.len() as u64;
        self.fifo.clear();
        (resolutions, left)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{StateKind, StateSymbol, TruthRow};

    const S: i64 = 1_000_000_000;

    fn table(nodes: &[&str], rows: Vec<TruthRow>, max_wait_ns: i64) -> TruthTable {
        TruthTable {
            table_id: "t".into(),
            cause_node: "cause".into(),
            effect_nodes: nodes.iter().map(|s| s.to_string()).collect(),
            rows,
            max_wait_ns,
        }
    }

    fn ev(id: &str, node: &str, state: &str, ts: i64) -> EffectEvent {
        EffectEvent::positive(id, StateSymbol::new(node, state, StateKind::Transition), ts, 0.9)
    }

    #[test]
    fn single_row_single_effect_resolves() {
        let t = table(&["power"], vec![TruthRow::new(["on"], "press")], 5 * S);
        let mut core = WorkflowCore::new(t, 5 * S, 0.5);
        core.enqueue(ev("a", "power", "on", 10 * S), 10 * S, None).unwrap();
        let res = core.scan(10 * S, true);
        assert!(matches!(&res[..], [CauseResolution::Resolved { cause_state, .. }] if cause_state == "press"));
        assert!(core.fifo().is_empty());
    }

    #[test]
    fn incomplete_tuple_evicted_after_max_wait() {
        let max_wait = 5 * S;
        let t = table(&["power", "temp"], vec![TruthRow::new(["on", "hot"], "start")], max_wait);
        let mut core = WorkflowCore::new(t, max_wait, 0.5);
        core.enqueue(ev("a", "power", "on", 10 * S), 10 * S, None).unwrap();
        let res = core.scan(10 * S + max_wait, true);
        assert!(matches!(&res[..], [CauseResolution::Ambiguous { missing, .. }] if missing == &["temp".to_string()]));
        let res = core.scan(10 * S + max_wait + 1, true);
        assert!(matches!(&res[..], [CauseResolution::Evicted { event_id }] if event_id == "a"));
        assert!(core.fifo().is_empty());
    }

    #[test]
    fn two_effect_row_resolves_consuming_both() {
        let t = table(
            &["power", "temp"],
            vec![TruthRow::new(["on", "hot"], "start"), TruthRow::new(["on", "cold"], "poke")],
            5 * S,
        );
        let mut core = WorkflowCore::new(t, 5 * S, 0.5);
        core.enqueue(ev("a", "power", "on", 10 * S), 10 * S, None).unwrap();
        core.enqueue(ev("b", "temp", "hot", 12 * S), 12 * S, None).unwrap();
        let res = core.scan(12 * S, true);
        match &res[..] {
            [CauseResolution::Resolved { cause_state, events, .. }] => {
                assert_eq!(cause_state, "start");
                assert_eq!(events.len(), 2);
            }
            other => panic!("{other:?}"),
        }
        assert!(core.fifo().is_empty());
    }

    #[test]
    fn unknown_node_rejected_and_low_confidence_gated() {
        let t = table(&["power"], vec![TruthRow::new(["on"], "press")], S);
        let mut core = WorkflowCore::new(t, S, 0.5);
        assert_eq!(
            core.enqueue(ev("a", "door", "open", 1), 1, None),
            Err(SlbError::UnknownNode("door".into()))
        );
        let mut low = ev("b", "power", "on", 1);
        low.confidence = 0.2;
        assert_eq!(core.enqueue(low, 1, None).unwrap(), EnqueueOutcome::Gated);
        assert!(core.fifo().is_empty());
        assert_eq!(
            core.enqueue(ev("c", "power", "on", 1), 1, None).unwrap(),
            EnqueueOutcome::Queued { fifo_len: 1 }
        );
    }

    #[test]
    fn state_matching_no_row_evicted_immediately() {
        let t = table(&["power"], vec![TruthRow::new(["on"], "press")], 10 * S);
        let mut core = WorkflowCore::new(t, 10 * S, 0.5);
        core.enqueue(ev("a", "power", "off", S), S, None).unwrap();
        assert!(matches!(&core.scan(S, true)[..], [CauseResolution::Evicted { .. }]));
    }

    #[test]
    fn drain_resolves_pending_single_effect() {
        let t = table(&["power"], vec![TruthRow::new(["on"], "press")], 10 * S);
        let mut core = WorkflowCore::new(t, 10 * S, 0.5);
        core.enqueue(ev("a", "power", "on", S), S, None).unwrap();
        let (res, left) = core.drain();
        assert_eq!(res.len(), 1);
        assert_eq!(left, 0);
    }
}

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tokio::runtime::Handle;
use tokio::task::JoinHandle;

use super::matcher::{EnqueueOutcome, WorkflowCore};
use super::store::RecordSink;
use super::types::{
    CauseResolution, EffectEvent, InteractionTimeModel, ItmError, LabeledSegment, Polarity, RecordPolarity,
    SegmentSink, SelfLabelRecord, WorkflowSpec,
};
use super::window::compute_cause_window;
use super::SlbError;
use crate::clock::Clock;
use crate::kg::{KgStore, StateKind, StateSymbol};
use crate::stream::{Broker, Delivery, LiveSubscription, Payload, TimestampNs};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowStats {
    pub workflow_id: String,
    pub running: bool,
    pub fifo_len: usize,
    pub received_positive: u64,
    pub received_negative: u64,
    pub gated: u64,
    pub consumed: u64,
    pub evicted: u64,
    pub inconsistent: u64,
    pub records_emitted: u64,
    pub negative_records: u64,
    pub duplicates: u64,
    pub rejected_records: u64,
    pub itm_pending: usize,
    pub itm_retries: u64,
    pub itm_dropped: u64,
    pub itm_missing_key: u64,
    pub unsaved: usize,
    pub sink_failures: u64,
    pub segments_emitted: u64,
    pub empty_segments: u64,
    pub ambiguous_at_stop: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowSummary {
    pub workflow_id: String,
    pub cause_node: String,
    pub effect_nodes: Vec<String>,
    pub truth_table_id: String,
    pub running: bool,
    pub mode1_enabled: bool,
    pub mode2_enabled: bool,
}

struct Parked {
    cause_state: String,
    events: Vec<EffectEvent>,
    attempts: u32,
}

struct Workflow {
    spec: WorkflowSpec,
    core: WorkflowCore,
    running: bool,
    parked: VecDeque<Parked>,
    unsaved: VecDeque<SelfLabelRecord>,
    stats: WorkflowStats,
    next_record: u64,
    tasks: Vec<JoinHandle<()>>,
}

/// Runs self-labeling workflows against a broker and a knowledge graph.
pub struct SlbEngine {
    kg: Arc<KgStore>,
    broker: Arc<Broker>,
    clock: Arc<dyn Clock>,
    sink: Arc<dyn RecordSink>,
    itms: RwLock<HashMap<String, Arc<dyn InteractionTimeModel>>>,
    segment_sink: RwLock<Option<Arc<dyn SegmentSink>>>,
    workflows: RwLock<BTreeMap<String, Arc<Mutex<Workflow>>>>,
    runtime: Option<Handle>,
}

impl SlbEngine {
    pub fn new(kg: Arc<KgStore>, broker: Arc<Broker>, clock: Arc<dyn Clock>, sink: Arc<dyn RecordSink>) -> Self {
        Self {
            kg,
            broker,
            clock,
            sink,
            itms: RwLock::new(HashMap::new()),
            segment_sink: RwLock::new(None),
            workflows: RwLock::new(BTreeMap::new()),
            runtime: None,
        }
    }

    /// Started workflows subscribe to their effect topics and scan on a timer
    /// using tasks on this runtime.
    pub fn with_runtime(mut self, handle: Handle) -> Self {
        self.runtime = Some(handle);
        self
    }

    pub fn register_itm(&self, itm_ref: impl Into<String>, itm: Arc<dyn InteractionTimeModel>) {
        self.itms.write().insert(itm_ref.into(), itm);
    }

    pub fn set_segment_sink(&self, sink: Arc<dyn SegmentSink>) {
        *self.segment_sink.write() = Some(sink);
    }

    fn workflow(&self, id: &str) -> Result<Arc<Mutex<Workflow>>, SlbError> {
        self.workflows
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| SlbError::UnknownWorkflow(id.to_string()))
    }

    pub fn create_workflow(&self, spec: WorkflowSpec) -> Result<String, SlbError> {
        spec.validate().map_err(SlbError::InvalidSpec)?;
        let table = self
            .kg
            .table_by_id(&spec.truth_table_id)
            .map_err(|_| SlbError::MissingTable(spec.truth_table_id.clone()))?;
        if table.cause_node != spec.cause_node || table.effect_nodes != spec.effect_nodes {
            return Err(SlbError::InvalidSpec(format!(
                "table {} binds {} <- {:?}",
                table.table_id, table.cause_node, table.effect_nodes
            )));
        }
        if !self.itms.read().contains_key(&spec.itm_ref) {
            return Err(SlbError::UnknownItm(spec.itm_ref.clone()));
        }
        for topic in spec
            .effect_event_topics
            .iter()
            .chain([&spec.cause_stream_topic, &spec.output_topic])
        {
            self.broker
                .ensure_topic(topic)
                .map_err(|e| SlbError::Stream(e.to_string()))?;
        }
        let mut workflows = self.workflows.write();
        if workflows.contains_key(&spec.workflow_id) {
            return Err(SlbError::DuplicateWorkflow(spec.workflow_id.clone()));
        }
        let id = spec.workflow_id.clone();
        let core = WorkflowCore::new(table, spec.max_wait_ns(), spec.confidence_threshold);
        workflows.insert(
            id.clone(),
            Arc::new(Mutex::new(Workflow {
                stats: WorkflowStats {
                    workflow_id: id.clone(),
                    ..Default::default()
                },
                spec,
                core,
                running: false,
                parked: VecDeque::new(),
                unsaved: VecDeque::new(),
                next_record: 0,
                tasks: Vec::new(),
            })),
        );
        Ok(id)
    }

    pub fn list(&self) -> Vec<WorkflowSummary> {
        self.workflows
            .read()
            .values()
            .map(|w| {
                let w = w.lock();
                WorkflowSummary {
                    workflow_id: w.spec.workflow_id.clone(),
                    cause_node: w.spec.cause_node.clone(),
                    effect_nodes: w.spec.effect_nodes.clone(),
                    truth_table_id: w.spec.truth_table_id.clone(),
                    running: w.running,
                    mode1_enabled: w.spec.mode1_enabled,
                    mode2_enabled: w.spec.mode2_enabled,
                }
            })
            .collect()
    }

    pub fn spec(&self, id: &str) -> Result<WorkflowSpec, SlbError> {
        Ok(self.workflow(id)?.lock().spec.clone())
    }

    pub fn stats(&self, id: &str) -> Result<WorkflowStats, SlbError> {
        let wf = self.workflow(id)?;
        let w = wf.lock();
        Ok(Self::snapshot_stats(&w))
    }

    fn snapshot_stats(w: &Workflow) -> WorkflowStats {
        let c = w.core.counts();
        WorkflowStats {
            running: w.running,
            fifo_len: w.core.fifo().len(),
            received_positive: c.received_positive,
            gated: c.gated + w.stats.gated,
            consumed: c.consumed,
            evicted: c.evicted,
            inconsistent: c.inconsistent,
            itm_pending: w.parked.len(),
            unsaved: w.unsaved.len(),
            ..w.stats.clone()
        }
    }

    pub fn start(self: &Arc<Self>, id: &str) -> Result<(), SlbError> {
        let wf = self.workflow(id)?;
        let mut w = wf.lock();
        if w.running {
            return Ok(());
        }
        w.running = true;
        if let Some(rt) = &self.runtime {
            for topic in w.spec.effect_event_topics.clone() {
                // subscribe before returning so no event published after start is missed
                let sub = self
                    .broker
                    .subscribe_live(&topic, 4096)
                    .map_err(|e| SlbError::Stream(e.to_string()))?;
                let engine = Arc::clone(self);
                let id = id.to_string();
                w.tasks.push(rt.spawn(async move { engine.follow_topic(id, topic, sub).await }));
            }
            let engine = Arc::clone(self);
            let id = id.to_string();
            let period = Duration::from_nanos(w.spec.scan_period_ns() as u64);
            w.tasks.push(rt.spawn(async move {
                let mut tick = tokio::time::interval(period);
                tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
                loop {
                    tick.tick().await;
                    if engine.scan(&id).is_err() {
                        break;
                    }
                }
            }));
        }
        tracing::info!(workflow = id, "workflow started");
        Ok(())
    }

    async fn follow_topic(&self, id: String, topic: String, mut sub: LiveSubscription) {
        loop {
            while let Some(d) = sub.recv().await {
                match d {
                    Delivery::Envelope(env) => match env.payload.decode_json::<EffectEvent>() {
                        Some(ev) => {
                            if let Err(e) = self.on_effect_event(&id, ev) {
                                if matches!(e, SlbError::NotRunning(_) | SlbError::UnknownWorkflow(_)) {
                                    return;
                                }
                                tracing::warn!(workflow = %id, error = %e, "effect event rejected");
                            }
                        }
                        None => tracing::warn!(workflow = %id, %topic, "undecodable effect event"),
                    },
                    Delivery::Lagged => {
                        tracing::warn!(workflow = %id, %topic, "effect subscription lagged; resubscribing");
                    }
                }
            }
            match self.broker.subscribe_live(&topic, 4096) {
                Ok(next) => sub = next,
                Err(_) => return,
            }
        }
    }

    /// Stops the workflow: resolves what the FIFO can still resolve, emits it,
    /// and discards the remainder.
    pub fn stop(&self, id: &str) -> Result<WorkflowStats, SlbError> {
        let wf = self.workflow(id)?;
        let mut w = wf.lock();
        for t in w.tasks.drain(..) {
            t.abort();
        }
        if !w.running {
            return Ok(Self::snapshot_stats(&w));
        }
        self.retry_pending(&mut w);
        let (resolutions, left) = w.core.drain();
        w.stats.ambiguous_at_stop += left;
        for r in resolutions {
            self.handle_resolution(&mut w, r);
        }
        self.flush_unsaved(&mut w);
        w.running = false;
        tracing::info!(workflow = id, discarded = left, "workflow stopped");
        Ok(Self::snapshot_stats(&w))
    }

    pub fn on_effect_event(&self, id: &str, event: EffectEvent) -> Result<EnqueueOutcome, SlbError> {
        self.on_effect_event_at(id, event, self.clock.now_ns())
    }

    pub fn on_effect_event_at(
        &self,
        id: &str,
        event: EffectEvent,
        arrival_ns: TimestampNs,
    ) -> Result<EnqueueOutcome, SlbError> {
        let wf = self.workflow(id)?;
        let mut w = wf.lock();
        if !w.running {
            return Err(SlbError::NotRunning(id.to_string()));
        }
        let kg = self.kg.snapshot();
        let outcome = w.core.enqueue(event.clone(), arrival_ns, Some(&kg))?;
        if outcome == EnqueueOutcome::Negative {
            w.stats.received_negative += 1;
            if event.confidence < w.spec.confidence_threshold {
                w.stats.gated += 1;
                return Ok(EnqueueOutcome::Gated);
            }
            let r = event.feature_ref.as_ref().expect("validated negative has a window");
            let cause_state = self.cause_symbol(&w.spec.cause_node, &w.spec.background_state, StateKind::Level);
            let record = SelfLabelRecord {
                record_id: Self::next_record_id(&mut w),
                workflow_id: id.to_string(),
                cause_state,
                cause_end_ts_ns: r.t1_ns,
                duration_ns: r.t1_ns - r.t0_ns,
                tau_ns: 0,
                contributing_effects: vec![event.event_id.clone()],
                earliest_effect_ts_ns: 0,
                polarity: RecordPolarity::Negative,
            };
            self.emit(&mut w, record);
        }
        Ok(outcome)
    }

    pub fn scan(&self, id: &str) -> Result<Vec<CauseResolution>, SlbError> {
        self.scan_at(id, self.clock.now_ns())
    }

    /// One matcher pass at `now_ns`, preceded by retries of parked ITM
    /// requests and unsaved records.
    pub fn scan_at(&self, id: &str, now_ns: TimestampNs) -> Result<Vec<CauseResolution>, SlbError> {
        let wf = self.workflow(id)?;
        let mut w = wf.lock();
        if !w.running {
            return Err(SlbError::NotRunning(id.to_string()));
        }
        self.retry_pending(&mut w);
        let resolutions = w.core.scan(now_ns, true);
        for r in &resolutions {
            self.handle_resolution(&mut w, r.clone());
        }
        Ok(resolutions)
    }

    fn retry_pending(&self, w: &mut Workflow) {
        self.flush_unsaved(w);
        let parked: Vec<Parked> = w.parked.drain(..).collect();
        for mut p in parked {
            w.stats.itm_retries += 1;
            p.attempts += 1;
            self.infer_and_emit(w, p);
        }
    }

    fn handle_resolution(&self, w: &mut Workflow, r: CauseResolution) {
        if let CauseResolution::Resolved { cause_state, events, .. } = r {
            self.infer_and_emit(
                w,
                Parked {
                    cause_state,
                    events,
                    attempts: 0,
                },
            );
        }
    }

    fn infer_and_emit(&self, w: &mut Workflow, p: Parked) {
        let itm = self.itms.read().get(&w.spec.itm_ref).cloned();
        let result = match itm {
            Some(itm) => itm.infer(&p.cause_state, &p.events),
            None => Err(ItmError::Unavailable(format!("{} not registered", w.spec.itm_ref))),
        };
        let taus = match result {
            Ok(t) if t.len() == p.events.len() && t.iter().all(|&x| x >= 0) => t,
            Ok(t) => {
                tracing::warn!(got = t.len(), want = p.events.len(), "bad interaction time output");
                w.stats.itm_missing_key += 1;
                return;
            }
            Err(ItmError::MissingKey(k)) => {
                tracing::warn!(key = %k, "no interaction time entry; tuple dropped");
                w.stats.itm_missing_key += 1;
                return;
            }
            Err(ItmError::Unavailable(msg)) => {
                if p.attempts >= w.spec.itm_retry_budget {
                    tracing::warn!(%msg, attempts = p.attempts, "interaction time model retry budget spent");
                    w.stats.itm_dropped += 1;
                } else {
                    w.parked.push_back(p);
                }
                return;
            }
        };
        let (cause_end, tau) = w.spec.tau_aggregation.combine(&p.events, &taus);
        let earliest = p.events.iter().map(|e| e.transition_ts_ns).min().expect("non-empty");
        let window = match compute_cause_window(cause_end + tau, tau, w.spec.window_ns(), 0) {
            Ok(win) => win,
            Err(e) => {
                tracing::warn!(error = %e, "cause window rejected");
                w.stats.rejected_records += 1;
                return;
            }
        };
        let cause_state = self.cause_symbol(&w.spec.cause_node, &p.cause_state, StateKind::Transition);
        let record = SelfLabelRecord {
            record_id: Self::next_record_id(w),
            workflow_id: w.spec.workflow_id.clone(),
            cause_state,
            cause_end_ts_ns: window.end_ns,
            duration_ns: window.duration_ns(),
            tau_ns: tau,
            contributing_effects: p.events.iter().map(|e| e.event_id.clone()).collect(),
            earliest_effect_ts_ns: earliest,
            polarity: RecordPolarity::Positive,
        };
        self.emit(w, record);
    }

    fn cause_symbol(&self, node: &str, symbol: &str, fallback: StateKind) -> StateSymbol {
        self.kg
            .snapshot()
            .node(node)
            .and_then(|n| n.state(symbol))
            .unwrap_or_else(|| StateSymbol::new(node, symbol, fallback))
    }

    fn next_record_id(w: &mut Workflow) -> String {
        w.next_record += 1;
        format!("{}-{:06}", w.spec.workflow_id, w.next_record)
    }

    fn emit(&self, w: &mut Workflow, record: SelfLabelRecord) {
        if let Err(e) = record.validate() {
            tracing::warn!(record = %record.record_id, error = %e, "record rejected");
            w.stats.rejected_records += 1;
            return;
        }
        w.unsaved.push_back(record);
        self.flush_unsaved(w);
    }

    fn flush_unsaved(&self, w: &mut Workflow) {
        while let Some(record) = w.unsaved.front().cloned() {
            if w.spec.mode1_enabled {
                match self.sink.save(&record) {
                    Ok(true) => {}
                    Ok(false) => {
                        w.stats.duplicates += 1;
                        w.unsaved.pop_front();
                        continue;
                    }
                    Err(e) => {
                        tracing::warn!(error = %e, pending = w.unsaved.len(), "label sink failed");
                        w.stats.sink_failures += 1;
                        return;
                    }
                }
                if let Err(e) = self.broker.publish_next(
                    &w.spec.output_topic,
                    &w.spec.workflow_id,
                    record.cause_end_ts_ns.max(1),
                    Payload::json(&record),
                ) {
                    tracing::warn!(error = %e, "record publish failed");
                }
            }
            w.unsaved.pop_front();
            w.stats.records_emitted += 1;
            if record.polarity == RecordPolarity::Negative {
                w.stats.negative_records += 1;
            }
            if w.spec.mode2_enabled {
                match self.segment_for(&w.spec, &record) {
                    Ok(seg) => {
                        w.stats.segments_emitted += 1;
                        if seg.empty_window {
                            w.stats.empty_segments += 1;
                        }
                        if let Some(sink) = self.segment_sink.read().as_ref() {
                            sink.accept(seg);
                        }
                    }
                    Err(e) => tracing::warn!(error = %e, "segment extraction failed"),
                }
            }
        }
    }

    fn segment_for(&self, spec: &WorkflowSpec, record: &SelfLabelRecord) -> Result<LabeledSegment, SlbError> {
        let window = record.window();
        let q = self
            .broker
            .query_range(&spec.cause_stream_topic, window.start_ns, window.end_ns)
            .map_err(|e| SlbError::Stream(e.to_string()))?;
        let samples: Vec<_> = q.records.into_iter().map(|r| r.envelope).collect();
        Ok(LabeledSegment {
            record_id: record.record_id.clone(),
            workflow_id: record.workflow_id.clone(),
            label: record.cause_state.symbol.clone(),
            polarity: record.polarity,
            window,
            empty_window: samples.is_empty(),
            samples,
        })
    }

    /// Cause-stream samples inside a record's window.
    pub fn extract_segment(&self, id: &str, record: &SelfLabelRecord) -> Result<LabeledSegment, SlbError> {
        let spec = self.spec(id)?;
        if !spec.mode2_enabled {
            return Err(SlbError::Mode2Disabled(id.to_string()));
        }
        self.segment_for(&spec, record)
    }
}

impl Drop for SlbEngine {
    fn drop(&mut self) {
        for wf in self.workflows.read().values() {
            for t in wf.lock().tasks.drain(..) {
                t.abort();
            }
        }
    }
}

/// Effect events carry their polarity; this helper builds a negative sample.
pub fn negative_event(
    event_id: impl Into<String>,
    node_id: impl Into<String>,
    background: StateSymbol,
    window: super::FeatureRef,
    confidence: f64,
) -> EffectEvent {
    EffectEvent {
        event_id: event_id.into(),
        node_id: node_id.into(),
        transition_ts_ns: window.t1_ns,
        state: background,
        confidence,
        feature_ref: Some(window),
        polarity: Polarity::NegativeSample,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::kg::{printer_kg, KgNode, TruthRow, TruthTable};
    use crate::slb::{FeatureRef, LabelStore};
    use crate::stream::{SampleEnvelope, NANOS_PER_SEC};
    use std::sync::atomic::{AtomicU32, Ordering};

    const S: i64 = NANOS_PER_SEC;

    struct FixedItm(i64);
    impl InteractionTimeModel for FixedItm {
        fn infer(&self, _c: &str, effects: &[EffectEvent]) -> Result<Vec<i64>, ItmError> {
            Ok(vec![self.0; effects.len()])
        }
    }

    /// Unavailable for the first `n` calls.
    struct FlakyItm(AtomicU32, i64);
    impl InteractionTimeModel for FlakyItm {
        fn infer(&self, _c: &str, effects: &[EffectEvent]) -> Result<Vec<i64>, ItmError> {
            if self.0.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1)).is_ok() {
                return Err(ItmError::Unavailable("warming up".into()));
            }
            Ok(vec![self.1; effects.len()])
        }
    }

    #[derive(Default)]
    struct Segments(Mutex<Vec<LabeledSegment>>);
    impl SegmentSink for Segments {
        fn accept(&self, s: LabeledSegment) {
            self.0.lock().push(s);
        }
    }

    fn spec() -> WorkflowSpec {
        WorkflowSpec {
            workflow_id: "press".into(),
            cause_node: "hand_arm".into(),
            effect_nodes: vec!["controller".into()],
            truth_table_id: "press_button_power".into(),
            effect_event_topics: vec!["controller.events".into()],
            cause_stream_topic: "hand.imu".into(),
            itm_ref: "itm".into(),
            mode1_enabled: true,
            mode2_enabled: false,
            cause_window_duration_s: 1.0,
            max_wait_s: 5.0,
            output_topic: "press.labels".into(),
            confidence_threshold: 0.5,
            background_state: "background".into(),
            tau_aggregation: Default::default(),
            itm_retry_budget: 5,
        }
    }

    struct Rig {
        engine: Arc<SlbEngine>,
        store: Arc<LabelStore>,
        broker: Arc<Broker>,
    }

    fn rig(itm: Arc<dyn InteractionTimeModel>) -> Rig {
        let kg = Arc::new(KgStore::new());
        kg.import(printer_kg()).unwrap();
        let broker = Arc::new(Broker::in_memory());
        let clock = Arc::new(ManualClock::new(S));
        let store = Arc::new(LabelStore::new());
        let engine = Arc::new(SlbEngine::new(kg, broker.clone(), clock, store.clone()));
        engine.register_itm("itm", itm);
        Rig {
            engine,
            store,
            broker,
        }
    }

    fn power_on(id: &str, ts: i64) -> EffectEvent {
        EffectEvent::positive(id, StateSymbol::new("controller", "power_on", StateKind::Transition), ts, 0.9)
    }

    #[test]
    fn resolved_effect_yields_record_with_window() {
        let r = rig(Arc::new(FixedItm(2_500_000_000)));
        r.engine.create_workflow(spec()).unwrap();
        r.engine.start("press").unwrap();
        r.engine.on_effect_event_at("press", power_on("e1", 100 * S), 100 * S).unwrap();
        r.engine.scan_at("press", 100 * S).unwrap();
        let recs = r.store.all();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].cause_end_ts_ns, 97 * S + S / 2);
        assert_eq!(recs[0].window().start_ns, 96 * S + S / 2);
        assert_eq!(recs[0].cause_state.symbol, "press_button");
        assert_eq!(r.broker.published_count("press.labels").unwrap(), 1);
    }

    #[test]
    fn drain_at_stop_emits_pending() {
        let r = rig(Arc::new(FixedItm(S)));
        r.engine.create_workflow(spec()).unwrap();
        r.engine.start("press").unwrap();
        r.engine.on_effect_event_at("press", power_on("e1", 10 * S), 10 * S).unwrap();
        let stats = r.engine.stop("press").unwrap();
        assert_eq!(stats.records_emitted, 1);
        assert_eq!(r.store.len(), 1);
        assert!(!stats.running);
        assert!(matches!(
            r.engine.on_effect_event("press", power_on("e2", 11 * S)),
            Err(SlbError::NotRunning(_))
        ));
    }

    #[test]
    fn itm_unavailable_then_recovers() {
        let r = rig(Arc::new(FlakyItm(AtomicU32::new(2), S)));
        r.engine.create_workflow(spec()).unwrap();
        r.engine.start("press").unwrap();
        r.engine.on_effect_event_at("press", power_on("e1", 10 * S), 10 * S).unwrap();
        r.engine.scan_at("press", 10 * S).unwrap();
        assert_eq!(r.engine.stats("press").unwrap().itm_pending, 1);
        r.engine.scan_at("press", 11 * S).unwrap();
        assert_eq!(r.store.len(), 0);
        r.engine.scan_at("press", 12 * S).unwrap();
        assert_eq!(r.store.len(), 1);
        let st = r.engine.stats("press").unwrap();
        assert_eq!((st.itm_pending, st.itm_retries, st.itm_dropped), (0, 2, 0));
    }

    #[test]
    fn itm_retry_budget_exhausted() {
        let r = rig(Arc::new(FlakyItm(AtomicU32::new(100), S)));
        let mut sp = spec();
        sp.itm_retry_budget = 2;
        r.engine.create_workflow(sp).unwrap();
        r.engine.start("press").unwrap();
        r.engine.on_effect_event_at("press", power_on("e1", 10 * S), 10 * S).unwrap();
        for k in 0..5 {
            r.engine.scan_at("press", (10 + k) * S).unwrap();
        }
        let st = r.engine.stats("press").unwrap();
        assert_eq!((st.itm_pending, st.itm_dropped, st.records_emitted), (0, 1, 0));
    }

    #[test]
    fn zero_lag_record_rejected() {
        let r = rig(Arc::new(FixedItm(0)));
        r.engine.create_workflow(spec()).unwrap();
        r.engine.start("press").unwrap();
        r.engine.on_effect_event_at("press", power_on("e1", 10 * S), 10 * S).unwrap();
        r.engine.scan_at("press", 10 * S).unwrap();
        assert_eq!(r.engine.stats("press").unwrap().rejected_records, 1);
        assert!(r.store.is_empty());
    }

    #[test]
    fn confidence_gate_and_negative_records() {
        let r = rig(Arc::new(FixedItm(S)));
        r.engine.create_workflow(spec()).unwrap();
        r.engine.start("press").unwrap();
        let mut low = power_on("low", 10 * S);
        low.confidence = 0.3;
        assert_eq!(r.engine.on_effect_event_at("press", low, 10 * S).unwrap(), EnqueueOutcome::Gated);
        let neg = negative_event(
            "n1",
            "controller",
            StateSymbol::new("controller", "background", StateKind::Level),
            FeatureRef {
                topic: "controller.stream".into(),
                t0_ns: 20 * S,
                t1_ns: 21 * S,
            },
            0.8,
        );
        assert_eq!(r.engine.on_effect_event_at("press", neg, 22 * S).unwrap(), EnqueueOutcome::Negative);
        let recs = r.store.all();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].polarity, RecordPolarity::Negative);
        assert_eq!(recs[0].cause_state.symbol, "background");
        assert_eq!((recs[0].cause_end_ts_ns, recs[0].duration_ns, recs[0].tau_ns), (21 * S, S, 0));
        let st = r.engine.stats("press").unwrap();
        assert_eq!((st.gated, st.received_negative, st.fifo_len), (1, 1, 0));
    }

    #[test]
    fn duplicate_cause_end_saved_once() {
        let r = rig(Arc::new(FixedItm(S)));
        r.engine.create_workflow(spec()).unwrap();
        r.engine.start("press").unwrap();
        r.engine.on_effect_event_at("press", power_on("e1", 10 * S), 10 * S).unwrap();
        r.engine.scan_at("press", 10 * S).unwrap();
        r.engine.on_effect_event_at("press", power_on("e1-replay", 10 * S), 10 * S).unwrap();
        r.engine.scan_at("press", 10 * S).unwrap();
        assert_eq!(r.store.len(), 1);
        assert_eq!(r.engine.stats("press").unwrap().duplicates, 1);
    }

    #[test]
    fn sink_failure_retried_at_least_once() {
        let r = rig(Arc::new(FixedItm(S)));
        r.engine.create_workflow(spec()).unwrap();
        r.engine.start("press").unwrap();
        r.store.fail_next(1);
        r.engine.on_effect_event_at("press", power_on("e1", 10 * S), 10 * S).unwrap();
        r.engine.scan_at("press", 10 * S).unwrap();
        assert_eq!(r.engine.stats("press").unwrap().unsaved, 1);
        r.engine.scan_at("press", 11 * S).unwrap();
        assert_eq!(r.store.len(), 1);
        assert_eq!(r.engine.stats("press").unwrap().unsaved, 0);
    }

    #[test]
    fn mode2_segments_cover_window() {
        let r = rig(Arc::new(FixedItm(2 * S)));
        let segs = Arc::new(Segments::default());
        r.engine.set_segment_sink(segs.clone());
        let mut sp = spec();
        sp.mode2_enabled = true;
        r.engine.create_workflow(sp).unwrap();
        for k in 0..200 {
            let ts = 5 * S + k * S / 20;
            r.broker
                .publish(SampleEnvelope::new("hand.imu", "imu", k as u64 + 1, ts, Payload::fields([("ax", k as f64)])))
                .unwrap();
        }
        r.engine.start("press").unwrap();
        r.engine.on_effect_event_at("press", power_on("e1", 12 * S), 12 * S).unwrap();
        r.engine.on_effect_event_at("press", power_on("e2", 40 * S), 40 * S).unwrap();
        r.engine.scan_at("press", 40 * S).unwrap();
        let segs = segs.0.lock();
        assert_eq!(segs.len(), 2);
        assert_eq!((segs[0].window.start_ns, segs[0].window.end_ns), (9 * S, 10 * S));
        assert_eq!(segs[0].samples.len(), 21);
        assert!(segs[0].samples.iter().all(|e| (9 * S..=10 * S).contains(&e.timestamp_ns)));
        assert!(segs[1].empty_window);
        assert_eq!(segs[0].label, "press_button");
    }

    #[test]
    fn mode2_disabled_rejects_extract() {
        let r = rig(Arc::new(FixedItm(S)));
        r.engine.create_workflow(spec()).unwrap();
        let rec = SelfLabelRecord {
            record_id: "x".into(),
            workflow_id: "press".into(),
            cause_state: StateSymbol::new("hand_arm", "press_button", StateKind::Transition),
            cause_end_ts_ns: 5 * S,
            duration_ns: S,
            tau_ns: S,
            contributing_effects: vec![],
            earliest_effect_ts_ns: 6 * S,
            polarity: RecordPolarity::Positive,
        };
        assert_eq!(r.engine.extract_segment("press", &rec), Err(SlbError::Mode2Disabled("press".into())));
    }

    #[test]
    fn create_validates_references() {
        let r = rig(Arc::new(FixedItm(S)));
        let mut sp = spec();
        sp.truth_table_id = "nope".into();
        assert_eq!(r.engine.create_workflow(sp), Err(SlbError::MissingTable("nope".into())));
        let mut sp = spec();
        sp.itm_ref = "other".into();
        assert_eq!(r.engine.create_workflow(sp), Err(SlbError::UnknownItm("other".into())));
        r.engine.create_workflow(spec()).unwrap();
        assert_eq!(r.engine.create_workflow(spec()), Err(SlbError::DuplicateWorkflow("press".into())));
        assert_eq!(r.engine.list().len(), 1);
    }

    #[test]
    fn two_effect_earliest_anchor_aggregation() {
        let kg = Arc::new(KgStore::new());
        kg.upsert_node(KgNode::new("hand", "Hand").with_state("flip", StateKind::Transition)).unwrap();
        kg.upsert_node(KgNode::new("lamp", "Lamp").with_state("on", StateKind::Transition)).unwrap();
        kg.upsert_node(KgNode::new("fan", "Fan").with_state("on", StateKind::Transition)).unwrap();
        kg.put_truth_table(TruthTable {
            table_id: "flip".into(),
            cause_node: "hand".into(),
            effect_nodes: vec!["lamp".into(), "fan".into()],
            rows: vec![TruthRow::new(["on", "on"], "flip")],
            max_wait_ns: 5 * S,
        })
        .unwrap();
        let broker = Arc::new(Broker::in_memory());
        let store = Arc::new(LabelStore::new());
        let engine = Arc::new(SlbEngine::new(kg, broker, Arc::new(ManualClock::new(S)), store.clone()));
        engine.register_itm("itm", Arc::new(FixedItm(S)));
        let mut sp = spec();
        sp.workflow_id = "flip".into();
        sp.cause_node = "hand".into();
        sp.effect_nodes = vec!["lamp".into(), "fan".into()];
        sp.truth_table_id = "flip".into();
        engine.create_workflow(sp).unwrap();
        engine.start("flip").unwrap();
        let lamp = EffectEvent::positive("l", StateSymbol::new("lamp", "on", StateKind::Transition), 20 * S, 0.9);
        let fan = EffectEvent::positive("f", StateSymbol::new("fan", "on", StateKind::Transition), 22 * S, 0.9);
        engine.on_effect_event_at("flip", fan, 22 * S).unwrap();
        engine.on_effect_event_at("flip", lamp, 23 * S).unwrap();
        engine.scan_at("flip", 23 * S).unwrap();
        let recs = store.all();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].cause_end_ts_ns, 19 * S);
        assert_eq!(recs[0].earliest_effect_ts_ns, 20 * S);
        assert_eq!(recs[0].contributing_effects, vec!["f".to_string(), "l".to_string()]);
    }

    #[tokio::test(flavor = "multi_thread", worker_threads = 2)]
    async fn live_runtime_consumes_effect_topic() {
        let kg = Arc::new(KgStore::new());
        kg.import(printer_kg()).unwrap();
        let broker = Arc::new(Broker::in_memory());
        let store = Arc::new(LabelStore::new());
        let clock = Arc::new(crate::clock::SystemClock);
        let engine = Arc::new(
            SlbEngine::new(kg, broker.clone(), clock, store.clone()).with_runtime(Handle::current()),
        );
        engine.register_itm("itm", Arc::new(FixedItm(S / 10)));
        let mut sp = spec();
        sp.max_wait_s = 0.2;
        engine.create_workflow(sp).unwrap();
        engine.start("press").unwrap();
        tokio::time::sleep(Duration::from_millis(20)).await;
        let now = crate::clock::SystemClock.now_ns();
        broker
            .publish_next("controller.events", "esd", now, Payload::json(&power_on("live", now)))
            .unwrap();
        for _ in 0..100 {
            if !store.is_empty() {
                break;
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
        assert_eq!(store.len(), 1);
        engine.stop("press").unwrap();
    }
}

//! End-to-end harnesses: simulator -> detector -> self-labeling workflow ->
//! trainer -> metrics, all on simulated time.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clock::ManualClock;
use crate::kg::KgStore;
use crate::models::{
    pool_features, task_train, ArtifactStore, DatasetScope, EsdConfig, GaussianItm, ItmLookupEntry, LabeledSample,
    LinearModel, ModelRegistry, Provenance, SampleStore, SplitTag, StepDetector, TrainParams, Trainer, TrainerAction,
    TrainerPolicy,
};
use crate::sim::{
    eval_report, generate, oracle_esd, sim_kg, stream_end_ns, EvalReport, GroundTruthEvent, OracleItm, SimConfig, SimError,
    CAUSE_NODE, EFFECT_NODE, TABLE_ID,
};
use crate::slb::{
    EffectEvent, InteractionTimeModel, LabelStore, SlbEngine, SlbError, WorkflowSpec, WorkflowStats,
};
use crate::stream::{secs_to_ns, Broker, SampleEnvelope, TimestampNs, NANOS_PER_SEC};

pub const WORKFLOW_ID: &str = "operator_machine";
pub const TASK_MODEL_ID: &str = "operator_task";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Slb(#[from] SlbError),
    #[error("{0}")]
    Other(String),
}

fn other(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Other(e.to_string())
}

#[derive(Debug, Clone, Serialize)]
pub struct EndToEndReport {
    pub eval: EvalReport,
    pub stats: WorkflowStats,
    pub effect_events: usize,
}

/// Reference detector settings for the simulated power meter.
pub fn reference_esd(sim: &SimConfig) -> EsdConfig {
    EsdConfig {
        input_topic: sim.effect_topic.clone(),
        field: Some("power".into()),
        node_id: EFFECT_NODE.into(),
        rising_state: "power_on".into(),
        falling_state: "power_off".into(),
        background_state: "background".into(),
        pre_window_s: 1.0,
        post_window_s: 1.0,
        threshold: sim.effect_step_height / 2.0,
        min_gap_s: 2.0,
        background_buffer_len: 8,
        negative_rate: 0.0,
        background_window_s: Some(sim.interaction_s),
        background_guard_s: Some(sim.tau_mean_s + 4.0 * sim.tau_sigma_s + sim.interaction_s + 1.0),
        seed: sim.seed,
    }
}

fn workflow_spec(sim: &SimConfig, mode2: bool) -> WorkflowSpec {
    WorkflowSpec {
        workflow_id: WORKFLOW_ID.into(),
        cause_node: CAUSE_NODE.into(),
        effect_nodes: vec![EFFECT_NODE.into()],
        truth_table_id: TABLE_ID.into(),
        effect_event_topics: vec![format!("{EFFECT_NODE}.events")],
        cause_stream_topic: sim.cause_topic.clone(),
        itm_ref: "itm".into(),
        mode1_enabled: true,
        mode2_enabled: mode2,
        cause_window_duration_s: sim.interaction_s,
        max_wait_s: 5.0,
        output_topic: format!("{WORKFLOW_ID}.labels"),
        confidence_threshold: 0.5,
        background_state: sim.background_label.clone(),
        tau_aggregation: Default::default(),
        itm_retry_budget: 5,
    }
}

struct Rig {
    broker: Arc<Broker>,
    clock: Arc<ManualClock>,
    labels: Arc<LabelStore>,
    engine: Arc<SlbEngine>,
}

fn rig(sim: &SimConfig, itm: Arc<dyn InteractionTimeModel>, mode2: bool) -> Result<Rig, PipelineError> {
    let kg = Arc::new(KgStore::new());
    kg.import(sim_kg(sim)).map_err(other)?;
    let broker = Arc::new(Broker::in_memory());
    broker.ensure_topic(&sim.cause_topic).map_err(other)?;
    broker.ensure_topic(&sim.effect_topic).map_err(other)?;
    let clock = Arc::new(ManualClock::new(sim.start_ts_ns));
    let labels = Arc::new(LabelStore::new());
    let engine = Arc::new(SlbEngine::new(kg, broker.clone(), clock.clone(), labels.clone()));
    engine.register_itm("itm", itm);
    engine.create_workflow(workflow_spec(sim, mode2))?;
    engine.start(WORKFLOW_ID)?;
    Ok(Rig {
        broker,
        clock,
        labels,
        engine,
    })
}

/// Feeds envelopes in time order through detector and engine.
struct Driver<'a> {
    rig: &'a Rig,
    sim: &'a SimConfig,
    detector: Option<StepDetector>,
    next_scan: TimestampNs,
    effect_events: usize,
}

impl<'a> Driver<'a> {
    fn new(rig: &'a Rig, sim: &'a SimConfig, detector: Option<StepDetector>) -> Self {
        Self {
            rig,
            sim,
            detector,
            next_scan: sim.start_ts_ns,
            effect_events: 0,
        }
    }

    fn deliver(&mut self, ev: EffectEvent, arrival: TimestampNs) -> Result<(), PipelineError> {
        self.effect_events += 1;
        self.rig.engine.on_effect_event_at(WORKFLOW_ID, ev, arrival)?;
        self.rig.engine.scan_at(WORKFLOW_ID, arrival)?;
        Ok(())
    }

    fn step(&mut self, env: &SampleEnvelope) -> Result<(), PipelineError> {
        let ts = env.timestamp_ns;
        self.rig.clock.set(ts);
        self.rig.broker.publish(env.clone()).map_err(other)?;
        if env.topic == self.sim.effect_topic {
            if let Some(det) = self.detector.as_mut() {
                let mut events = det.push_envelope(env);
                events.extend(det.sample_negative(ts));
                for ev in events {
                    self.deliver(ev, ts)?;
                }
            }
        }
        if ts >= self.next_scan {
            self.rig.engine.scan_at(WORKFLOW_ID, ts)?;
            self.next_scan = ts + NANOS_PER_SEC;
        }
        Ok(())
    }

    fn finish(mut self, end: TimestampNs) -> Result<(WorkflowStats, usize), PipelineError> {
        if let Some(det) = self.detector.as_mut() {
            for ev in det.finish() {
                self.deliver(ev, end)?;
            }
        }
        let stats = self.rig.engine.stop(WORKFLOW_ID)?;
        Ok((stats, self.effect_events))
    }
}

/// Oracle detector and interaction time model: isolates the workflow.
pub fn oracle_run(sim: &SimConfig) -> Result<EndToEndReport, PipelineError> {
    let out = generate(sim)?;
    let rig = rig(sim, Arc::new(OracleItm::new(&out.truth)), false)?;
    let mut events = oracle_esd(&out.truth).into_iter().peekable();
    let mut driver = Driver::new(&rig, sim, None);
    for env in &out.envelopes {
        // perfect detections arrive at their transition time
        while let Some(ev) = events.next_if(|e| e.transition_ts_ns <= env.timestamp_ns) {
            let t = ev.transition_ts_ns;
            rig.clock.set(t);
            driver.deliver(ev, t)?;
        }
        driver.step(env)?;
    }
    for ev in events {
        let t = ev.transition_ts_ns;
        driver.deliver(ev, t)?;
    }
    let (stats, effect_events) = driver.finish(stream_end_ns(sim, &out.truth))?;
    let eval = eval_report(&rig.labels.all(), &out.truth, secs_to_ns(sim.interaction_s));
    Ok(EndToEndReport {
        eval,
        stats,
        effect_events,
    })
}

/// Reference detector plus Gaussian interaction time model at the true mean.
pub fn noisy_run(sim: &SimConfig, esd: EsdConfig) -> Result<EndToEndReport, PipelineError> {
    let out = generate(sim)?;
    let itm = GaussianItm::new([ItmLookupEntry {
        key: sim.interaction_label.clone(),
        mu_ns: secs_to_ns(sim.tau_mean_s),
        sigma_ns: secs_to_ns(sim.tau_sigma_s),
    }])
    .map_err(other)?;
    let rig = rig(sim, Arc::new(itm), false)?;
    let mut driver = Driver::new(&rig, sim, Some(StepDetector::new(esd).map_err(other)?));
    for env in &out.envelopes {
        driver.step(env)?;
    }
    let (stats, effect_events) = driver.finish(stream_end_ns(sim, &out.truth))?;
    let eval = eval_report(&rig.labels.all(), &out.truth, secs_to_ns(sim.interaction_s));
    Ok(EndToEndReport {
        eval,
        stats,
        effect_events,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub sim: SimConfig,
    /// Drift at half the run, this many class sigmas on every channel.
    pub drift_sigmas: f64,
    /// Negative samples per hour from the detector.
    pub negative_rate: f64,
    pub min_new_samples: usize,
    pub train: TrainParams,
    /// Seed offset for the independent evaluation run.
    pub eval_seed_offset: u64,
}

impl AdaptationConfig {
    pub fn standard(seed: u64) -> Self {
        let sim = SimConfig {
            seed,
            run_duration_s: 7200.0,
            event_rate: 240.0,
            ..SimConfig::default()
        };
        Self {
            sim,
            drift_sigmas: 2.0,
            negative_rate: 150.0,
            min_new_samples: 100,
            train: TrainParams::default(),
            eval_seed_offset: 1000,
        }
    }

    fn drifted_sim(&self) -> SimConfig {
        let mut sim = self.sim.clone();
        sim.drift_schedule = vec![crate::sim::DriftStep {
            time_s: sim.run_duration_s / 2.0,
            mean_shift: vec![self.drift_sigmas * sim.class_sigma; sim.cause_channels],
        }];
        sim
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AdaptationReport {
    pub first_training: TrainerAction,
    pub retraining: TrainerAction,
    pub samples_before_drift: usize,
    pub samples_after_drift: usize,
    /// Frozen (pre-drift) model on held-out pre-drift windows.
    pub frozen_pre_accuracy: f64,
    /// Frozen model on held-out post-drift windows.
    pub frozen_post_accuracy: f64,
    /// Model retrained on self-labeled post-drift samples.
    pub retrained_post_accuracy: f64,
    /// Same windows as the retrained model, ground-truth labels.
    pub oracle_twin_post_accuracy: f64,
    pub self_label_agreement: f64,
    pub eval_windows_pre: usize,
    pub eval_windows_post: usize,
}

impl AdaptationReport {
    pub fn frozen_drop(&self) -> f64 {
        self.frozen_pre_accuracy - self.frozen_post_accuracy
    }

    pub fn gap_to_twin(&self) -> f64 {
        self.oracle_twin_post_accuracy - self.retrained_post_accuracy
    }
}

fn cause_only(out: &[SampleEnvelope], topic: &str) -> Vec<SampleEnvelope> {
    out.iter().filter(|e| e.topic == topic).cloned().collect()
}

fn window_samples(cause: &[SampleEnvelope], t0: TimestampNs, t1: TimestampNs) -> &[SampleEnvelope] {
    let a = cause.partition_point(|e| e.timestamp_ns < t0);
    let b = cause.partition_point(|e| e.timestamp_ns <= t1);
    &cause[a..b]
}

fn truth_label(truth: &[GroundTruthEvent], t0: TimestampNs, t1: TimestampNs, sim: &SimConfig) -> String {
    let len = (t1 - t0).max(1);
    let covered = truth
        .iter()
        .map(|g| (t1.min(g.cause_end_ts_ns) - t0.max(g.cause_start_ts_ns)).max(0))
        .max()
        .unwrap_or(0);
    if 2 * covered >= len {
        sim.interaction_label.clone()
    } else {
        sim.background_label.clone()
    }
}

/// Held-out windows: every true interaction plus as many background windows
/// of the same length, each well away from any interaction.
fn eval_windows(sim: &SimConfig, seed: u64) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>), PipelineError> {
    let mut cfg = sim.clone();
    cfg.seed = seed;
    let out = generate(&cfg)?;
    let cause = cause_only(&out.envelopes, &cfg.cause_topic);
    let d = secs_to_ns(cfg.interaction_s);
    let margin = 2 * NANOS_PER_SEC;
    let mid = cfg.start_ts_ns + secs_to_ns(cfg.run_duration_s / 2.0);
    let positives: Vec<(TimestampNs, TimestampNs, String)> = out
        .truth
        .iter()
        .map(|g| (g.cause_start_ts_ns, g.cause_end_ts_ns, cfg.interaction_label.clone()))
        .collect();
    let mut clear_windows = Vec::new();
    let mut t = cfg.start_ts_ns + margin;
    while t + d < cfg.end_ts_ns() {
        let clear = out
            .truth
            .iter()
            .all(|g| t + d + margin < g.cause_start_ts_ns || t > g.effect_transition_ts_ns + margin);
        if clear {
            clear_windows.push((t, t + d, cfg.background_label.clone()));
            t += d + margin;
        } else {
            t += NANOS_PER_SEC;
        }
    }
    // balance each half: as many background windows as interactions, evenly spread
    let mut windows = positives.clone();
    for first_half in [true, false] {
        let in_half = |w: &&(TimestampNs, TimestampNs, String)| if first_half { w.1 < mid } else { w.0 >= mid };
        let want = positives.iter().filter(in_half).count();
        let pool: Vec<_> = clear_windows.iter().filter(in_half).collect();
        if pool.is_empty() {
            continue;
        }
        let take = want.min(pool.len());
        windows.extend((0..take).map(|i| pool[i * pool.len() / take].clone()));
    }
    let (mut pre, mut post) = (Vec::new(), Vec::new());
    for (i, (t0, t1, label)) in windows.into_iter().enumerate() {
        let s = window_samples(&cause, t0, t1);
        let Ok(features) = pool_features(s) else { continue };
        let sample = LabeledSample {
            features,
            label,
            provenance: Provenance {
                record_id: format!("eval-{i}"),
                t0_ns: t0,
                t1_ns: t1,
            },
            split_tag: SplitTag::Test,
        };
        if t1 < mid {
            pre.push(sample);
        } else if t0 >= mid {
            post.push(sample);
        }
    }
    Ok((pre, post))
}

fn accuracy(model: &LinearModel, set: &[LabeledSample]) -> f64 {
    model.accuracy(&set.iter().collect::<Vec<_>>())
}

/// Drift adaptation study: train at mid-run on self-labels, freeze, drift,
/// retrain on post-drift self-labels, compare against a twin trained on the
/// same windows with ground-truth labels.
pub fn adaptation_run(cfg: &AdaptationConfig) -> Result<AdaptationReport, PipelineError> {
    let sim = cfg.drifted_sim();
    let out = generate(&sim)?;
    let itm = GaussianItm::new([ItmLookupEntry {
        key: sim.interaction_label.clone(),
        mu_ns: secs_to_ns(sim.tau_mean_s),
        sigma_ns: secs_to_ns(sim.tau_sigma_s),
    }])
    .map_err(other)?;
    let rig = rig(&sim, Arc::new(itm), true)?;
    let samples = Arc::new(SampleStore::new());
    rig.engine.set_segment_sink(samples.clone());
    let artifacts = Arc::new(ArtifactStore::in_memory());
    let registry = Arc::new(ModelRegistry::new(artifacts, rig.clock.clone()));
    let trainer = Trainer::new(
        TASK_MODEL_ID,
        samples.clone(),
        registry.clone(),
        rig.clock.clone(),
        TrainerPolicy {
            min_new_samples: cfg.min_new_samples,
            override_hours: true,
            require_approval: false,
            auto_deploy: true,
            scope: DatasetScope::NewSinceLast,
            ..Default::default()
        },
        cfg.train.clone(),
    );
    let mut esd = reference_esd(&sim);
    esd.negative_rate = cfg.negative_rate;
    let mut driver = Driver::new(&rig, &sim, Some(StepDetector::new(esd).map_err(other)?));
    let mid = sim.start_ts_ns + secs_to_ns(sim.run_duration_s / 2.0);
    let mut first: Option<TrainerAction> = None;
    for env in &out.envelopes {
        if first.is_none() && env.timestamp_ns >= mid {
            first = Some(trainer.poll_at_hour(0));
        }
        driver.step(env)?;
    }
    driver.finish(stream_end_ns(&sim, &out.truth))?;
    let first = first.unwrap_or(TrainerAction::None {
        reason: "run ended before drift".into(),
    });
    let frozen = match &first {
        TrainerAction::Trained { weights_ref, .. } => LinearModel::load(registry.artifacts(), weights_ref).map_err(other)?,
        other_action => return Err(PipelineError::Other(format!("no pre-drift model: {other_action:?}"))),
    };
    let samples_before = trainer.status().total_samples - trainer.status().new_samples;
    let post_samples = samples.since(samples_before);
    let retraining = trainer.poll_at_hour(0);
    let retrained = match &retraining {
        TrainerAction::Trained { weights_ref, .. } => LinearModel::load(registry.artifacts(), weights_ref).map_err(other)?,
        other_action => return Err(PipelineError::Other(format!("no retraining: {other_action:?}"))),
    };

    let twin_samples: Vec<LabeledSample> = post_samples
        .iter()
        .map(|s| LabeledSample {
            label: truth_label(&out.truth, s.provenance.t0_ns, s.provenance.t1_ns, &sim),
            ..s.clone()
        })
        .collect();
    let agree = post_samples
        .iter()
        .zip(&twin_samples)
        .filter(|(a, b)| a.label == b.label)
        .count() as f64
        / post_samples.len().max(1) as f64;
    let twin = task_train(&twin_samples, &cfg.train, None).map_err(other)?.model;

    let (pre_set, post_set) = eval_windows(&sim, sim.seed + cfg.eval_seed_offset)?;
    Ok(AdaptationReport {
        samples_before_drift: samples_before,
        samples_after_drift: post_samples.len(),
        frozen_pre_accuracy: accuracy(&frozen, &pre_set),
        frozen_post_accuracy: accuracy(&frozen, &post_set),
        retrained_post_accuracy: accuracy(&retrained, &post_set),
        oracle_twin_post_accuracy: accuracy(&twin, &post_set),
        self_label_agreement: agree,
        eval_windows_pre: pre_set.len(),
        eval_windows_post: post_set.len(),
        first_training: first,
        retraining,
    })
}

/// Settings for the oracle exactness run: 100 interactions.
pub fn oracle_sim(seed: u64) -> SimConfig {
    SimConfig {
        seed,
        run_duration_s: 1e6,
        max_events: Some(100),
        ..SimConfig::default()
    }
}

/// Settings for the noisy run: 200 interactions, tau sigma = 0.2 mu.
pub fn noisy_sim(seed: u64) -> SimConfig {
    SimConfig {
        seed,
        run_duration_s: 1e6,
        max_events: Some(200),
        tau_mean_s: 2.5,
        tau_sigma_s: 0.5,
        ..SimConfig::default()
    }
}

//! Synthetic factory: an operator interacts with a machine; each interaction
//! shows up on a multichannel cause stream and, after a random lag, as a
//! power step on the machine's effect stream. Ground truth is logged.

mod eval;
mod oracle;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

pub use eval::{eval_report, interval_iou, EvalReport};
pub use oracle::{oracle_esd, OracleItm};

use crate::kg::{KgDocument, KgEdge, KgNode, StateKind, TruthRow, TruthTable};
use crate::stream::{secs_to_ns, Broker, Payload, SampleEnvelope, StreamError, TimestampNs, NANOS_PER_SEC};

pub const CAUSE_NODE: &str = "operator";
pub const EFFECT_NODE: &str = "machine";
pub const TABLE_ID: &str = "operator_machine";

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid sim config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftStep {
    pub time_s: f64,
    /// Added to every cause channel mean from `time_s` on.
    pub mean_shift: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub run_duration_s: f64,
    /// Interactions per hour.
    pub event_rate: f64,
    pub tau_mean_s: f64,
    pub tau_sigma_s: f64,
    /// Length of each interaction on the cause stream.
    pub interaction_s: f64,
    /// Quiet time after an effect before the next interaction may start.
    pub guard_s: f64,
    pub cause_channels: usize,
    /// Channel means per label; a missing label means zero.
    pub class_means: BTreeMap<String, Vec<f64>>,
    pub class_sigma: f64,
    pub effect_step_height: f64,
    pub effect_noise_sigma: f64,
    #[serde(default)]
    pub drift_schedule: Vec<DriftStep>,
    pub cause_hz: f64,
    pub effect_hz: f64,
    pub cause_topic: String,
    pub effect_topic: String,
    pub interaction_label: String,
    pub background_label: String,
    /// Timestamp of the first sample.
    pub start_ts_ns: TimestampNs,
    /// Stop after this many interactions, if set.
    #[serde(default)]
    pub max_events: Option<usize>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            run_duration_s: 600.0,
            event_rate: 240.0,
            tau_mean_s: 2.5,
            tau_sigma_s: 0.3,
            interaction_s: 3.0,
            guard_s: 4.0,
            cause_channels: 4,
            class_means: BTreeMap::from([("interaction".to_string(), vec![2.0; 4])]),
            class_sigma: 1.0,
            effect_step_height: 5.0,
            effect_noise_sigma: 0.1,
            drift_schedule: Vec::new(),
            cause_hz: 10.0,
            effect_hz: 20.0,
            cause_topic: "operator.features".into(),
            effect_topic: "machine.power".into(),
            interaction_label: "interaction".into(),
            background_label: "non_interaction".into(),
            start_ts_ns: 1_700_000_000 * NANOS_PER_SEC,
            max_events: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if !(self.run_duration_s > 0.0 && self.cause_hz > 0.0 && self.effect_hz > 0.0) {
            return bad("duration and sample rates must be > 0");
        }
        if !(self.event_rate >= 0.0) {
            return bad("event_rate must be >= 0");
        }
        if !(self.tau_mean_s > 0.0 && self.tau_sigma_s >= 0.0) {
            return bad("tau_mean must be > 0, tau_sigma >= 0");
        }
        if !(self.interaction_s > 0.0 && self.guard_s >= 0.0) {
            return bad("interaction_s must be > 0, guard_s >= 0");
        }
        if self.cause_channels == 0 || !(self.class_sigma >= 0.0) || !(self.effect_noise_sigma >= 0.0) {
            return bad("need channels and non-negative noise");
        }
        if self.class_means.values().any(|m| m.len() != self.cause_channels) {
            return bad("class_means length must equal cause_channels");
        }
        for d in &self.drift_schedule {
            if !(0.0..=self.run_duration_s).contains(&d.time_s) {
                return bad("drift time outside run");
            }
            if d.mean_shift.len() != self.cause_channels {
                return bad("drift shift length must equal cause_channels");
            }
        }
        if self.start_ts_ns <= 0 {
            return bad("start_ts_ns must be > 0");
        }
        Ok(())
    }

    pub fn end_ts_ns(&self) -> TimestampNs {
        self.start_ts_ns + secs_to_ns(self.run_duration_s)
    }

    /// Cumulative drift at `ts`.
    pub fn drift_at(&self, ts: TimestampNs) -> Vec<f64> {
        let mut shift = vec![0.0; self.cause_channels];
        for d in &self.drift_schedule {
            if ts >= self.start_ts_ns + secs_to_ns(d.time_s) {
                for (s, x) in shift.iter_mut().zip(&d.mean_shift) {
                    *s += x;
                }
            }
        }
        shift
    }

    pub fn class_mean(&self, label: &str) -> Vec<f64> {
        self.class_means
            .get(label)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.cause_channels])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthEvent {
    pub event_id: String,
    pub cause_state: String,
    pub cause_start_ts_ns: TimestampNs,
    pub cause_end_ts_ns: TimestampNs,
    pub true_tau_ns: i64,
    pub effect_transition_ts_ns: TimestampNs,
    pub effect_state: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub truth: Vec<GroundTruthEvent>,
    /// Cause and effect envelopes merged in timestamp order.
    pub envelopes: Vec<SampleEnvelope>,
}

/// Causal graph of the simulated cell.
pub fn sim_kg(cfg: &SimConfig) -> KgDocument {
    KgDocument {
        nodes: vec![
            KgNode::new(CAUSE_NODE, "Operator")
                .with_state(&cfg.interaction_label, StateKind::Transition)
                .with_state(&cfg.background_label, StateKind::Level),
            KgNode::new(EFFECT_NODE, "Machine")
                .with_state("power_on", StateKind::Transition)
                .with_state("power_off", StateKind::Transition)
                .with_state("background", StateKind::Level),
        ],
        edges: vec![KgEdge::new("operator->machine", CAUSE_NODE, EFFECT_NODE)],
        truth_tables: vec![TruthTable {
            table_id: TABLE_ID.into(),
            cause_node: CAUSE_NODE.into(),
            effect_nodes: vec![EFFECT_NODE.into()],
            rows: vec![
                TruthRow::new(["power_on"], cfg.interaction_label.clone()),
                TruthRow::new(["power_off"], cfg.interaction_label.clone()),
            ],
            max_wait_ns: 5 * NANOS_PER_SEC,
        }],
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng, mean: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return mean.max(0.0);
    }
    let n = Normal::new(mean, sigma).expect("valid normal");
    loop {
        let v = n.sample(rng);
        if v >= 0.0 {
            return v;
        }
    }
}

/// Draws the interaction schedule.
pub fn schedule(cfg: &SimConfig) -> Result<Vec<GroundTruthEvent>, SimError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    if cfg.event_rate == 0.0 {
        return Ok(out);
    }
    let gap = Exp::new(cfg.event_rate / 3600.0).expect("positive rate");
    let d = secs_to_ns(cfg.interaction_s);
    let guard = secs_to_ns(cfg.guard_s);
    let end = cfg.end_ts_ns();
    // first interaction leaves room for detector warm-up
    let mut ready = cfg.start_ts_ns + guard;
    let mut on = false;
    loop {
        if cfg.max_events.is_some_and(|m| out.len() >= m) {
            break;
        }
        let start = ready + secs_to_ns(gap.sample(&mut rng));
        let tau = secs_to_ns(truncated_normal(&mut rng, cfg.tau_mean_s, cfg.tau_sigma_s));
        let cause_end = start + d;
        let effect = cause_end + tau;
        if effect + guard > end {
            break;
        }
        on = !on;
        out.push(GroundTruthEvent {
            event_id: format!("gt-{:05}", out.len() + 1),
            cause_state: cfg.interaction_label.clone(),
            cause_start_ts_ns: start,
            cause_end_ts_ns: cause_end,
            true_tau_ns: tau,
            effect_transition_ts_ns: effect,
            effect_state: if on { "power_on" } else { "power_off" }.into(),
        });
        ready = effect + guard;
    }
    Ok(out)
}

/// Streams stop two guards after the last event once `max_events` is hit.
pub fn stream_end_ns(cfg: &SimConfig, truth: &[GroundTruthEvent]) -> TimestampNs {
    match (cfg.max_events, truth.last()) {
        (Some(m), Some(last)) if truth.len() >= m => {
            cfg.end_ts_ns().min(last.effect_transition_ts_ns + 2 * secs_to_ns(cfg.guard_s))
        }
        _ => cfg.end_ts_ns(),
    }
}

/// Generates both streams and the ground truth. Deterministic in the config.
pub fn generate(cfg: &SimConfig) -> Result<SimOutput, SimError> {
    let truth = schedule(cfg)?;
    let end = stream_end_ns(cfg, &truth);
    // independent stream for sample noise keeps the schedule stable
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let names: Vec<String> = (0..cfg.cause_channels).map(|i| format!("c{i}")).collect();
    let interaction_mean = cfg.class_mean(&cfg.interaction_label);
    let background_mean = cfg.class_mean(&cfg.background_label);

    let cause_period = 1e9 / cfg.cause_hz;
    let effect_period = 1e9 / cfg.effect_hz;
    let mut envelopes = Vec::new();
    let (mut ci, mut ei) = (0u64, 0u64);
    let (mut tcur, mut ecur) = (0usize, 0usize);
    loop {
        let tc = cfg.start_ts_ns + (ci as f64 * cause_period).round() as i64;
        let te = cfg.start_ts_ns + (ei as f64 * effect_period).round() as i64;
        if tc > end && te > end {
            break;
        }
        if tc <= te {
            while tcur < truth.len() && truth[tcur].cause_end_ts_ns < tc {
                tcur += 1;
            }
            let active = truth.get(tcur).is_some_and(|g| g.cause_start_ts_ns <= tc);
            let base = if active { &interaction_mean } else { &background_mean };
            let drift = cfg.drift_at(tc);
            let fields: Vec<(String, f64)> = names
                .iter()
                .enumerate()
                .map(|(i, n)| (n.clone(), base[i] + drift[i] + cfg.class_sigma * noise.sample(&mut rng)))
                .collect();
            ci += 1;
            envelopes.push(SampleEnvelope::new(&cfg.cause_topic, "operator-cam", ci, tc, Payload::Fields(fields)));
        } else {
            while ecur < truth.len() && truth[ecur].effect_transition_ts_ns <= te {
                ecur += 1;
            }
            let level = if ecur % 2 == 1 { cfg.effect_step_height } else { 0.0 };
            let v = level + cfg.effect_noise_sigma * noise.sample(&mut rng);
            ei += 1;
            envelopes.push(SampleEnvelope::new(
                &cfg.effect_topic,
                "machine-meter",
                ei,
                te,
                Payload::fields([("power", v)]),
            ));
        }
    }
    Ok(SimOutput { truth, envelopes })
}

/// Creates the topics and publishes a generated run as fast as possible.
pub fn run_sim(cfg: &SimConfig, broker: &Broker) -> Result<SimOutput, SimError> {
    let out = generate(cfg)?;
    broker.ensure_topic(&cfg.cause_topic)?;
    broker.ensure_topic(&cfg.effect_topic)?;
    for env in &out.envelopes {
        broker.publish(env.clone())?;
    }
    Ok(out)
}

pub fn write_ground_truth(path: &Path, truth: &[GroundTruthEvent]) -> Result<(), SimError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for g in truth {
        serde_json::to_writer(&mut f, g).map_err(std::io::Error::other)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruthEvent>, SimError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    f.lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?).map_err(std::io::Error::other)?))
        .collect()
}

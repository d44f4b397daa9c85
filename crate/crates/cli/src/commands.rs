use std::path::{Path, PathBuf};
use std::time::Duration;

use adaptloop::kg::KgStore;
use adaptloop::pipeline::{
    adaptation_run, noisy_run, noisy_sim, oracle_run, oracle_sim, reference_esd, AdaptationConfig,
};
use adaptloop::platform::PlatformConfig;
use adaptloop::sim::{run_sim, sim_kg, write_ground_truth, SimConfig};
use adaptloop::stream::{ns_to_secs, Broker, BrokerConfig, TopicDescriptor};
use anyhow::{bail, Context};
use serde_json::{json, Value};

use crate::bench;
use crate::client::Client;
use crate::criteria;
use crate::report::{Check, Report};

/// Loads the platform config (defaults when no file is given) and applies
/// command-line overrides.
pub fn platform_config(
    path: Option<&Path>,
    data_dir: Option<PathBuf>,
    listen: Option<String>,
) -> anyhow::Result<PlatformConfig> {
    let mut cfg = match path {
        Some(p) => {
            if !p.exists() {
                bail!("config file {} not found", p.display());
            }
            PlatformConfig::load(p)?
        }
        None => PlatformConfig::default(),
    };
    if data_dir.is_some() {
        cfg.data_dir = data_dir;
    }
    if let Some(l) = listen {
        cfg.listen = l;
    }
    Ok(cfg)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

pub struct SimArgs {
    pub config: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub seed: Option<u64>,
    pub duration_s: Option<f64>,
}

/// Runs the simulator into a broker (persistent under the data dir when
/// given) and writes the ground-truth log. The data dir also receives the
/// simulated cell's knowledge graph.
pub fn sim(args: SimArgs) -> anyhow::Result<Report> {
    let mut cfg: SimConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => SimConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(d) = args.duration_s {
        cfg.run_duration_s = d;
    }
    let broker = match &args.data_dir {
        Some(dir) => Broker::open(BrokerConfig::persistent(dir))?,
        None => Broker::in_memory(),
    };
    for t in [&cfg.cause_topic, &cfg.effect_topic] {
        if broker.topic(t).is_none() {
            broker.create_topic(TopicDescriptor::new(t.as_str()))?;
        }
    }
    let out = run_sim(&cfg, &broker)?;
    broker.flush()?;
    let truth_path = args
        .truth
        .clone()
        .or_else(|| args.data_dir.as_ref().map(|d| d.join("ground_truth.jsonl")));
    if let Some(p) = &truth_path {
        write_ground_truth(p, &out.truth)?;
    }
    if let Some(dir) = &args.data_dir {
        KgStore::open(dir.join("kg.json"))?.import(sim_kg(&cfg))?;
    }
    let taus: Vec<f64> = out.truth.iter().map(|t| ns_to_secs(t.true_tau_ns)).collect();
    let mean_tau = if taus.is_empty() { 0.0 } else { taus.iter().sum::<f64>() / taus.len() as f64 };
    let metrics = json!({
        "seed": cfg.seed,
        "events": out.truth.len(),
        "envelopes": out.envelopes.len(),
        "mean_tau_s": mean_tau,
        "cause_topic": cfg.cause_topic,
        "effect_topic": cfg.effect_topic,
        "ground_truth": truth_path.map(|p| p.display().to_string()),
    });
    Ok(Report::new("sim", metrics, Vec::new()))
}

pub struct BrokerBenchArgs {
    pub duration: Duration,
    pub loopback_duration: Duration,
}

pub async fn bench_broker(args: BrokerBenchArgs) -> anyhow::Result<Report> {
    let duration = args.duration;
    let in_process = tokio::task::spawn_blocking(move || bench::broker_in_process(duration)).await??;
    let checks = criteria::broker(&in_process);
    let loopback = if args.loopback_duration.is_zero() {
        Value::Null
    } else {
        serde_json::to_value(bench::broker_loopback(args.loopback_duration).await?)?
    };
    let metrics = json!({
        "in_process": in_process,
        "loopback_http": loopback,
        "reference_server_class": {
            "producer_msg_per_s": 182_000,
            "producer_mean_delay_ms": 679,
            "single_consumer_max_msg_per_s": 388_000,
        },
    });
    Ok(Report::new("bench broker", metrics, checks))
}

pub async fn bench_edge(duration: Duration) -> anyhow::Result<Report> {
    let sensors = bench::standard_node();
    let r = bench::edge(&sensors, duration).await?;
    let checks = criteria::edge(&r);
    let metrics = json!({
        "node": sensors,
        "result": r,
        "reference_edge_node": {"msg_per_s": 284, "mean_msg_bytes": 250.2, "mean_delay_ms": 31},
    });
    Ok(Report::new("bench edge", metrics, checks))
}

pub struct EvalArgs {
    pub oracle: bool,
    pub adaptation: bool,
    pub seed: u64,
    pub duration_s: Option<f64>,
}

fn prefixed(prefix: &str, cs: Vec<Check>) -> Vec<Check> {
    cs.into_iter()
        .map(|mut c| {
            c.name = format!("{prefix}: {}", c.name);
            c
        })
        .collect()
}

pub fn eval(args: EvalArgs) -> anyhow::Result<Report> {
    let mut metrics = serde_json::Map::new();
    let mut checks = Vec::new();
    if args.oracle {
        let sim = oracle_sim(args.seed);
        let r = oracle_run(&sim)?;
        checks.extend(prefixed("oracle", criteria::oracle(&sim, &r)));
        metrics.insert("oracle".into(), serde_json::to_value(&r)?);
    } else {
        let sim = noisy_sim(args.seed);
        let r = noisy_run(&sim, reference_esd(&sim))?;
        checks.extend(prefixed("noisy", criteria::noisy(&r)));
        metrics.insert("noisy".into(), serde_json::to_value(&r)?);
    }
    if args.adaptation {
        let mut cfg = AdaptationConfig::standard(args.seed);
        if let Some(d) = args.duration_s {
            cfg.sim.run_duration_s = d;
        }
        let r = adaptation_run(&cfg)?;
        checks.extend(prefixed("adaptation", criteria::adaptation(&r)));
        metrics.insert("adaptation".into(), serde_json::to_value(&r)?);
    }
    Ok(Report::new("eval", Value::Object(metrics), checks))
}

pub enum WorkflowAction {
    /// Creates from a spec file, or restarts an existing workflow by id.
    Start { spec: Option<PathBuf>, id: Option<String> },
    Stop { id: String },
    Stats { id: String },
}

pub async fn workflow(server: &str, action: WorkflowAction) -> anyhow::Result<Value> {
    let c = Client::new(server);
    match action {
        WorkflowAction::Start { spec: Some(path), .. } => {
            let spec: Value = read_json(&path)?;
            c.post("/slb/workflows", &spec).await
        }
        WorkflowAction::Start { id: Some(id), .. } => c.post(&format!("/slb/workflows/{id}/start"), &json!({})).await,
        WorkflowAction::Start { .. } => bail!("workflow start needs --spec FILE or a workflow id"),
        WorkflowAction::Stop { id } => c.call(reqwest::Method::DELETE, &format!("/slb/workflows/{id}"), None).await,
        WorkflowAction::Stats { id } => c.get(&format!("/slb/workflows/{id}/stats")).await,
    }
}

pub enum TrainerCommand {
    Status,
    Approve,
}

pub async fn trainer(server: &str, cmd: TrainerCommand) -> anyhow::Result<Value> {
    let c = Client::new(server);
    match cmd {
        TrainerCommand::Status => c.get("/trainer/status").await,
        TrainerCommand::Approve => c.post("/trainer/approve", &json!({})).await,
    }
}

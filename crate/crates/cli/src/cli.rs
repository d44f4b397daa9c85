use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::client::DEFAULT_SERVER;
use crate::commands::{self, BrokerBenchArgs, EvalArgs, SimArgs, TrainerCommand, WorkflowAction};
use crate::report::Report;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECKS_FAILED: i32 = 1;
pub const EXIT_ERROR: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "adaptloop", version, about = "Streaming self-labeling and model adaptation platform")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub global: GlobalArgs,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON config file (platform config for serve, simulator config for sim).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub listen: Option<String>,
    /// Print a machine-readable JSON report.
    #[arg(long, global = true)]
    pub json: bool,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Seconds.
    #[arg(long, global = true)]
    pub duration: Option<f64>,
    /// Base URL of a running server (workflow and trainer commands).
    #[arg(long, global = true, default_value = DEFAULT_SERVER)]
    pub server: String,
    /// tracing filter, e.g. `info` or `adaptloop=debug`.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run broker, knowledge graph, engine, models and the HTTP API.
    Serve,
    /// Generate a simulated cause/effect stream with ground truth.
    Sim {
        /// Ground-truth JSON-lines output (default: DATA_DIR/ground_truth.jsonl).
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Manage workflows on a running server.
    Workflow {
        #[command(subcommand)]
        action: WorkflowCmd,
    },
    /// Throughput and latency benchmarks.
    Bench {
        #[command(subcommand)]
        target: BenchCmd,
    },
    /// Simulator -> workflow -> trainer pipeline with a metrics report.
    Eval {
        /// Use oracle effect detection and interaction times.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        no_adaptation: bool,
    },
    /// Inspect or approve the trainer on a running server.
    Trainer {
        #[command(subcommand)]
        action: TrainerCmd,
    },
}

#[derive(Debug, Subcommand)]
pub enum WorkflowCmd {
    Start {
        /// Workflow id of an existing, stopped workflow.
        id: Option<String>,
        /// WorkflowSpec JSON to create and start.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    Stop {
        id: String,
    },
    Stats {
        id: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum BenchCmd {
    /// One producer and one consumer in-process, then loopback HTTP.
    Broker {
        /// Seconds of the loopback HTTP run; 0 skips it.
        #[arg(long, default_value_t = 5.0)]
        loopback_duration: f64,
    },
    /// A standard edge node posting over loopback HTTP.
    Edge,
}

#[derive(Debug, Subcommand)]
pub enum TrainerCmd {
    Status,
    Approve,
}

fn secs(d: f64) -> anyhow::Result<Duration> {
    Duration::try_from_secs_f64(d).map_err(|_| anyhow::anyhow!("invalid duration {d}"))
}

fn runtime() -> anyhow::Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

enum Output {
    Report(Report),
    Json(Value),
    Nothing,
}

fn dispatch(cli: Cli) -> anyhow::Result<Output> {
    let g = cli.global;
    Ok(match cli.command {
        Command::Serve => {
            let cfg = commands::platform_config(g.config.as_deref(), g.data_dir, g.listen)?;
            runtime()?.block_on(crate::server::serve(cfg))?;
            Output::Nothing
        }
        Command::Sim { truth } => Output::Report(commands::sim(SimArgs {
            config: g.config,
            data_dir: g.data_dir,
            truth,
            seed: g.seed,
            duration_s: g.duration,
        })?),
        Command::Workflow { action } => {
            let action = match action {
                WorkflowCmd::Start { id, spec } => WorkflowAction::Start { spec, id },
                WorkflowCmd::Stop { id } => WorkflowAction::Stop { id },
                WorkflowCmd::Stats { id } => WorkflowAction::Stats { id },
            };
            Output::Json(runtime()?.block_on(commands::workflow(&g.server, action))?)
        }
        Command::Bench {
            target: BenchCmd::Broker { loopback_duration },
        } => {
            let args = BrokerBenchArgs {
                duration: secs(g.duration.unwrap_or(30.0))?,
                loopback_duration: secs(loopback_duration)?,
            };
            Output::Report(runtime()?.block_on(commands::bench_broker(args))?)
        }
        Command::Bench { target: BenchCmd::Edge } => {
            let d = secs(g.duration.unwrap_or(60.0))?;
            Output::Report(runtime()?.block_on(commands::bench_edge(d))?)
        }
        Command::Eval { oracle, no_adaptation } => Output::Report(commands::eval(EvalArgs {
            oracle,
            adaptation: !oracle && !no_adaptation,
            seed: g.seed.unwrap_or(1),
            duration_s: g.duration,
        })?),
        Command::Trainer { action } => {
            let cmd = match action {
                TrainerCmd::Status => TrainerCommand::Status,
                TrainerCmd::Approve => TrainerCommand::Approve,
            };
            Output::Json(runtime()?.block_on(commands::trainer(&g.server, cmd))?)
        }
    })
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let json = cli.global.json;
    let _ = tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::new(&cli.global.log_level))
        .with_writer(std::io::stderr)
        .try_init();
    match dispatch(cli) {
        Ok(Output::Report(r)) => {
            if json {
                println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
            } else {
                print!("{}", r.render_text());
            }
            if r.passed {
                EXIT_OK
            } else {
                EXIT_CHECKS_FAILED
            }
        }
        Ok(Output::Json(v)) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("value serializes"));
            EXIT_OK
        }
        Ok(Output::Nothing) => EXIT_OK,
        Err(e) => {
            if json {
                println!("{}", serde_json::json!({"error": format!("{e:#}")}));
            }
            eprintln!("error: {e:#}");
            EXIT_ERROR
        }
    }
}

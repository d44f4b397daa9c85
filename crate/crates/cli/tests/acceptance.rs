//! Full-size acceptance run: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=broker,edge` restricts the run to the named criteria.

#[path = "../../core/tests/suites/mod.rs"]
mod suites;

use std::time::{Duration, Instant};

use adaptloop::pipeline::{
    adaptation_run, noisy_run, noisy_sim, oracle_run, oracle_sim, reference_esd, AdaptationConfig,
};
use adaptloop_cli::bench;
use adaptloop_cli::criteria;
use adaptloop_cli::report::Check;

struct Criterion {
    key: &'static str,
    title: &'static str,
    /// Stated runtime limit, if any.
    budget: Option<Duration>,
    run: fn() -> Result<(Vec<Check>, String), String>,
}

fn broker() -> Result<(Vec<Check>, String), String> {
    let r = bench::broker_in_process(Duration::from_secs(30)).map_err(|e| e.to_string())?;
    let summary = format!(
        "{:.0} msg/s over {:.1} s, latency mean {:.3} ms p99 {:.3} ms, {:.1} B/msg",
        r.msg_per_s, r.duration_s, r.latency.mean_ms, r.latency.p99_ms, r.mean_msg_bytes
    );
    Ok((criteria::broker(&r), summary))
}

fn edge() -> Result<(Vec<Check>, String), String> {
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    let r = rt
        .block_on(bench::edge(&bench::standard_node(), Duration::from_secs(60)))
        .map_err(|e| e.to_string())?;
    let summary = format!(
        "{:.2} msg/s over {:.1} s, {} sent {} received, latency mean {:.2} ms p99 {:.2} ms, {:.1} B/msg",
        r.msg_per_s, r.duration_s, r.sent, r.received, r.latency.mean_ms, r.latency.p99_ms, r.mean_msg_bytes
    );
    Ok((criteria::edge(&r), summary))
}

fn oracle() -> Result<(Vec<Check>, String), String> {
    let sim = oracle_sim(1);
    let r = oracle_run(&sim).map_err(|e| e.to_string())?;
    let summary = format!(
        "{} records / {} events, accuracy {:.3}, IoU min {:.4}, evicted {}",
        r.eval.positive_records, r.eval.truth_events, r.eval.label_accuracy, r.eval.min_iou, r.stats.evicted
    );
    Ok((criteria::oracle(&sim, &r), summary))
}

fn noisy() -> Result<(Vec<Check>, String), String> {
    let mut checks = Vec::new();
    let mut parts = Vec::new();
    for seed in 1..=3 {
        let sim = noisy_sim(seed);
        let r = noisy_run(&sim, reference_esd(&sim)).map_err(|e| e.to_string())?;
        parts.push(format!(
            "seed {seed}: missed {} spurious {} IoU {:.3}",
            r.eval.missed, r.eval.spurious, r.eval.mean_iou
        ));
        checks.extend(criteria::noisy(&r).into_iter().map(|mut c| {
            c.name = format!("seed {seed} {}", c.name);
            c
        }));
    }
    Ok((checks, parts.join("; ")))
}

fn adaptation() -> Result<(Vec<Check>, String), String> {
    let r = adaptation_run(&AdaptationConfig::standard(1)).map_err(|e| e.to_string())?;
    let summary = format!(
        "frozen {:.3} -> {:.3}, retrained {:.3}, oracle twin {:.3}, {} post-drift samples",
        r.frozen_pre_accuracy,
        r.frozen_post_accuracy,
        r.retrained_post_accuracy,
        r.oracle_twin_post_accuracy,
        r.samples_after_drift
    );
    Ok((criteria::adaptation(&r), summary))
}

fn properties() -> Result<(Vec<Check>, String), String> {
    let checks: Vec<Check> = suites::SUITES
        .iter()
        .map(|(name, suite)| match suite() {
            Ok(()) => Check::new(*name, true, "ok", "all cases pass"),
            Err(e) => Check::new(*name, false, e, "all cases pass"),
        })
        .collect();
    let summary = format!("{} suites", checks.len());
    Ok((checks, summary))
}

const CRITERIA: &[Criterion] = &[
    Criterion {
        key: "broker",
        title: "broker throughput (in-process, 30 s)",
        budget: Some(Duration::from_secs(120)),
        run: broker,
    },
    Criterion {
        key: "edge",
        title: "edge-node emulation (loopback, 60 s)",
        budget: Some(Duration::from_secs(120)),
        run: edge,
    },
    Criterion {
        key: "oracle",
        title: "oracle end-to-end exactness",
        budget: Some(Duration::from_secs(60)),
        run: oracle,
    },
    Criterion {
        key: "noisy",
        title: "noisy-model end-to-end",
        budget: Some(Duration::from_secs(120)),
        run: noisy,
    },
    Criterion {
        key: "adaptation",
        title: "adaptation trend",
        budget: Some(Duration::from_secs(300)),
        run: adaptation,
    },
    Criterion {
        key: "properties",
        title: "property suites",
        budget: None,
        run: properties,
    },
];

fn main() {
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let mut failed = 0;
    for c in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.iter().any(|k| k == c.key)) {
            continue;
        }
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let (mut checks, summary) = match outcome {
            Ok(x) => x,
            Err(e) => (vec![Check::new("run", false, e, "completes")], String::new()),
        };
        if let Some(b) = c.budget {
            checks.push(Check::at_most("runtime s", elapsed.as_secs_f64(), b.as_secs_f64()));
        }
        let passed = checks.iter().all(|k| k.passed);
        failed += usize::from(!passed);
        println!(
            "{} {} [{:.1} s]: {summary}",
            if passed { "PASS" } else { "FAIL" },
            c.title,
            elapsed.as_secs_f64()
        );
        for k in checks.iter().filter(|k| !k.passed) {
            println!("    {}", k.line());
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

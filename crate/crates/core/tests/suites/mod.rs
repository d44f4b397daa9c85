//! Randomized property suites with independent oracles. Shared by the
//! `properties` test target and the acceptance target.

#![allow(dead_code)]

use std::collections::HashSet;

use adaptloop::kg::{EffectPattern, KgNode, KgStore, StateKind, StateSymbol, TruthRow, TruthTable, WILDCARD};
use adaptloop::models::{
    esd_detect, loss_and_grad, task_train, version_dataset, EsdConfig, LabeledSample, Provenance, SplitTag,
    TrainParams,
};
use adaptloop::slb::{compute_cause_window, CauseResolution, EffectEvent, WorkflowCore};
use adaptloop::stream::{Broker, Payload, SampleEnvelope, TopicDescriptor};
use proptest::prelude::*;
use proptest::test_runner::{RngAlgorithm, TestCaseResult, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const S: i64 = 1_000_000_000;

pub type Suite = (&'static str, fn() -> Result<(), String>);

pub const SUITES: &[Suite] = &[
    ("truth-table functionality vs exhaustive expansion", truth_table_functionality),
    ("scan_fifo vs brute-force matcher", matcher_vs_bruteforce),
    ("FIFO eviction bound and conservation", fifo_bound_and_conservation),
    ("compute_cause_window identities", window_identities),
    ("dataset/weights content-address determinism", content_address_determinism),
    ("query_range vs linear-scan oracle", query_range_vs_linear_scan),
    ("ESD clean-step soundness", esd_clean_step_soundness),
    ("training gradient vs finite differences (rel 1e-4)", gradient_check),
];

/// Runs `cases` deterministic cases of `test` over `strategy`.
fn run<St>(cases: u32, strategy: St, test: impl Fn(St::Value) -> TestCaseResult) -> Result<(), String>
where
    St: Strategy,
    St::Value: std::fmt::Debug,
{
    let config = ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

// ---- truth tables ---------------------------------------------------------

/// Expands every row over the alphabets; true when some tuple maps to two causes.
fn expansion_conflicts(alphabets: &[Vec<String>], rows: &[TruthRow]) -> bool {
    let mut tuples: Vec<Vec<String>> = vec![vec![]];
    for alphabet in alphabets {
        tuples = tuples
            .into_iter()
            .flat_map(|t| {
                alphabet.iter().map(move |s| {
                    let mut t = t.clone();
                    t.push(s.clone());
                    t
                })
            })
            .collect();
    }
    tuples.iter().any(|tuple| {
        let causes: HashSet<&str> = rows
            .iter()
            .filter(|row| row.effects.iter().zip(tuple).all(|(p, s)| p.matches(s)))
            .map(|row| row.cause.as_str())
            .collect();
        causes.len() > 1
    })
}

type RawRows = Vec<(Vec<Option<usize>>, usize)>;

fn arb_table() -> impl Strategy<Value = (Vec<usize>, RawRows)> {
    prop::collection::vec(1usize..=4, 1..=3).prop_flat_map(|sizes| {
        let pos: Vec<BoxedStrategy<Option<usize>>> =
            sizes.iter().map(|&k| prop::option::weighted(0.75, 0..k).boxed()).collect();
        (Just(sizes), prop::collection::vec((pos, 0usize..3), 0..6))
    })
}

fn rows_from(raw: &RawRows) -> Vec<TruthRow> {
    raw.iter()
        .filter(|(p, _)| p.iter().any(|x| x.is_some()))
        .map(|(p, c)| {
            TruthRow::new(
                p.iter().map(|x| x.map_or(WILDCARD.to_string(), |s| format!("s{s}"))),
                format!("c{c}"),
            )
        })
        .collect()
}

pub fn truth_table_functionality() -> Result<(), String> {
    run(256, arb_table(), |(sizes, raw)| {
        let effect_ids: Vec<String> = (0..sizes.len()).map(|i| format!("e{i}")).collect();
        let alphabets: Vec<Vec<String>> =
            sizes.iter().map(|&k| (0..k).map(|s| format!("s{s}")).collect()).collect();
        let store = KgStore::new();
        let cause = ["c0", "c1", "c2"]
            .iter()
            .fold(KgNode::new("hand", "hand"), |n, s| n.with_state(*s, StateKind::Transition));
        store.upsert_node(cause).unwrap();
        for (id, alphabet) in effect_ids.iter().zip(&alphabets) {
            let node = alphabet
                .iter()
                .fold(KgNode::new(id.as_str(), id.as_str()), |n, s| n.with_state(s.as_str(), StateKind::Transition));
            store.upsert_node(node).unwrap();
        }
        let rows = rows_from(&raw);
        let table = TruthTable {
            table_id: "t".into(),
            cause_node: "hand".into(),
            effect_nodes: effect_ids,
            rows: rows.clone(),
            max_wait_ns: 1,
        };
        let conflicted = expansion_conflicts(&alphabets, &rows);
        let report = store.validate_table(&table);
        prop_assert_eq!(!report.conflicts.is_empty(), conflicted);
        match store.put_truth_table(table) {
            Ok(_) => {
                prop_assert!(!conflicted);
                let stored = store.table_by_id("t").unwrap();
                prop_assert!(!expansion_conflicts(&alphabets, &stored.rows));
            }
            Err(_) => prop_assert!(conflicted || !report.errors.is_empty()),
        }
        Ok(())
    })
}

// ---- matcher --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Outcome {
    Resolved(String, Vec<String>),
    Inconsistent(Vec<String>),
    Evicted(String),
    Pending(String),
}

/// (event id, effect position, state, arrival)
type OracleFifo = Vec<(String, usize, String, i64)>;

/// Independent matcher: for each anchor in arrival order, enumerates every
/// subset of later cached events inside max_wait and keeps subsets that fill
/// exactly the row's other required positions, choosing per position the
/// earliest event.
fn oracle_scan(t: &TruthTable, fifo: &mut OracleFifo, now: i64, max_wait: i64) -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < fifo.len() {
        let (aid, apos, astate, aarr) = fifo[i].clone();
        let later: Vec<usize> = (i + 1..fifo.len()).filter(|&j| fifo[j].3 - aarr <= max_wait).collect();
        let mut completions: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut matchable = false;
        for (r, row) in t.rows.iter().enumerate() {
            if row.effects[apos] != EffectPattern::Is(astate.clone()) {
                continue;
            }
            matchable = true;
            let mut need: Vec<usize> = row.required_positions().filter(|&q| q != apos).collect();
            need.sort_unstable();
            let mut best: Option<Vec<usize>> = None;
            for mask in 0u32..(1 << later.len()) {
                let subset: Vec<usize> = (0..later.len()).filter(|b| mask & (1 << b) != 0).map(|b| later[b]).collect();
                if subset.len() != need.len() {
                    continue;
                }
                let mut positions: Vec<usize> = subset.iter().map(|&j| fifo[j].1).collect();
                positions.sort_unstable();
                if positions != need || !subset.iter().all(|&j| row.effects[fifo[j].1].matches(&fifo[j].2)) {
                    continue;
                }
                let key = |s: &Vec<usize>| -> Vec<usize> {
                    need.iter().map(|q| *s.iter().find(|&&j| fifo[j].1 == *q).unwrap()).collect()
                };
                let better = best.as_ref().is_none_or(|b| key(&subset).iter().zip(&key(b)).all(|(x, y)| x <= y));
                if better {
                    best = Some(subset);
                }
            }
            if let Some(mut subset) = best {
                subset.push(i);
                completions.push((r, subset));
            }
        }
        if completions.is_empty() {
            if aarr < now - max_wait || !matchable {
                fifo.remove(i);
                out.push(Outcome::Evicted(aid));
            } else {
                out.push(Outcome::Pending(aid));
                i += 1;
            }
            continue;
        }
        let causes: Vec<&String> = completions.iter().map(|(r, _)| &t.rows[*r].cause).collect();
        let same = causes.iter().all(|c| *c == causes[0]);
        let mut members: Vec<usize> = if same {
            completions[0].1.clone()
        } else {
            completions.iter().flat_map(|(_, m)| m.clone()).collect()
        };
        members.sort_unstable();
        members.dedup();
        let mut ids: Vec<(i64, usize, String)> = members.iter().map(|&j| (fifo[j].3, j, fifo[j].0.clone())).collect();
        ids.sort();
        let ids: Vec<String> = ids.into_iter().map(|x| x.2).collect();
        let cause = causes[0].clone();
        for &j in members.iter().rev() {
            fifo.remove(j);
        }
        out.push(if same { Outcome::Resolved(cause, ids) } else { Outcome::Inconsistent(ids) });
    }
    out
}

fn to_outcomes(res: &[CauseResolution]) -> Vec<Outcome> {
    res.iter()
        .map(|r| match r {
            CauseResolution::Resolved { cause_state, events, .. } => {
                Outcome::Resolved(cause_state.clone(), events.iter().map(|e| e.event_id.clone()).collect())
            }
            CauseResolution::Inconsistent { event_ids, .. } => Outcome::Inconsistent(event_ids.clone()),
            CauseResolution::Evicted { event_id } => Outcome::Evicted(event_id.clone()),
            CauseResolution::Ambiguous { event_id, .. } => Outcome::Pending(event_id.clone()),
        })
        .collect()
}

#[derive(Debug, Clone)]
struct Instance {
    sizes: Vec<usize>,
    rows: RawRows,
    /// (node, state, arrival gap)
    events: Vec<(usize, usize, i64)>,
    scan_offsets: Vec<i64>,
}

/// Up to 3 effect nodes, alphabets up to 4, up to 20 events.
fn arb_instance() -> impl Strategy<Value = Instance> {
    prop::collection::vec(1usize..=4, 1..=3).prop_flat_map(|sizes| {
        let pos: Vec<BoxedStrategy<Option<usize>>> =
            sizes.iter().map(|&k| prop::option::weighted(0.7, 0..k).boxed()).collect();
        let n = sizes.len();
        let max_state = *sizes.iter().max().unwrap();
        (
            Just(sizes),
            prop::collection::vec((pos, 0usize..3), 1..6),
            prop::collection::vec((0..n, 0..max_state, 0i64..4), 0..=20),
            prop::collection::vec(0i64..6, 1..4),
        )
            .prop_map(|(sizes, rows, events, scan_offsets)| Instance {
                sizes,
                rows,
                events,
                scan_offsets,
            })
    })
}

fn build(inst: &Instance) -> (TruthTable, Vec<(EffectEvent, i64)>) {
    let nodes: Vec<String> = (0..inst.sizes.len()).map(|i| format!("n{i}")).collect();
    let table = TruthTable {
        table_id: "t".into(),
        cause_node: "cause".into(),
        effect_nodes: nodes.clone(),
        rows: rows_from(&inst.rows),
        max_wait_ns: 3,
    };
    let mut arrival = 0;
    let events = inst
        .events
        .iter()
        .enumerate()
        .map(|(k, (node, state, gap))| {
            arrival += gap;
            let sym = StateSymbol::new(&nodes[*node], format!("s{}", state % inst.sizes[*node]), StateKind::Transition);
            (EffectEvent::positive(format!("e{k}"), sym, arrival + 1, 0.9), arrival)
        })
        .collect();
    (table, events)
}

pub fn matcher_vs_bruteforce() -> Result<(), String> {
    run(512, arb_instance(), |inst| {
        let (t, events) = build(&inst);
        let max_wait = t.max_wait_ns;
        let mut core = WorkflowCore::new(t.clone(), max_wait, 0.5);
        let mut fifo: OracleFifo = Vec::new();
        for (k, (e, a)) in events.iter().enumerate() {
            core.enqueue(e.clone(), *a, None).unwrap();
            fifo.push((e.event_id.clone(), t.effect_position(&e.node_id).unwrap(), e.state.symbol.clone(), *a));
            let now = a + inst.scan_offsets[k % inst.scan_offsets.len()];
            let got = to_outcomes(&core.scan(now, true));
            prop_assert_eq!(got, oracle_scan(&t, &mut fifo, now, max_wait));
        }
        // identical transcripts replay to identical resolutions
        let replay = |mut core: WorkflowCore| {
            let mut all = Vec::new();
            for (k, (e, a)) in events.iter().enumerate() {
                core.enqueue(e.clone(), *a, None).unwrap();
                all.extend(core.scan(a + inst.scan_offsets[k % inst.scan_offsets.len()], true));
            }
            all
        };
        prop_assert_eq!(
            replay(WorkflowCore::new(t.clone(), max_wait, 0.5)),
            replay(WorkflowCore::new(t.clone(), max_wait, 0.5))
        );
        Ok(())
    })
}

pub fn fifo_bound_and_conservation() -> Result<(), String> {
    run(512, arb_instance(), |inst| {
        let (t, events) = build(&inst);
        let max_wait = t.max_wait_ns;
        let mut core = WorkflowCore::new(t, max_wait, 0.5);
        for (k, (e, a)) in events.iter().enumerate() {
            core.enqueue(e.clone(), *a, None).unwrap();
            let now = a + inst.scan_offsets[k % inst.scan_offsets.len()];
            core.scan(now, true);
            prop_assert!(core.fifo().iter().all(|c| c.arrival_ns >= now - max_wait));
            let c = core.counts();
            prop_assert_eq!(c.received_positive, c.consumed + c.evicted + core.fifo().len() as u64);
        }
        let (_, left) = core.drain();
        let c = core.counts();
        prop_assert_eq!(c.received_positive, c.consumed + c.evicted + left);
        Ok(())
    })
}

// ---- windows --------------------------------------------------------------

pub fn window_identities() -> Result<(), String> {
    run(
        2048,
        (1i64..i64::MAX / 4, 0i64..1_000_000_000_000, 1i64..1_000_000_000_000),
        |(t_e, tau, d)| {
            let w = compute_cause_window(t_e, tau, d, i64::MIN / 2).unwrap();
            prop_assert_eq!(w.end_ns - w.start_ns, d);
            prop_assert_eq!(w.end_ns + tau, t_e);
            prop_assert!(!w.clamped);
            // with a retention floor the window is clipped, never extended
            let floor = t_e - tau - d / 2;
            let c = compute_cause_window(t_e, tau, d, floor).unwrap();
            prop_assert_eq!(c.end_ns, w.end_ns);
            prop_assert_eq!(c.start_ns, w.start_ns.max(floor));
            prop_assert_eq!(c.clamped, floor > w.start_ns);
            Ok(())
        },
    )
}

// ---- content addressing ---------------------------------------------------

fn sample(id: u32, label: &str, features: Vec<f64>) -> LabeledSample {
    let record_id = format!("r{id}");
    LabeledSample {
        features,
        label: label.into(),
        provenance: Provenance {
            record_id: record_id.clone(),
            t0_ns: id as i64 * S,
            t1_ns: id as i64 * S + S,
        },
        split_tag: SplitTag::for_record(&record_id),
    }
}

fn clusters(n: usize, seed: u64) -> Vec<LabeledSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (label, c) = if i % 2 == 0 { ("a", 0.0) } else { ("b", 3.0) };
            sample(i as u32, label, (0..3).map(|_| c + rng.random_range(-1.0..1.0)).collect())
        })
        .collect()
}

pub fn content_address_determinism() -> Result<(), String> {
    run(
        64,
        (prop::collection::vec(0u32..30, 0..20), any::<u64>(), 24usize..60, any::<u64>()),
        |(ids, perm_seed, n, seed)| {
            // dataset ids depend only on the sample multiset
            let samples: Vec<LabeledSample> =
                ids.iter().map(|&i| sample(i, if i % 2 == 0 { "a" } else { "b" }, vec![i as f64])).collect();
            let mut shuffled = samples.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            for i in (1..shuffled.len()).rev() {
                shuffled.swap(i, rng.random_range(0..=i));
            }
            let a = version_dataset(samples.clone(), None, 1, None).unwrap();
            let b = version_dataset(shuffled, None, 2, None).unwrap();
            prop_assert_eq!(&a.version.version_id, &b.version.version_id);
            if let Some(first) = samples.first() {
                let mut more = samples.clone();
                more.push(first.clone());
                let c = version_dataset(more, None, 1, None).unwrap();
                prop_assert_ne!(&a.version.version_id, &c.version.version_id);
            }
            // (dataset, seed, hyperparameters) fix the weights ref
            let data = clusters(n, seed);
            let params = TrainParams {
                epochs: 60,
                seed,
                min_samples_per_label: 5,
                ..Default::default()
            };
            let w1 = task_train(&data, &params, None).unwrap();
            let w2 = task_train(&data, &params, None).unwrap();
            prop_assert_eq!(&w1.weights_ref, &w2.weights_ref);
            prop_assert_eq!(&w1.model, &w2.model);
            Ok(())
        },
    )
}

// ---- broker range queries -------------------------------------------------

pub fn query_range_vs_linear_scan() -> Result<(), String> {
    let queries = prop::collection::vec((0i64..1_000_100, 0i64..1_000_100), 1..20);
    run(128, (any::<u64>(), 0usize..300, 1u32..4, queries), |(seed, n, partitions, queries)| {
        let broker = Broker::in_memory();
        broker.create_topic(TopicDescriptor::new("p").with_partitions(partitions)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seqs = [0u64; 4];
        let mut all = Vec::new();
        for _ in 0..n {
            let s = rng.random_range(0..4);
            seqs[s] += 1;
            let e = SampleEnvelope::new(
                "p",
                format!("s{s}"),
                seqs[s],
                rng.random_range(1..1_000_000i64),
                Payload::fields([("v", 1.0)]),
            );
            broker.publish(e.clone()).unwrap();
            all.push(e);
        }
        for (a, b) in queries {
            let (t0, t1) = (a.min(b), a.max(b));
            let got: Vec<(i64, String, u64)> = broker
                .query_range("p", t0, t1)
                .unwrap()
                .envelopes()
                .map(|e| (e.timestamp_ns, e.source_id.clone(), e.seq))
                .collect();
            prop_assert!(got.windows(2).all(|w| w[0].0 <= w[1].0));
            let mut got_sorted = got.clone();
            got_sorted.sort();
            let mut want: Vec<(i64, String, u64)> = all
                .iter()
                .filter(|e| t0 <= e.timestamp_ns && e.timestamp_ns <= t1)
                .map(|e| (e.timestamp_ns, e.source_id.clone(), e.seq))
                .collect();
            want.sort();
            prop_assert_eq!(got_sorted, want);
        }
        Ok(())
    })
}

// ---- ESD ------------------------------------------------------------------

fn esd_cfg(pre: f64, post: f64, theta: f64) -> EsdConfig {
    EsdConfig {
        input_topic: "power".into(),
        field: None,
        node_id: "m".into(),
        rising_state: "power_on".into(),
        falling_state: "power_off".into(),
        background_state: "background".into(),
        pre_window_s: pre,
        post_window_s: post,
        threshold: theta,
        min_gap_s: 0.0,
        background_buffer_len: 10,
        negative_rate: 0.0,
        background_window_s: None,
        background_guard_s: None,
        seed: 1,
    }
}

/// Noiseless steps of magnitude >= 2 theta, spaced beyond both windows, are
/// each detected no earlier than the step and at most one post window late.
pub fn esd_clean_step_soundness() -> Result<(), String> {
    let strategy = (
        prop::collection::vec((3i64..20, 2.0f64..10.0, any::<bool>()), 1..6),
        prop::sample::select(vec![10i64, 20, 50, 100]),
        0.5f64..2.0,
        0.5f64..2.0,
        0.2f64..1.0,
    );
    run(64, strategy, |(steps, hz, pre, post, theta)| {
        let spacing_min = ((pre + post) * 1.5).ceil() as i64 + 1;
        let mut t = 5 * S;
        let mut level = 0.0;
        let mut changes = Vec::new();
        for (gap, mag, up) in &steps {
            t += (*gap).max(spacing_min) * S;
            level += if *up { mag * theta } else { -mag * theta };
            changes.push((t, level, *up));
        }
        let end = t + 10 * S;
        let mut samples = Vec::new();
        let mut ts = S;
        while ts <= end {
            let lvl = changes.iter().rev().find(|c| c.0 <= ts).map_or(0.0, |c| c.1);
            samples.push((ts, lvl));
            ts += S / hz;
        }
        let events = esd_detect(esd_cfg(pre, post, theta), &samples).unwrap();
        prop_assert_eq!(events.len(), changes.len());
        let post_ns = (post * 1e9).round() as i64;
        for (e, (t_step, _, up)) in events.iter().zip(&changes) {
            let err = e.transition_ts_ns - t_step;
            prop_assert!((0..=post_ns).contains(&err), "error {} ns", err);
            prop_assert_eq!(e.state.symbol == "power_on", *up);
        }
        Ok(())
    })
}

// ---- task model -----------------------------------------------------------

pub fn gradient_check() -> Result<(), String> {
    run(64, (any::<u64>(), 2usize..4, 1usize..5, 1usize..8), |(seed, k, d, n)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let w: Vec<f64> = (0..k * (d + 1)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let l2 = 0.1;
        let (_, g) = loss_and_grad(&w, k, &x, &y, l2);
        let h = 1e-5;
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (loss_and_grad(&wp, k, &x, &y, l2).0 - loss_and_grad(&wm, k, &x, &y, l2).0) / (2.0 * h);
            let denom = g[i].abs().max(fd.abs()).max(1e-8);
            prop_assert!((g[i] - fd).abs() / denom < 1e-4, "i={} analytic={} fd={}", i, g[i], fd);
        }
        Ok(())
    })
}

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};

use adaptloop::api::router;
use adaptloop::platform::{Platform, PlatformConfig};
use adaptloop::stream::{
    Broker, BrokerConfig, Delivery, Payload, SampleEnvelope, StreamCursor, Subscription, TopicDescriptor,
};
use axum::body::Body;
use axum::http::Request;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tower::ServiceExt;

fn env(topic: &str, source: &str, seq: u64, ts: i64) -> SampleEnvelope {
    SampleEnvelope::new(topic, source, seq, ts, Payload::fields([("v", seq as f64 * 0.5)]))
}

/// Linear-scan oracle over everything ever published.
fn brute_range(all: &[SampleEnvelope], t0: i64, t1: i64) -> Vec<SampleEnvelope> {
    let mut v: Vec<SampleEnvelope> = all
        .iter()
        .filter(|e| t0 <= e.timestamp_ns && e.timestamp_ns <= t1)
        .cloned()
        .collect();
    v.sort_by_key(|e| e.timestamp_ns);
    v
}

/// Timestamp ties can come back in partition order; compare as sorted multisets per timestamp.
fn normalize(mut v: Vec<SampleEnvelope>) -> Vec<(i64, String, u64)> {
    let mut out: Vec<_> = v.drain(..).map(|e| (e.timestamp_ns, e.source_id, e.seq)).collect();
    out.sort();
    out
}

fn random_log(rng: &mut ChaCha8Rng, broker: &Broker, topic: &str, n: usize, sources: usize) -> Vec<SampleEnvelope> {
    let mut seqs = vec![0u64; sources];
    let mut all = Vec::with_capacity(n);
    for _ in 0..n {
        let s = rng.random_range(0..sources);
        seqs[s] += 1;
        // late and out-of-order timestamps are allowed
        let ts = rng.random_range(1..1_000_000i64);
        let e = env(topic, &format!("s{s}"), seqs[s], ts);
        broker.publish(e.clone()).unwrap();
        all.push(e);
    }
    all
}

#[test]
fn query_range_matches_linear_scan_10k_messages_1k_queries() {
    let broker = Broker::in_memory();
    broker
        .create_topic(TopicDescriptor::new("big").with_partitions(3))
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let all = random_log(&mut rng, &broker, "big", 10_000, 7);
    for _ in 0..1000 {
        let a = rng.random_range(0..1_000_100i64);
        let b = rng.random_range(0..1_000_100i64);
        let (t0, t1) = (a.min(b), a.max(b));
        let got: Vec<SampleEnvelope> = broker.query_range("big", t0, t1).unwrap().envelopes().cloned().collect();
        assert!(got.windows(2).all(|w| w[0].timestamp_ns <= w[1].timestamp_ns));
        assert_eq!(normalize(got), normalize(brute_range(&all, t0, t1)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn per_source_order_preserved_under_concurrent_publishers(
        publishers in 1usize..5,
        per in 1u64..200,
        partitions in 1u32..4,
    ) {
        let broker = Arc::new(Broker::in_memory());
        broker.create_topic(TopicDescriptor::new("c").with_partitions(partitions)).unwrap();
        let total = publishers as u64 * per;
        let subs: Vec<_> = (0..2).map(|_| broker.subscribe_live("c", total as usize + 1).unwrap()).collect();
        let handles: Vec<_> = (0..publishers)
            .map(|p| {
                let broker = broker.clone();
                std::thread::spawn(move || {
                    for i in 1..=per {
                        broker.publish(env("c", &format!("pub{p}"), i, 1 + i as i64)).unwrap();
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        let mut transcripts = Vec::new();
        for mut sub in subs {
            let mut per_source: HashMap<String, Vec<u64>> = HashMap::new();
            for _ in 0..total {
                match sub.blocking_recv() {
                    Some(Delivery::Envelope(e)) => per_source.entry(e.source_id.clone()).or_default().push(e.seq),
                    other => panic!("unexpected {other:?}"),
                }
            }
            for seqs in per_source.values() {
                prop_assert_eq!(seqs.clone(), (1..=per).collect::<Vec<_>>());
            }
            transcripts.push(per_source);
        }
        prop_assert_eq!(&transcripts[0], &transcripts[1]);
    }
}

fn replay_all(broker: &Broker, topic: &str) -> Vec<SampleEnvelope> {
    let mut sub = broker
        .subscribe(&StreamCursor::replay(topic, i64::MIN, i64::MAX))
        .unwrap();
    let mut out = Vec::new();
    while let Some(d) = sub.blocking_next() {
        match d {
            Delivery::Envelope(e) => out.push((*e).clone()),
            Delivery::Lagged => unreachable!(),
        }
    }
    assert!(matches!(sub, Subscription::Replay { .. }));
    out
}

#[test]
fn restart_replay_is_byte_identical_to_independent_dump() {
    let dir = tempfile::tempdir().unwrap();
    let dump_path = dir.path().join("dump.jsonl");
    let cfg = BrokerConfig {
        segment_bytes: 4096,
        ..BrokerConfig::persistent(dir.path().join("broker"))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    {
        let broker = Broker::open(cfg.clone()).unwrap();
        broker.create_topic(TopicDescriptor::new("r")).unwrap();
        let mut dump = std::io::BufWriter::new(std::fs::File::create(&dump_path).unwrap());
        for i in 1..=2000u64 {
            let e = SampleEnvelope::new(
                "r",
                "dev",
                i,
                1_700_000_000_000_000_000 + i as i64 * 1_000_000,
                Payload::fields([("a", rng.random::<f64>()), ("b", rng.random_range(-1e6..1e6))]),
            );
            broker.publish(e.clone()).unwrap();
            serde_json::to_writer(&mut dump, &e).unwrap();
            dump.write_all(b"\n").unwrap();
        }
        dump.flush().unwrap();
        broker.flush().unwrap();
    }
    let dump = std::fs::read(&dump_path).unwrap();

    let broker = Broker::open(cfg).unwrap();
    assert_eq!(broker.partition_bytes("r", 0).unwrap(), dump);
    let mut replayed = Vec::new();
    for e in replay_all(&broker, "r") {
        replayed.extend_from_slice(&e.to_canonical_json());
        replayed.push(b'\n');
    }
    assert_eq!(replayed, dump);
    // appends continue after recovery
    broker.publish(env("r", "dev", 2001, 1_800_000_000_000_000_000)).unwrap();
    assert_eq!(replay_all(&broker, "r").len(), 2001);
}

/// Mean publish latency over `n` publishes, best of `rounds`.
fn publish_latency(broker: &Broker, topic: &str, start_seq: &mut u64, n: u64, rounds: usize) -> Duration {
    (0..rounds)
        .map(|_| {
            let t = Instant::now();
            for _ in 0..n {
                *start_seq += 1;
                broker.publish(env(topic, "load", *start_seq, *start_seq as i64)).unwrap();
            }
            t.elapsed() / n as u32
        })
        .min()
        .unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn stalled_sse_consumer_does_not_slow_publishers() {
    let p = Platform::open(
        PlatformConfig {
            trainer_period_s: 0.0,
            ..Default::default()
        },
        Some(tokio::runtime::Handle::current()),
    )
    .unwrap();
    p.broker.ensure_topic("stall").unwrap();
    let mut seq = 0;
    let baseline = publish_latency(&p.broker, "stall", &mut seq, 5_000, 5);

    // an SSE client that connects and never reads its body
    let resp = router(p.clone())
        .oneshot(Request::get("/stream/stall").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(p.broker.subscriber_count("stall").unwrap(), 1);
    let stalled = publish_latency(&p.broker, "stall", &mut seq, 5_000, 5);
    // the stalled consumer was cut off rather than allowed to grow
    assert_eq!(p.broker.subscriber_count("stall").unwrap(), 0);
    drop(resp);
    eprintln!("publish latency baseline {baseline:?}, with stalled SSE consumer {stalled:?}");
    assert!(stalled <= baseline * 2, "baseline {baseline:?} stalled {stalled:?}");
}

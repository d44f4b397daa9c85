//! Broker and edge-node throughput benchmarks.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use adaptloop::clock::{Clock, SystemClock};
use adaptloop::platform::PlatformConfig;
use adaptloop::stream::{
    Broker, BrokerConfig, Delivery, IngestRequest, Payload, SampleEnvelope, TopicDescriptor,
};
use anyhow::{bail, Context};
use parking_lot::Mutex;
use serde::Serialize;
use tokio::time::MissedTickBehavior;

use crate::client::Client;
use crate::server::LocalServer;

pub const BENCH_TOPIC: &str = "bench";
/// Producer pauses when this many messages are unconsumed.
const WINDOW: u64 = 8192;
const LATENCY_STRIDE: u64 = 16;

#[derive(Debug, Clone, Default, Serialize)]
pub struct LatencyStats {
    pub count: u64,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

/// Exact mean and max; percentiles from a strided sample.
#[derive(Debug, Default)]
struct LatencyAcc {
    count: u64,
    sum_ns: u128,
    max_ns: u64,
    sampled: Vec<u64>,
    stride: u64,
}

impl LatencyAcc {
    fn new(stride: u64) -> Self {
        Self {
            stride: stride.max(1),
            ..Self::default()
        }
    }

    fn push(&mut self, ns: i64) {
        let ns = ns.max(0) as u64;
        if self.count % self.stride == 0 {
            self.sampled.push(ns);
        }
        self.count += 1;
        self.sum_ns += ns as u128;
        self.max_ns = self.max_ns.max(ns);
    }

    fn stats(mut self) -> LatencyStats {
        if self.count == 0 {
            return LatencyStats::default();
        }
        self.sampled.sort_unstable();
        let pct = |p: f64| {
            let i = ((self.sampled.len() - 1) as f64 * p).round() as usize;
            self.sampled[i] as f64 / 1e6
        };
        LatencyStats {
            count: self.count,
            mean_ms: self.sum_ns as f64 / self.count as f64 / 1e6,
            p50_ms: pct(0.50),
            p95_ms: pct(0.95),
            p99_ms: pct(0.99),
            max_ms: self.max_ns as f64 / 1e6,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ThroughputReport {
    pub variant: String,
    pub duration_s: f64,
    pub sent: u64,
    pub received: u64,
    pub lost: u64,
    pub lagged: bool,
    pub msg_per_s: f64,
    pub mean_msg_bytes: f64,
    pub latency: LatencyStats,
}

fn imu_payload(i: u64) -> Payload {
    let t = i as f64 * 0.004;
    Payload::fields([
        ("ax", (t * 3.1).sin()),
        ("ay", (t * 2.3).cos()),
        ("az", 9.81 + (t * 0.7).sin() * 0.05),
        ("gx", (t * 1.3).sin() * 0.2),
        ("gy", (t * 1.9).cos() * 0.2),
        ("gz", (t * 0.4).sin() * 0.1),
    ])
}

/// One producer thread and one consumer thread on an in-memory topic for
/// `duration`. Latency is consumer receive time minus publish time.
pub fn broker_in_process(duration: Duration) -> anyhow::Result<ThroughputReport> {
    let broker = Broker::open(BrokerConfig {
        data_dir: None,
        segment_bytes: 8 << 20,
    })?;
    broker.create_topic(TopicDescriptor::new(BENCH_TOPIC).with_retention(i64::MAX, 64 << 20))?;
    let mut sub = broker.subscribe_live(BENCH_TOPIC, 1 << 16)?;
    let origin = Instant::now();
    let consumed = Arc::new(AtomicU64::new(0));

    let consumer = {
        let consumed = consumed.clone();
        thread::spawn(move || {
            let mut acc = LatencyAcc::new(LATENCY_STRIDE);
            let mut lagged = false;
            let mut n = 0u64;
            while let Some(d) = sub.blocking_recv() {
                match d {
                    Delivery::Envelope(e) => {
                        acc.push(origin.elapsed().as_nanos() as i64 - e.timestamp_ns);
                        n += 1;
                        consumed.store(n, Ordering::Release);
                    }
                    Delivery::Lagged => lagged = true,
                }
            }
            (acc, lagged)
        })
    };

    let mut sent = 0u64;
    let mut bytes = 0usize;
    let mut sized = 0usize;
    while sent % 256 != 0 || origin.elapsed() < duration {
        while sent - consumed.load(Ordering::Acquire) >= WINDOW {
            thread::yield_now();
        }
        sent += 1;
        let env = SampleEnvelope::new(BENCH_TOPIC, "producer", sent, 1 + origin.elapsed().as_nanos() as i64, imu_payload(sent));
        if sent % 1024 == 1 {
            bytes += env.to_canonical_json().len();
            sized += 1;
        }
        broker.publish(env)?;
    }
    let elapsed = origin.elapsed();
    let deadline = Instant::now() + Duration::from_secs(10);
    while consumed.load(Ordering::Acquire) < sent && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(1));
    }
    // closes the subscription
    drop(broker);
    let (acc, lagged) = consumer.join().map_err(|_| anyhow::anyhow!("consumer thread panicked"))?;
    let received = acc.count;
    Ok(ThroughputReport {
        variant: "in_process".into(),
        duration_s: elapsed.as_secs_f64(),
        sent,
        received,
        lost: sent.saturating_sub(received),
        lagged,
        msg_per_s: sent as f64 / elapsed.as_secs_f64(),
        mean_msg_bytes: bytes as f64 / sized.max(1) as f64,
        latency: acc.stats(),
    })
}

fn bench_config() -> PlatformConfig {
    PlatformConfig {
        trainer_period_s: 0.0,
        ..PlatformConfig::default()
    }
}

#[derive(Default)]
struct Received {
    count: u64,
    bytes: u64,
    lagged: bool,
    latency: Option<LatencyAcc>,
}

/// Reads one SSE stream into `into` until the stream ends.
fn spawn_sse_consumer(
    client: &Client,
    topic: &str,
    into: Arc<Mutex<Received>>,
) -> impl std::future::Future<Output = anyhow::Result<tokio::task::JoinHandle<()>>> {
    let client = client.clone();
    let topic = topic.to_string();
    async move {
        let mut sse = client.sse(&topic, 1 << 16).await?;
        Ok(tokio::spawn(async move {
            let clock = SystemClock;
            while let Ok(Some(ev)) = sse.next_event().await {
                let mut r = into.lock();
                if ev.event.as_deref() == Some("lagged") {
                    r.lagged = true;
                    break;
                }
                if let Ok(env) = serde_json::from_str::<SampleEnvelope>(&ev.data) {
                    r.count += 1;
                    r.bytes += ev.data.len() as u64;
                    let lat = clock.now_ns() - env.timestamp_ns;
                    r.latency.get_or_insert_with(|| LatencyAcc::new(1)).push(lat);
                }
            }
        }))
    }
}

async fn drain(received: &Mutex<Received>, expected: u64, grace: Duration) {
    let deadline = Instant::now() + grace;
    while received.lock().count < expected && Instant::now() < deadline {
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
}

fn ingest_body(topic: &str, source: &str, ts: i64, payload: Payload) -> IngestRequest {
    IngestRequest {
        topic: topic.into(),
        source_id: source.into(),
        timestamp_ns: Some(ts),
        client_msg_id: None,
        payload,
    }
}

/// Sequential POST /ingest against a loopback server with an SSE consumer.
pub async fn broker_loopback(duration: Duration) -> anyhow::Result<ThroughputReport> {
    let server = LocalServer::start(bench_config(), "127.0.0.1:0").await?;
    server.platform.broker.ensure_topic(BENCH_TOPIC)?;
    let client = Client::new(server.base_url());
    let token = format!("Bearer {}", server.platform.config.ingest_token);
    let received = Arc::new(Mutex::new(Received::default()));
    let consumer = spawn_sse_consumer(&client, BENCH_TOPIC, received.clone()).await?;

    let clock = SystemClock;
    let start = Instant::now();
    let mut sent = 0u64;
    while start.elapsed() < duration {
        let body = ingest_body(BENCH_TOPIC, "producer", clock.now_ns(), imu_payload(sent));
        let resp = client
            .http()
            .post(client.url("/ingest"))
            .header("authorization", &token)
            .json(&body)
            .send()
            .await?;
        if !resp.status().is_success() {
            bail!("ingest rejected: {}", resp.status());
        }
        sent += 1;
    }
    let elapsed = start.elapsed();
    drain(&received, sent, Duration::from_secs(10)).await;
    consumer.abort();
    server.shutdown().await?;
    let r = std::mem::take(&mut *received.lock());
    Ok(ThroughputReport {
        variant: "loopback_http".into(),
        duration_s: elapsed.as_secs_f64(),
        sent,
        received: r.count,
        lost: sent.saturating_sub(r.count),
        lagged: r.lagged,
        msg_per_s: sent as f64 / elapsed.as_secs_f64(),
        mean_msg_bytes: r.bytes as f64 / r.count.max(1) as f64,
        latency: r.latency.map(LatencyAcc::stats).unwrap_or_default(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SensorSpec {
    pub source_id: String,
    pub topic: String,
    pub channels: Vec<String>,
    pub period_ms: f64,
}

impl SensorSpec {
    fn new(source_id: &str, topic: &str, channels: &[&str], period_ms: f64) -> Self {
        Self {
            source_id: source_id.into(),
            topic: topic.into(),
            channels: channels.iter().map(|c| c.to_string()).collect(),
            period_ms,
        }
    }

    pub fn rate_hz(&self) -> f64 {
        1000.0 / self.period_ms
    }

    fn payload(&self, i: u64) -> Payload {
        let t = i as f64 * self.period_ms / 1000.0;
        Payload::fields(
            self.channels
                .iter()
                .enumerate()
                .map(|(k, c)| (c.as_str(), ((k + 1) as f64 * t).sin() * 10.0 + k as f64)),
        )
    }
}

/// Inertial (6 channels, 250 Hz), distance (1 channel, 30 ms period) and
/// environmental (3 channels, 1 Hz) streams: 284.33 msg/s together.
pub fn standard_node() -> Vec<SensorSpec> {
    vec![
        SensorSpec::new("imu-0", "edge.imu", &["ax", "ay", "az", "gx", "gy", "gz"], 4.0),
        SensorSpec::new("distance-0", "edge.distance", &["distance_mm"], 30.0),
        SensorSpec::new("environment-0", "edge.environment", &["co2_ppm", "temperature_c", "humidity_pct"], 1000.0),
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct SensorResult {
    pub source_id: String,
    pub rate_hz: f64,
    pub sent: u64,
    pub received: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EdgeReport {
    pub duration_s: f64,
    pub nominal_msg_per_s: f64,
    pub sent: u64,
    pub rejected: u64,
    pub received: u64,
    pub lost: u64,
    pub msg_per_s: f64,
    pub mean_msg_bytes: f64,
    pub latency: LatencyStats,
    pub sensors: Vec<SensorResult>,
}

/// Emulates one edge node posting to a loopback server for `duration`;
/// every topic is tailed over SSE and latency is receive time minus the
/// sensor timestamp.
pub async fn edge(sensors: &[SensorSpec], duration: Duration) -> anyhow::Result<EdgeReport> {
    let server = LocalServer::start(bench_config(), "127.0.0.1:0").await?;
    let client = Client::new(server.base_url());
    let token = format!("Bearer {}", server.platform.config.ingest_token);
    let mut sinks = Vec::new();
    let mut consumers = Vec::new();
    for s in sensors {
        server.platform.broker.ensure_topic(&s.topic)?;
        let sink = Arc::new(Mutex::new(Received::default()));
        consumers.push(spawn_sse_consumer(&client, &s.topic, sink.clone()).await?);
        sinks.push(sink);
    }

    let start = tokio::time::Instant::now();
    let deadline = start + duration;
    let producers: Vec<_> = sensors
        .iter()
        .cloned()
        .map(|s| {
            let client = client.clone();
            let token = token.clone();
            tokio::spawn(async move {
                let clock = SystemClock;
                let mut tick = tokio::time::interval_at(start, Duration::from_secs_f64(s.period_ms / 1000.0));
                tick.set_missed_tick_behavior(MissedTickBehavior::Burst);
                let (mut sent, mut rejected) = (0u64, 0u64);
                loop {
                    if tick.tick().await >= deadline {
                        break;
                    }
                    let body = ingest_body(&s.topic, &s.source_id, clock.now_ns(), s.payload(sent));
                    let ok = client
                        .http()
                        .post(client.url("/ingest"))
                        .header("authorization", &token)
                        .json(&body)
                        .send()
                        .await
                        .is_ok_and(|r| r.status().is_success());
                    sent += 1;
                    rejected += u64::from(!ok);
                }
                (sent, rejected, tokio::time::Instant::now())
            })
        })
        .collect();

    let mut results = Vec::new();
    let mut last_done = deadline;
    let (mut sent, mut rejected) = (0, 0);
    for (p, s) in producers.into_iter().zip(sensors) {
        let (n, bad, done) = p.await.context("producer task")?;
        last_done = last_done.max(done);
        sent += n;
        rejected += bad;
        results.push((s, n));
    }
    let elapsed = last_done - start;

    let mut received = 0;
    let mut bytes = 0;
    let mut latency = LatencyAcc::new(1);
    let mut sensor_results = Vec::new();
    for ((s, n), sink) in results.into_iter().zip(&sinks) {
        drain(sink, n, Duration::from_secs(10)).await;
        let mut r = sink.lock();
        received += r.count;
        bytes += r.bytes;
        if let Some(acc) = r.latency.take() {
            latency.count += acc.count;
            latency.sum_ns += acc.sum_ns;
            latency.max_ns = latency.max_ns.max(acc.max_ns);
            latency.sampled.extend(acc.sampled);
        }
        sensor_results.push(SensorResult {
            source_id: s.source_id.clone(),
            rate_hz: s.rate_hz(),
            sent: n,
            received: r.count,
        });
    }
    for c in consumers {
        c.abort();
    }
    server.shutdown().await?;
    Ok(EdgeReport {
        duration_s: elapsed.as_secs_f64(),
        nominal_msg_per_s: sensors.iter().map(SensorSpec::rate_hz).sum(),
        sent,
        rejected,
        received,
        lost: sent.saturating_sub(received),
        msg_per_s: sent as f64 / elapsed.as_secs_f64(),
        mean_msg_bytes: bytes as f64 / received.max(1) as f64,
        latency: latency.stats(),
        sensors: sensor_results,
    })
}

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicI64, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;

use super::envelope::{Payload, SampleEnvelope, TimestampNs, NANOS_PER_SEC};
use super::log::{LogLimits, PartitionLog, StoredRecord};
use super::StreamError;

pub const DEFAULT_RETENTION_NS: i64 = 24 * 3600 * NANOS_PER_SEC;
pub const DEFAULT_RETENTION_BYTES: u64 = 1 << 30;
pub const DEFAULT_SEGMENT_BYTES: u64 = 64 << 20;
pub const DEFAULT_SUBSCRIBER_BUFFER: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicDescriptor {
    pub topic: String,
    #[serde(default = "default_retention_ns")]
    pub retention_window_ns: i64,
    #[serde(default = "default_retention_bytes")]
    pub retention_bytes: u64,
    #[serde(default)]
    pub schema_hint: Option<Vec<String>>,
    #[serde(default = "one")]
    pub partition_count: u32,
}

fn default_retention_ns() -> i64 {
    DEFAULT_RETENTION_NS
}
fn default_retention_bytes() -> u64 {
    DEFAULT_RETENTION_BYTES
}
fn one() -> u32 {
    1
}

impl TopicDescriptor {
    pub fn new(topic: impl Into<String>) -> Self {
        Self {
            topic: topic.into(),
            retention_window_ns: DEFAULT_RETENTION_NS,
            retention_bytes: DEFAULT_RETENTION_BYTES,
            schema_hint: None,
            partition_count: 1,
        }
    }

    pub fn with_partitions(mut self, n: u32) -> Self {
        self.partition_count = n;
        self
    }

    pub fn with_retention(mut self, window_ns: i64, bytes: u64) -> Self {
        self.retention_window_ns = window_ns;
        self.retention_bytes = bytes;
        self
    }

    pub fn with_schema(mut self, fields: &[&str]) -> Self {
        self.schema_hint = Some(fields.iter().map(|s| s.to_string()).collect());
        self
    }

    fn validate(&self) -> Result<(), StreamError> {
        if self.topic.is_empty() || self.topic.contains(['/', '\\']) || self.topic.starts_with('.') {
            return Err(StreamError::InvalidTopic(format!("bad topic name {:?}", self.topic)));
        }
        if self.partition_count < 1 {
            return Err(StreamError::InvalidTopic("partition_count must be >= 1".into()));
        }
        if self.retention_window_ns <= 0 || self.retention_bytes == 0 {
            return Err(StreamError::InvalidTopic("retention must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishAck {
    pub partition: u32,
    pub offset: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CursorMode {
    LiveTail,
    RangeReplay { t0: TimestampNs, t1: TimestampNs },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamCursor {
    pub topic: String,
    pub position: (TimestampNs, u64),
    pub mode: CursorMode,
}

impl StreamCursor {
    pub fn live(topic: impl Into<String>) -> Self {
        Self {
            topic: topic.into(),
            position: (0, 0),
            mode: CursorMode::LiveTail,
        }
    }

    pub fn replay(topic: impl Into<String>, t0: TimestampNs, t1: TimestampNs) -> Self {
        Self {
            topic: topic.into(),
            position: (t0, 0),
            mode: CursorMode::RangeReplay { t0, t1 },
        }
    }
}

/// Result of a time-range query.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RangeQuery {
    pub records: Vec<StoredRecord>,
    /// Part of the requested range has been dropped by retention.
    pub truncated: bool,
    /// The whole requested range lies before the retention floor.
    pub out_of_retention: bool,
}

impl RangeQuery {
    pub fn envelopes(&self) -> impl Iterator<Item = &SampleEnvelope> {
        self.records.iter().map(|r| &r.envelope)
    }
}

/// One item delivered to a live subscriber.
#[derive(Debug, Clone)]
pub enum Delivery {
    Envelope(Arc<SampleEnvelope>),
    /// Terminal: the subscriber fell behind its buffer and was disconnected.
    Lagged,
}

/// Live tail of a topic with a bounded buffer. Overflow disconnects the
/// subscriber; after the buffered items drain it yields [`Delivery::Lagged`].
pub struct LiveSubscription {
    rx: mpsc::Receiver<Arc<SampleEnvelope>>,
    lagged: Arc<AtomicBool>,
    reported: bool,
}

impl LiveSubscription {
    fn on_closed(&mut self) -> Option<Delivery> {
        if self.lagged.load(Ordering::Acquire) && !self.reported {
            self.reported = true;
            Some(Delivery::Lagged)
        } else {
            None
        }
    }

    pub async fn recv(&mut self) -> Option<Delivery> {
        match self.rx.recv().await {
            Some(env) => Some(Delivery::Envelope(env)),
            None => self.on_closed(),
        }
    }

    pub fn blocking_recv(&mut self) -> Option<Delivery> {
        match self.rx.blocking_recv() {
            Some(env) => Some(Delivery::Envelope(env)),
            None => self.on_closed(),
        }
    }

    /// Non-blocking poll; `Ok(None)` means nothing pending yet.
    pub fn try_recv(&mut self) -> Result<Option<Delivery>, ()> {
        match self.rx.try_recv() {
            Ok(env) => Ok(Some(Delivery::Envelope(env))),
            Err(mpsc::error::TryRecvError::Empty) => Ok(None),
            Err(mpsc::error::TryRecvError::Disconnected) => self.on_closed().map(Some).ok_or(()),
        }
    }

    pub fn pending(&self) -> usize {
        self.rx.len()
    }

    pub fn is_lagged(&self) -> bool {
        self.lagged.load(Ordering::Acquire)
    }
}

/// Either a live tail or a finite replay.
pub enum Subscription {
    Live(LiveSubscription),
    Replay {
        records: std::vec::IntoIter<StoredRecord>,
        out_of_retention: bool,
    },
}

impl Subscription {
    pub async fn next(&mut self) -> Option<Delivery> {
        match self {
            Subscription::Live(live) => live.recv().await,
            Subscription::Replay { records, .. } => {
                records.next().map(|r| Delivery::Envelope(Arc::new(r.envelope)))
            }
        }
    }

    pub fn blocking_next(&mut self) -> Option<Delivery> {
        match self {
            Subscription::Live(live) => live.blocking_recv(),
            Subscription::Replay { records, .. } => {
                records.next().map(|r| Delivery::Envelope(Arc::new(r.envelope)))
            }
        }
    }
}

struct SubscriberSlot {
    tx: mpsc::Sender<Arc<SampleEnvelope>>,
    lagged: Arc<AtomicBool>,
}

struct PartitionState {
    log: PartitionLog,
}

struct Topic {
    desc: TopicDescriptor,
    partitions: Vec<Mutex<PartitionState>>,
    subscribers: RwLock<Vec<SubscriberSlot>>,
    newest_ts: AtomicI64,
    published: AtomicU64,
}

impl Topic {
    fn partition_for(&self, source_id: &str) -> usize {
        (fnv1a(source_id.as_bytes()) % self.partitions.len() as u64) as usize
    }

    fn fan_out(&self, env: &Arc<SampleEnvelope>) {
        let mut dead = false;
        {
            let subs = self.subscribers.read();
            for sub in subs.iter() {
                match sub.tx.try_send(Arc::clone(env)) {
                    Ok(()) => {}
                    Err(mpsc::error::TrySendError::Full(_)) => {
                        sub.lagged.store(true, Ordering::Release);
                        dead = true;
                    }
                    Err(mpsc::error::TrySendError::Closed(_)) => dead = true,
                }
            }
        }
        if dead {
            self.subscribers
                .write()
                .retain(|s| !s.tx.is_closed() && !s.lagged.load(Ordering::Acquire));
        }
    }
}

/// Stable across runs and platforms, unlike the std hasher.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    /// `None` keeps logs in memory only.
    pub data_dir: Option<PathBuf>,
    pub segment_bytes: u64,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            segment_bytes: DEFAULT_SEGMENT_BYTES,
        }
    }
}

impl BrokerConfig {
    pub fn persistent(dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: Some(dir.into()),
            ..Self::default()
        }
    }
}

/// Embedded pub/sub broker with per-topic append-only logs.
pub struct Broker {
    config: BrokerConfig,
    topics: RwLock<HashMap<String, Arc<Topic>>>,
}

impl Broker {
    pub fn in_memory() -> Self {
        Self {
            config: BrokerConfig::default(),
            topics: RwLock::new(HashMap::new()),
        }
    }

    /// Opens a broker, recovering every topic found under the data directory.
    pub fn open(config: BrokerConfig) -> Result<Self, StreamError> {
        let broker = Self {
            config,
            topics: RwLock::new(HashMap::new()),
        };
        if let Some(dir) = broker.topics_dir() {
            fs::create_dir_all(&dir)?;
            for entry in fs::read_dir(&dir)? {
                let path = entry?.path();
                let desc_path = path.join("topic.json");
                if desc_path.is_file() {
                    let desc: TopicDescriptor = serde_json::from_slice(&fs::read(&desc_path)?)
                        .map_err(|e| StreamError::Decode(e.to_string()))?;
                    broker.load_topic(desc)?;
                }
            }
        }
        Ok(broker)
    }

    fn topics_dir(&self) -> Option<PathBuf> {
        self.config.data_dir.as_ref().map(|d| d.join("topics"))
    }

    fn load_topic(&self, desc: TopicDescriptor) -> Result<Arc<Topic>, StreamError> {
        let limits = LogLimits {
            segment_bytes: self.config.segment_bytes.min(desc.retention_bytes.max(1)),
            retention_ns: desc.retention_window_ns,
            retention_bytes: desc.retention_bytes,
        };
        let topic_dir = self.topics_dir().map(|d| d.join(&desc.topic));
        let mut partitions = Vec::with_capacity(desc.partition_count as usize);
        let mut newest = TimestampNs::MIN;
        for p in 0..desc.partition_count {
            let dir = topic_dir.as_ref().map(|d| d.join(p.to_string()));
            let log = PartitionLog::open(p, dir, limits)?;
            if let Some(last) = log.newest_ts() {
                newest = newest.max(last);
            }
            partitions.push(Mutex::new(PartitionState { log }));
        }
        let topic = Arc::new(Topic {
            desc: desc.clone(),
            partitions,
            subscribers: RwLock::new(Vec::new()),
            newest_ts: AtomicI64::new(newest),
            published: AtomicU64::new(0),
        });
        self.topics.write().insert(desc.topic.clone(), Arc::clone(&topic));
        Ok(topic)
    }

    /// Creates a topic; repeating with an identical descriptor is a no-op.
    pub fn create_topic(&self, desc: TopicDescriptor) -> Result<(), StreamError> {
        desc.validate()?;
        if let Some(existing) = self.topics.read().get(&desc.topic) {
            return if existing.desc == desc {
                Ok(())
            } else {
                Err(StreamError::InvalidTopic(format!(
                    "topic {} exists with a different descriptor",
                    desc.topic
                )))
            };
        }
        if let Some(dir) = self.topics_dir() {
            let topic_dir = dir.join(&desc.topic);
            fs::create_dir_all(&topic_dir)?;
            let json = serde_json::to_vec_pretty(&desc).expect("descriptor serializes");
            fs::write(topic_dir.join("topic.json"), json)?;
        }
        self.load_topic(desc)?;
        Ok(())
    }

    pub fn ensure_topic(&self, topic: &str) -> Result<(), StreamError> {
        if self.topics.read().contains_key(topic) {
            return Ok(());
        }
        self.create_topic(TopicDescriptor::new(topic))
    }

    pub fn topic(&self, topic: &str) -> Option<TopicDescriptor> {
        self.topics.read().get(topic).map(|t| t.desc.clone())
    }

    pub fn topic_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.topics.read().keys().cloned().collect();
        names.sort();
        names
    }

    fn get(&self, topic: &str) -> Result<Arc<Topic>, StreamError> {
        self.topics
            .read()
            .get(topic)
            .cloned()
            .ok_or_else(|| StreamError::UnknownTopic(topic.to_string()))
    }

    pub fn published_count(&self, topic: &str) -> Result<u64, StreamError> {
        Ok(self.get(topic)?.published.load(Ordering::Relaxed))
    }

    /// Appends an envelope and fans it out to live subscribers.
    pub fn publish(&self, envelope: SampleEnvelope) -> Result<PublishAck, StreamError> {
        self.publish_inner(envelope, false).map(|(_, ack)| ack)
    }

    /// Publishes with a broker-assigned seq (last seq for the source + 1).
    pub fn publish_next(
        &self,
        topic: &str,
        source_id: &str,
        timestamp_ns: TimestampNs,
        payload: Payload,
    ) -> Result<(u64, PublishAck), StreamError> {
        self.publish_inner(SampleEnvelope::new(topic, source_id, 0, timestamp_ns, payload), true)
    }

    fn publish_inner(
        &self,
        mut envelope: SampleEnvelope,
        assign_seq: bool,
    ) -> Result<(u64, PublishAck), StreamError> {
        let topic = self.get(&envelope.topic)?;
        envelope.validate(topic.desc.schema_hint.as_deref())?;
        let p = topic.partition_for(&envelope.source_id);
        let mut part = topic.partitions[p].lock();
        let last = part.log.last_seq.get(&envelope.source_id).copied();
        if assign_seq {
            envelope.seq = last.map_or(1, |s| s + 1);
        } else if let Some(last) = last {
            if envelope.seq <= last {
                return Err(StreamError::SeqRegression {
                    source_id: envelope.source_id,
                    last,
                    got: envelope.seq,
                });
            }
        }
        let ts = envelope.timestamp_ns;
        let newest = topic.newest_ts.fetch_max(ts, Ordering::AcqRel).max(ts);
        let offset = part.log.append(&envelope)?;
        if offset % 4096 == 0 {
            part.log.enforce_retention(Some(newest))?;
        }
        let seq = envelope.seq;
        part.log.last_seq.insert(envelope.source_id.clone(), seq);
        topic.published.fetch_add(1, Ordering::Relaxed);
        // Fan-out under the partition lock keeps per-source delivery order.
        topic.fan_out(&Arc::new(envelope));
        Ok((
            seq,
            PublishAck {
                partition: p as u32,
                offset,
            },
        ))
    }

    pub fn subscribe_live(&self, topic: &str, buffer: usize) -> Result<LiveSubscription, StreamError> {
        let topic = self.get(topic)?;
        let (tx, rx) = mpsc::channel(buffer.max(1));
        let lagged = Arc::new(AtomicBool::new(false));
        topic.subscribers.write().push(SubscriberSlot {
            tx,
            lagged: Arc::clone(&lagged),
        });
        Ok(LiveSubscription {
            rx,
            lagged,
            reported: false,
        })
    }

    pub fn subscribe(&self, cursor: &StreamCursor) -> Result<Subscription, StreamError> {
        match cursor.mode {
            CursorMode::LiveTail => Ok(Subscription::Live(
                self.subscribe_live(&cursor.topic, DEFAULT_SUBSCRIBER_BUFFER)?,
            )),
            CursorMode::RangeReplay { t0, t1 } => {
                let q = self.query_range(&cursor.topic, t0, t1)?;
                Ok(Subscription::Replay {
                    records: q.records.into_iter(),
                    out_of_retention: q.out_of_retention,
                })
            }
        }
    }

    pub fn subscriber_count(&self, topic: &str) -> Result<usize, StreamError> {
        Ok(self.get(topic)?.subscribers.read().len())
    }

    /// Retained envelopes with `t0 <= ts <= t1`, ordered by
    /// `(timestamp, partition, offset)`. Late timestamps therefore appear in
    /// timestamp position, not publish position.
    pub fn query_range(&self, topic: &str, t0: TimestampNs, t1: TimestampNs) -> Result<RangeQuery, StreamError> {
        if t0 > t1 {
            return Err(StreamError::InvalidRange { t0, t1 });
        }
        let topic = self.get(topic)?;
        let mut out = RangeQuery::default();
        for part in &topic.partitions {
            let mut part = part.lock();
            if let Some(floor) = part.log.retention_floor() {
                if t1 < floor {
                    out.out_of_retention = true;
                    out.truncated = true;
                    continue;
                }
                if t0 < floor {
                    out.truncated = true;
                }
            }
            out.records.extend(part.log.scan_range(t0, t1)?);
        }
        if out.out_of_retention && !out.records.is_empty() {
            out.out_of_retention = false;
        }
        out.records.sort_by_key(|r| (r.envelope.timestamp_ns, r.partition, r.offset));
        Ok(out)
    }

    /// Raw persisted bytes of one partition, in offset order.
    pub fn partition_bytes(&self, topic: &str, partition: u32) -> Result<Vec<u8>, StreamError> {
        let topic = self.get(topic)?;
        let part = topic
            .partitions
            .get(partition as usize)
            .ok_or_else(|| StreamError::InvalidTopic(format!("no partition {partition}")))?;
        let bytes = part.lock().log.raw_bytes();
        bytes
    }

    pub fn enforce_retention(&self) -> Result<usize, StreamError> {
        let topics: Vec<Arc<Topic>> = self.topics.read().values().cloned().collect();
        let mut dropped = 0;
        for topic in topics {
            let newest = topic.newest_ts.load(Ordering::Acquire);
            for part in &topic.partitions {
                dropped += part.lock().log.enforce_retention(Some(newest))?;
            }
        }
        Ok(dropped)
    }

    pub fn flush(&self) -> Result<(), StreamError> {
        let topics: Vec<Arc<Topic>> = self.topics.read().values().cloned().collect();
        for topic in topics {
            for part in &topic.partitions {
                part.lock().log.flush()?;
            }
        }
        Ok(())
    }
}

impl Drop for Broker {
    fn drop(&mut self) {
        if let Err(e) = self.flush() {
            tracing::error!(error = %e, "flushing broker on drop");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fields(v: f64) -> Payload {
        Payload::fields([("watts", v)])
    }

    #[test]
    fn first_message_gets_offset_zero() {
        let broker = Broker::in_memory();
        broker.create_topic(TopicDescriptor::new("power.printer1")).unwrap();
        let ack = broker
            .publish(SampleEnvelope::new("power.printer1", "m1", 1, 1, fields(3.2)))
            .unwrap();
        assert_eq!(ack.offset, 0);
    }

    #[test]
    fn seq_regression_rejected() {
        let broker = Broker::in_memory();
        broker.create_topic(TopicDescriptor::new("t")).unwrap();
        broker.publish(SampleEnvelope::new("t", "s", 5, 1, fields(0.0))).unwrap();
        let err = broker
            .publish(SampleEnvelope::new("t", "s", 4, 2, fields(0.0)))
            .unwrap_err();
        assert!(matches!(err, StreamError::SeqRegression { last: 5, got: 4, .. }));
        // Other sources are independent.
        broker.publish(SampleEnvelope::new("t", "other", 1, 2, fields(0.0))).unwrap();
    }

    #[test]
    fn unknown_topic_and_bad_range() {
        let broker = Broker::in_memory();
        assert!(matches!(
            broker.publish(SampleEnvelope::new("nope", "s", 1, 1, fields(0.0))),
            Err(StreamError::UnknownTopic(_))
        ));
        broker.create_topic(TopicDescriptor::new("t")).unwrap();
        assert!(matches!(
            broker.query_range("t", 5, 4),
            Err(StreamError::InvalidRange { .. })
        ));
        assert!(broker.query_range("t", 0, 10).unwrap().records.is_empty());
    }

    #[test]
    fn create_topic_idempotent_but_conflicting_rejected() {
        let broker = Broker::in_memory();
        broker.create_topic(TopicDescriptor::new("t")).unwrap();
        broker.create_topic(TopicDescriptor::new("t")).unwrap();
        assert!(broker
            .create_topic(TopicDescriptor::new("t").with_partitions(3))
            .is_err());
        assert!(broker
            .create_topic(TopicDescriptor::new("x").with_partitions(0))
            .is_err());
    }

    #[test]
    fn replay_returns_range_in_order() {
        let broker = Broker::in_memory();
        broker.create_topic(TopicDescriptor::new("t")).unwrap();
        for i in 1..=10u64 {
            broker
                .publish(SampleEnvelope::new("t", "s", i, i as i64 * 100, fields(i as f64)))
                .unwrap();
        }
        let mut sub = broker.subscribe(&StreamCursor::replay("t", 300, 600)).unwrap();
        let mut seqs = Vec::new();
        while let Some(Delivery::Envelope(env)) = sub.blocking_next() {
            seqs.push(env.seq);
        }
        assert_eq!(seqs, vec![3, 4, 5, 6]);
    }

    #[test]
    fn live_tail_blocks_until_publish() {
        let broker = Arc::new(Broker::in_memory());
        broker.create_topic(TopicDescriptor::new("t")).unwrap();
        let mut sub = broker.subscribe(&StreamCursor::live("t")).unwrap();
        let b = Arc::clone(&broker);
        let handle = std::thread::spawn(move || {
            std::thread::sleep(std::time::Duration::from_millis(50));
            b.publish(SampleEnvelope::new("t", "s", 1, 7, fields(1.0))).unwrap();
        });
        match sub.blocking_next() {
            Some(Delivery::Envelope(env)) => assert_eq!(env.timestamp_ns, 7),
            other => panic!("unexpected {other:?}"),
        }
        handle.join().unwrap();
    }

    #[test]
    fn overflow_disconnects_with_lagged_after_buffer() {
        let broker = Broker::in_memory();
        broker.create_topic(TopicDescriptor::new("t")).unwrap();
        let mut sub = broker.subscribe_live("t", 1000).unwrap();
        for i in 1..=1001u64 {
            broker
                .publish(SampleEnvelope::new("t", "s", i, i as i64, fields(0.0)))
                .unwrap();
        }
        assert!(sub.is_lagged());
        assert_eq!(broker.subscriber_count("t").unwrap(), 0);
        let mut got = 0;
        loop {
            match sub.blocking_recv() {
                Some(Delivery::Envelope(_)) => got += 1,
                Some(Delivery::Lagged) => break,
                None => panic!("lagged event missing"),
            }
        }
        assert_eq!(got, 1000);
        assert!(sub.blocking_recv().is_none());
    }

    #[test]
    fn partition_by_source_hash_is_stable() {
        let broker = Broker::in_memory();
        broker
            .create_topic(TopicDescriptor::new("t").with_partitions(4))
            .unwrap();
        let a1 = broker.publish(SampleEnvelope::new("t", "imu", 1, 1, fields(0.0))).unwrap();
        let a2 = broker.publish(SampleEnvelope::new("t", "imu", 2, 2, fields(0.0))).unwrap();
        assert_eq!(a1.partition, a2.partition);
        assert_eq!(a2.offset, a1.offset + 1);
        assert_eq!(fnv1a(b"imu") % 4, a1.partition as u64);
    }

    #[test]
    fn time_retention_flags_truncation() {
        let mut config = BrokerConfig::default();
        config.segment_bytes = 400;
        let broker = Broker::open(config).unwrap();
        broker
            .create_topic(TopicDescriptor::new("t").with_retention(1_000, u64::MAX))
            .unwrap();
        for i in 1..=100u64 {
            broker
                .publish(SampleEnvelope::new("t", "s", i, i as i64 * 100, fields(0.0)))
                .unwrap();
        }
        broker.enforce_retention().unwrap();
        let all = broker.query_range("t", 0, i64::MAX).unwrap();
        assert!(all.truncated);
        assert!(all.records.first().unwrap().envelope.timestamp_ns > 100);
        let old = broker.query_range("t", 0, 150).unwrap();
        assert!(old.out_of_retention);
        assert!(old.records.is_empty());
        let recent = broker.query_range("t", 9_500, 10_000).unwrap();
        assert!(!recent.truncated);
        assert_eq!(recent.records.len(), 6);
    }
}

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::broker::Broker;
use super::envelope::{Payload, TimestampNs, NANOS_PER_SEC};
use super::StreamError;
use crate::clock::Clock;

pub const DEDUPE_WINDOW_NS: i64 = 60 * NANOS_PER_SEC;

/// Body of an external POST.
#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct IngestRequest {
    pub topic: String,
    pub source_id: String,
    #[serde(default, alias = "ts_ns")]
    pub timestamp_ns: Option<TimestampNs>,
    #[serde(default)]
    pub client_msg_id: Option<String>,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestAck {
    pub seq: u64,
    pub partition: u32,
    pub offset: u64,
    pub server_timestamped: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("missing or invalid bearer token")]
    Unauthorized,
    #[error("malformed body: {0}")]
    Malformed(String),
    #[error("unknown topic {0}")]
    UnknownTopic(String),
    #[error("duplicate message {client_msg_id} from {source_id}")]
    Duplicate {
        source_id: String,
        client_msg_id: String,
    },
    #[error(transparent)]
    Stream(StreamError),
}

impl IngestError {
    pub fn http_status(&self) -> u16 {
        match self {
            IngestError::Unauthorized => 401,
            IngestError::Malformed(_) => 400,
            IngestError::UnknownTopic(_) => 404,
            IngestError::Duplicate { .. } => 409,
            IngestError::Stream(_) => 500,
        }
    }
}

#[derive(Default)]
struct DedupeWindow {
    seen: HashMap<(String, String), TimestampNs>,
    order: VecDeque<(TimestampNs, (String, String))>,
}

impl DedupeWindow {
    fn expire(&mut self, now: TimestampNs) {
        while let Some((at, _)) = self.order.front() {
            if *at > now - DEDUPE_WINDOW_NS {
                break;
            }
            let (at, key) = self.order.pop_front().expect("front");
            if self.seen.get(&key) == Some(&at) {
                self.seen.remove(&key);
            }
        }
    }
}

/// Accepts JSON posts from external applications and publishes them.
pub struct ExternalReceiver {
    broker: Arc<Broker>,
    clock: Arc<dyn Clock>,
    token: String,
    dedupe: Mutex<DedupeWindow>,
}

impl ExternalReceiver {
    pub fn new(broker: Arc<Broker>, clock: Arc<dyn Clock>, token: impl Into<String>) -> Self {
        Self {
            broker,
            clock,
            token: token.into(),
            dedupe: Mutex::new(DedupeWindow::default()),
        }
    }

    pub fn authorize(&self, authorization: Option<&str>) -> Result<(), IngestError> {
        match authorization.and_then(|h| h.strip_prefix("Bearer ")) {
            Some(t) if t == self.token => Ok(()),
            _ => Err(IngestError::Unauthorized),
        }
    }

    /// Full ingest path: auth header check, body parse, normalize, publish.
    pub fn receive(&self, authorization: Option<&str>, body: &[u8]) -> Result<IngestAck, IngestError> {
        self.authorize(authorization)?;
        let req: IngestRequest =
            serde_json::from_slice(body).map_err(|e| IngestError::Malformed(e.to_string()))?;
        self.ingest(req)
    }

    pub fn ingest(&self, req: IngestRequest) -> Result<IngestAck, IngestError> {
        if req.source_id.is_empty() {
            return Err(IngestError::Malformed("empty source_id".into()));
        }
        if self.broker.topic(&req.topic).is_none() {
            return Err(IngestError::UnknownTopic(req.topic));
        }
        let now = self.clock.now_ns();
        let (timestamp_ns, server_timestamped) = match req.timestamp_ns {
            Some(ts) => (ts, false),
            None => (now, true),
        };
        // Held across publish so concurrent duplicates cannot both pass.
        let mut dedupe = self.dedupe.lock();
        dedupe.expire(now);
        let key = req
            .client_msg_id
            .as_ref()
            .map(|id| (req.source_id.clone(), id.clone()));
        if let Some(key) = &key {
            if dedupe.seen.contains_key(key) {
                return Err(IngestError::Duplicate {
                    source_id: key.0.clone(),
                    client_msg_id: key.1.clone(),
                });
            }
        }
        let (seq, ack) = self
            .broker
            .publish_next(&req.topic, &req.source_id, timestamp_ns, req.payload)
            .map_err(|e| match e {
                StreamError::InvalidPayload(m) => IngestError::Malformed(m),
                StreamError::UnknownTopic(t) => IngestError::UnknownTopic(t),
                other => IngestError::Stream(other),
            })?;
        if let Some(key) = key {
            dedupe.seen.insert(key.clone(), now);
            dedupe.order.push_back((now, key));
        }
        Ok(IngestAck {
            seq,
            partition: ack.partition,
            offset: ack.offset,
            server_timestamped,
        })
    }
}

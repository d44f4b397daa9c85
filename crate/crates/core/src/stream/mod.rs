//! Embedded streaming layer: broker, persistence, external ingest and the
//! service registry.

mod broker;
mod envelope;
mod log;
mod receiver;
mod registry;

pub use broker::{
    Broker, BrokerConfig, CursorMode, Delivery, LiveSubscription, PublishAck, RangeQuery, StreamCursor,
    Subscription, TopicDescriptor, DEFAULT_RETENTION_BYTES, DEFAULT_RETENTION_NS, DEFAULT_SUBSCRIBER_BUFFER,
};
pub use envelope::{ns_to_secs, secs_to_ns, Payload, SampleEnvelope, TimestampNs, NANOS_PER_SEC};
pub use log::StoredRecord;
pub use receiver::{ExternalReceiver, IngestAck, IngestError, IngestRequest, DEDUPE_WINDOW_NS};
pub use registry::{
    ControlCommand, ControlState, DataGen, GeneratedSample, LayerKind, RegistryError, ServiceDescriptor,
    ServiceRegistry,
};

#[derive(Debug, thiserror::Error)]
pub enum StreamError {
    #[error("unknown topic {0}")]
    UnknownTopic(String),
    #[error("invalid topic: {0}")]
    InvalidTopic(String),
    #[error("seq regression for source {source_id}: last {last}, got {got}")]
    SeqRegression { source_id: String, last: u64, got: u64 },
    #[error("invalid payload: {0}")]
    InvalidPayload(String),
    #[error("invalid range: t0 {t0} > t1 {t1}")]
    InvalidRange { t0: TimestampNs, t1: TimestampNs },
    #[error("decode error: {0}")]
    Decode(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

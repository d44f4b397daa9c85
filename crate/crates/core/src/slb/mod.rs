//! Self-labeling workflows.
//!
//! A workflow binds a cause node to one or more effect nodes through a truth
//! table. Effect events detected on the effect side are cached in a FIFO and
//! periodically mapped to cause states; each resolved tuple is sent to an
//! interaction time model, and the resulting lag positions a labeled window on
//! the cause stream.

mod engine;
mod matcher;
mod store;
mod types;
mod window;

pub use engine::{negative_event, SlbEngine, WorkflowStats, WorkflowSummary};
pub use matcher::{CachedEvent, EnqueueOutcome, WorkflowCore};
pub use store::{LabelStore, RecordSink, SinkError};
pub use types::{
    CauseResolution, EffectEvent, FeatureRef, ItmError, InteractionTimeModel, LabeledSegment, Polarity,
    RecordPolarity, SegmentSink, SelfLabelRecord, TauAggregation, WorkflowSpec,
};
pub use window::{compute_cause_window, CauseWindow};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SlbError {
    #[error("invalid workflow spec: {0}")]
    InvalidSpec(String),
    #[error("workflow {0} already exists")]
    DuplicateWorkflow(String),
    #[error("unknown workflow {0}")]
    UnknownWorkflow(String),
    #[error("workflow {0} is not running")]
    NotRunning(String),
    #[error("truth table {0} not found")]
    MissingTable(String),
    #[error("interaction time model {0} not registered")]
    UnknownItm(String),
    #[error("event from node {0} not in workflow effect nodes")]
    UnknownNode(String),
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error("record rejected: {0}")]
    InvalidRecord(String),
    #[error("invalid window: {0}")]
    InvalidWindow(String),
    #[error("mode 2 disabled for workflow {0}")]
    Mode2Disabled(String),
    #[error("stream error: {0}")]
    Stream(String),
}

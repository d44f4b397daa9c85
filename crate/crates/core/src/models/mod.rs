//! Pluggable models: effect state detector, interaction time model, the
//! trainable task model, and the self-labeling trainer around them.

mod artifacts;
mod dataset;
mod deploy;
mod esd;
mod features;
mod itm;
mod task;
mod trainer;

pub use artifacts::ArtifactStore;
pub use dataset::{sample_hash, version_dataset, Dataset, DatasetVersion};
pub use deploy::{DeploymentEvent, DeploymentKind, ModelRegistry, Prediction};
pub use esd::{esd_detect, EsdConfig, StepDetector};
pub use features::{pool_features, LabeledSample, Provenance, SampleStore, SplitTag};
pub use itm::{GaussianItm, ItmLookupEntry};
pub use task::{loss_and_grad, task_train, LinearModel, TrainParams, TrainReport};
pub use trainer::{DatasetScope, Trainer, TrainerAction, TrainerPolicy, TrainerStatus};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid features: {0}")]
    InvalidFeatures(String),
    #[error("feature length {got}, model expects {want}")]
    FeatureLength { got: usize, want: usize },
    #[error("dataset has a single label ({0})")]
    SingleLabel(String),
    #[error("label {label} has {count} samples, need {min}")]
    TooFewSamples { label: String, count: usize, min: usize },
    #[error("unknown model {0}")]
    UnknownModel(String),
    #[error("model {0} has no deployed weights")]
    NotDeployed(String),
    #[error("unknown weights {0}")]
    UnknownWeights(String),
    #[error("unknown dataset version {0}")]
    UnknownDataset(String),
    #[error("artifact io: {0}")]
    Io(String),
}

//! Causality-driven self-labeling platform for streaming sensor data.
//!
//! The crate is organised by subsystem:
//!
//! - [`stream`]: embedded pub/sub broker with append-only persistence,
//!   external ingest and the service registry.
//! - [`kg`]: causal knowledge graphs and the truth tables relating effect
//!   states to cause states.
//! - [`slb`]: self-labeling workflows that turn effect detections into
//!   labeled cause windows.
//! - [`models`]: effect state detector, interaction time model, task model,
//!   dataset versioning, deployment and the retraining trainer.
//! - [`sim`]: synthetic factory with ground truth and evaluation metrics.
//! - [`api`]: HTTP surface over all of the above.

pub mod api;
pub mod clock;
pub mod kg;
pub mod models;
pub mod pipeline;
pub mod platform;
pub mod sim;
pub mod slb;
pub mod stream;

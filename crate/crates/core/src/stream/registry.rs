//! Service registry for the unit service model.
//!
//! A service is described by its layer kind, the topics it reads and writes,
//! and free-form metadata (location, machine, vendor, endpoint URL). Data
//! generating services can have a [`DataGen`] attached; starting the service
//! spawns a thread that polls it and publishes each sample under the
//! service id as source.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use super::broker::Broker;
use super::envelope::{Payload, TimestampNs};
use crate::clock::Clock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    EdgeSensor,
    ExternalReceiver,
    MlService,
    SlbService,
}

impl LayerKind {
    pub fn generates_data(self) -> bool {
        matches!(self, LayerKind::EdgeSensor | LayerKind::ExternalReceiver)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlState {
    Registered,
    Running,
    Stopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlCommand {
    Start,
    Stop,
    Update,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceDescriptor {
    pub service_id: String,
    pub layer_kind: LayerKind,
    #[serde(default)]
    pub input_topics: Vec<String>,
    #[serde(default)]
    pub output_topics: Vec<String>,
    #[serde(default = "registered")]
    pub control_state: ControlState,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

fn registered() -> ControlState {
    ControlState::Registered
}

impl ServiceDescriptor {
    pub fn new(service_id: impl Into<String>, layer_kind: LayerKind) -> Self {
        Self {
            service_id: service_id.into(),
            layer_kind,
            input_topics: Vec::new(),
            output_topics: Vec::new(),
            control_state: ControlState::Registered,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_outputs(mut self, topics: &[&str]) -> Self {
        self.output_topics = topics.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_inputs(mut self, topics: &[&str]) -> Self {
        self.input_topics = topics.iter().map(|s| s.to_string()).collect();
        self
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RegistryError {
    #[error("invalid descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("service {0} already registered")]
    AlreadyRegistered(String),
    #[error("unknown service {0}")]
    UnknownService(String),
    #[error("illegal transition: {command:?} from {from:?}")]
    IllegalTransition {
        from: ControlState,
        command: ControlCommand,
    },
}

/// One sample produced by a data-generation layer.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub topic: String,
    pub timestamp_ns: TimestampNs,
    pub payload: Payload,
}

/// Data generation layer: turns asset-layer readings into samples.
pub trait DataGen: Send {
    /// Samples due at `now_ns`.
    fn poll(&mut self, now_ns: TimestampNs) -> Vec<GeneratedSample>;
    /// How often the host should poll.
    fn period(&self) -> Duration;
}

struct Runner {
    stop: Arc<AtomicBool>,
    handle: JoinHandle<()>,
}

struct Entry {
    descriptor: ServiceDescriptor,
    generator: Option<Arc<Mutex<Box<dyn DataGen>>>>,
    runner: Option<Runner>,
}

pub struct ServiceRegistry {
    broker: Arc<Broker>,
    clock: Arc<dyn Clock>,
    services: RwLock<BTreeMap<String, Entry>>,
}

impl ServiceRegistry {
    pub fn new(broker: Arc<Broker>, clock: Arc<dyn Clock>) -> Self {
        Self {
            broker,
            clock,
            services: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn register(&self, mut descriptor: ServiceDescriptor) -> Result<String, RegistryError> {
        if descriptor.service_id.is_empty() {
            return Err(RegistryError::InvalidDescriptor("empty service_id".into()));
        }
        if descriptor.layer_kind.generates_data() && descriptor.output_topics.is_empty() {
            return Err(RegistryError::InvalidDescriptor(
                "data-generating services need at least one output topic".into(),
            ));
        }
        let mut services = self.services.write();
        if services.contains_key(&descriptor.service_id) {
            return Err(RegistryError::AlreadyRegistered(descriptor.service_id));
        }
        descriptor.control_state = ControlState::Registered;
        let id = descriptor.service_id.clone();
        services.insert(
            id.clone(),
            Entry {
                descriptor,
                generator: None,
                runner: None,
            },
        );
        Ok(id)
    }

    pub fn attach_generator(&self, service_id: &str, generator: Box<dyn DataGen>) -> Result<(), RegistryError> {
        let mut services = self.services.write();
        let entry = services
            .get_mut(service_id)
            .ok_or_else(|| RegistryError::UnknownService(service_id.to_string()))?;
        entry.generator = Some(Arc::new(Mutex::new(generator)));
        Ok(())
    }

    pub fn get(&self, service_id: &str) -> Option<ServiceDescriptor> {
        self.services.read().get(service_id).map(|e| e.descriptor.clone())
    }

    pub fn list(&self) -> Vec<ServiceDescriptor> {
        self.services.read().values().map(|e| e.descriptor.clone()).collect()
    }

    pub fn control(
        &self,
        service_id: &str,
        command: ControlCommand,
        metadata: Option<BTreeMap<String, String>>,
    ) -> Result<ControlState, RegistryError> {
        let mut services = self.services.write();
        let entry = services
            .get_mut(service_id)
            .ok_or_else(|| RegistryError::UnknownService(service_id.to_string()))?;
        let from = entry.descriptor.control_state;
        let next = match (from, command) {
            (ControlState::Registered | ControlState::Stopped, ControlCommand::Start) => ControlState::Running,
            (ControlState::Running, ControlCommand::Stop) => ControlState::Stopped,
            (state, ControlCommand::Update) => {
                if let Some(metadata) = metadata {
                    entry.descriptor.metadata = metadata;
                }
                state
            }
            _ => return Err(RegistryError::IllegalTransition { from, command }),
        };
        match command {
            ControlCommand::Start => {
                if let Some(generator) = &entry.generator {
                    entry.runner = Some(self.spawn_runner(service_id, Arc::clone(generator)));
                }
            }
            ControlCommand::Stop => {
                if let Some(runner) = entry.runner.take() {
                    runner.stop.store(true, Ordering::Release);
                    let _ = runner.handle.join();
                }
            }
            ControlCommand::Update => {}
        }
        entry.descriptor.control_state = next;
        Ok(next)
    }

    fn spawn_runner(&self, service_id: &str, generator: Arc<Mutex<Box<dyn DataGen>>>) -> Runner {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let broker = Arc::clone(&self.broker);
        let clock = Arc::clone(&self.clock);
        let source = service_id.to_string();
        let handle = std::thread::Builder::new()
            .name(format!("datagen-{service_id}"))
            .spawn(move || {
                let period = generator.lock().period();
                while !flag.load(Ordering::Acquire) {
                    let samples = generator.lock().poll(clock.now_ns());
                    for s in samples {
                        if let Err(e) = broker.publish_next(&s.topic, &source, s.timestamp_ns, s.payload) {
                            tracing::warn!(service = %source, error = %e, "datagen publish failed");
                        }
                    }
                    std::thread::sleep(period);
                }
            })
            .expect("spawn datagen thread");
        Runner { stop, handle }
    }

    /// Stops every running generator thread.
    pub fn shutdown(&self) {
        let mut services = self.services.write();
        for entry in services.values_mut() {
            if let Some(runner) = entry.runner.take() {
                runner.stop.store(true, Ordering::Release);
                let _ = runner.handle.join();
                entry.descriptor.control_state = ControlState::Stopped;
            }
        }
    }
}

impl Drop for ServiceRegistry {
    fn drop(&mut self) {
        self.shutdown();
    }
}

//! Wires every subsystem into one process-level handle.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::runtime::Handle;
use tokio::task::JoinHandle;

use crate::clock::{Clock, SystemClock};
use crate::kg::KgStore;
use crate::models::{
    ArtifactStore, EsdConfig, GaussianItm, ItmLookupEntry, ModelRegistry, SampleStore, StepDetector, TrainParams,
    Trainer, TrainerPolicy,
};
use crate::slb::{LabelStore, SlbEngine};
use crate::stream::{
    secs_to_ns, Broker, BrokerConfig, Delivery, ExternalReceiver, Payload, ServiceRegistry, TopicDescriptor,
};

pub const DATA_DIR_ENV: &str = "ADAPTLOOP_DATA_DIR";

#[derive(Debug, thiserror::Error)]
pub enum PlatformError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Startup(String),
}

fn startup(e: impl std::fmt::Display) -> PlatformError {
    PlatformError::Startup(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItmConfig {
    #[serde(default)]
    pub entries: Vec<ItmLookupEntry>,
    #[serde(default)]
    pub default_tau_s: Option<f64>,
}

/// An effect state detector running as a service: reads `esd.input_topic`,
/// publishes effect events to `output_topic`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub esd: EsdConfig,
    pub output_topic: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlatformConfig {
    /// Falls back to `ADAPTLOOP_DATA_DIR`; in-memory when neither is set.
    pub data_dir: Option<PathBuf>,
    pub listen: String,
    pub ingest_token: String,
    pub topics: Vec<TopicDescriptor>,
    pub itms: BTreeMap<String, ItmConfig>,
    pub detectors: Vec<DetectorConfig>,
    pub task_model_id: String,
    pub trainer_policy: TrainerPolicy,
    pub train_params: TrainParams,
    /// Trainer poll period; 0 disables the background poller.
    pub trainer_period_s: f64,
    pub control_topic: String,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        let mut itms = BTreeMap::new();
        itms.insert(
            "gaussian".to_string(),
            ItmConfig {
                entries: vec![ItmLookupEntry {
                    key: "interaction".into(),
                    mu_ns: secs_to_ns(2.5),
                    sigma_ns: secs_to_ns(0.3),
                }],
                default_tau_s: None,
            },
        );
        Self {
            data_dir: None,
            listen: "127.0.0.1:8080".into(),
            ingest_token: "adaptloop".into(),
            topics: Vec::new(),
            itms,
            detectors: Vec::new(),
            task_model_id: "task".into(),
            trainer_policy: TrainerPolicy::default(),
            train_params: TrainParams::default(),
            trainer_period_s: 60.0,
            control_topic: "control.deployments".into(),
        }
    }
}

impl PlatformConfig {
    pub fn load(path: &Path) -> Result<Self, PlatformError> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| PlatformError::Config(format!("{}: {e}", path.display())))
    }

    /// Explicit setting, else the environment variable.
    pub fn resolved_data_dir(&self) -> Option<PathBuf> {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
    }
}

pub struct Platform {
    pub config: PlatformConfig,
    pub data_dir: Option<PathBuf>,
    pub clock: Arc<dyn Clock>,
    pub broker: Arc<Broker>,
    pub receiver: Arc<ExternalReceiver>,
    pub services: Arc<ServiceRegistry>,
    pub kg: Arc<KgStore>,
    pub labels: Arc<LabelStore>,
    pub engine: Arc<SlbEngine>,
    pub samples: Arc<SampleStore>,
    pub registry: Arc<ModelRegistry>,
    pub trainer: Arc<Trainer>,
    tasks: parking_lot::Mutex<Vec<JoinHandle<()>>>,
}

impl Platform {
    /// Builds the platform. With a runtime handle, workflows follow their
    /// topics live and detectors and the trainer run in the background.
    pub fn open(config: PlatformConfig, runtime: Option<Handle>) -> Result<Arc<Self>, PlatformError> {
        Self::open_with_clock(config, runtime, Arc::new(SystemClock))
    }

    pub fn open_with_clock(
        config: PlatformConfig,
        runtime: Option<Handle>,
        clock: Arc<dyn Clock>,
    ) -> Result<Arc<Self>, PlatformError> {
        let data_dir = config.resolved_data_dir();
        if let Some(dir) = &data_dir {
            std::fs::create_dir_all(dir)?;
        }
        let broker = Arc::new(match &data_dir {
            Some(dir) => Broker::open(BrokerConfig::persistent(dir)).map_err(startup)?,
            None => Broker::in_memory(),
        });
        for desc in &config.topics {
            broker.create_topic(desc.clone()).map_err(startup)?;
        }
        let kg = Arc::new(match &data_dir {
            Some(dir) => KgStore::open(dir.join("kg.json")).map_err(startup)?,
            None => KgStore::new(),
        });
        let labels = Arc::new(match &data_dir {
            Some(dir) => LabelStore::open(dir.join("labels.jsonl"))?,
            None => LabelStore::new(),
        });
        let artifacts = Arc::new(match &data_dir {
            Some(dir) => ArtifactStore::open(dir.join("artifacts")).map_err(startup)?,
            None => ArtifactStore::in_memory(),
        });

        let mut engine = SlbEngine::new(kg.clone(), broker.clone(), clock.clone(), labels.clone());
        if let Some(rt) = &runtime {
            engine = engine.with_runtime(rt.clone());
        }
        let engine = Arc::new(engine);
        for (name, itm) in &config.itms {
            let mut model = GaussianItm::new(itm.entries.clone()).map_err(|e| PlatformError::Config(e.to_string()))?;
            if let Some(d) = itm.default_tau_s {
                model = model.with_default(secs_to_ns(d));
            }
            engine.register_itm(name.clone(), Arc::new(model));
        }
        let samples = Arc::new(SampleStore::new());
        engine.set_segment_sink(samples.clone());

        broker.ensure_topic(&config.control_topic).map_err(startup)?;
        let registry = Arc::new(
            ModelRegistry::new(artifacts, clock.clone()).with_control_topic(broker.clone(), config.control_topic.clone()),
        );
        let trainer = Arc::new(Trainer::new(
            config.task_model_id.clone(),
            samples.clone(),
            registry.clone(),
            clock.clone(),
            config.trainer_policy.clone(),
            config.train_params.clone(),
        ));
        let receiver = Arc::new(ExternalReceiver::new(broker.clone(), clock.clone(), config.ingest_token.clone()));
        let services = Arc::new(ServiceRegistry::new(broker.clone(), clock.clone()));

        let platform = Arc::new(Self {
            data_dir,
            clock,
            broker,
            receiver,
            services,
            kg,
            labels,
            engine,
            samples,
            registry,
            trainer,
            tasks: parking_lot::Mutex::new(Vec::new()),
            config,
        });
        if let Some(rt) = runtime {
            platform.spawn_background(&rt)?;
        }
        Ok(platform)
    }

    fn spawn_background(&self, rt: &Handle) -> Result<(), PlatformError> {
        let mut tasks = self.tasks.lock();
        for det in &self.config.detectors {
            let detector = StepDetector::new(det.esd.clone()).map_err(|e| PlatformError::Config(e.to_string()))?;
            self.broker.ensure_topic(&det.esd.input_topic).map_err(startup)?;
            self.broker.ensure_topic(&det.output_topic).map_err(startup)?;
            let sub = self.broker.subscribe_live(&det.esd.input_topic, 4096).map_err(startup)?;
            tasks.push(rt.spawn(run_detector(
                detector,
                sub,
                self.broker.clone(),
                det.output_topic.clone(),
                format!("esd-{}", det.esd.node_id),
            )));
        }
        if self.config.trainer_period_s > 0.0 {
            let trainer = self.trainer.clone();
            let period = Duration::from_secs_f64(self.config.trainer_period_s);
            tasks.push(rt.spawn(async move {
                let mut tick = tokio::time::interval(period);
                tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
                loop {
                    tick.tick().await;
                    let t = trainer.clone();
                    let action = tokio::task::spawn_blocking(move || t.poll()).await;
                    if let Ok(action) = action {
                        tracing::debug!(?action, "trainer poll");
                    }
                }
            }));
        }
        Ok(())
    }

    /// Stops background tasks, running workflows and services; flushes logs.
    pub fn shutdown(&self) {
        for t in self.tasks.lock().drain(..) {
            t.abort();
        }
        for w in self.engine.list() {
            if w.running {
                let _ = self.engine.stop(&w.workflow_id);
            }
        }
        self.services.shutdown();
        if let Err(e) = self.broker.flush() {
            tracing::warn!(error = %e, "flush on shutdown failed");
        }
    }
}

async fn run_detector(
    mut detector: StepDetector,
    mut sub: crate::stream::LiveSubscription,
    broker: Arc<Broker>,
    output_topic: String,
    source_id: String,
) {
    while let Some(d) = sub.recv().await {
        let Delivery::Envelope(env) = d else {
            tracing::warn!(%output_topic, "detector input lagged; stopping");
            return;
        };
        let mut events = detector.push_envelope(&env);
        events.extend(detector.sample_negative(env.timestamp_ns));
        for ev in events {
            let ts = ev.transition_ts_ns;
            if let Err(e) = broker.publish_next(&output_topic, &source_id, ts, Payload::json(&ev)) {
                tracing::warn!(error = %e, "publishing effect event failed");
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrip_and_defaults() {
        let cfg: PlatformConfig = serde_json::from_str(r#"{"listen":"0.0.0.0:9000"}"#).unwrap();
        assert_eq!(cfg.listen, "0.0.0.0:9000");
        assert_eq!(cfg.trainer_policy.min_new_samples, 100);
        assert!(cfg.itms.contains_key("gaussian"));
        let back: PlatformConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn persistent_layout() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PlatformConfig {
            data_dir: Some(dir.path().to_path_buf()),
            topics: vec![TopicDescriptor::new("a.b")],
            ..Default::default()
        };
        let p = Platform::open(cfg.clone(), None).unwrap();
        p.broker
            .publish(crate::stream::SampleEnvelope::new("a.b", "s", 1, 5, Payload::fields([("x", 1.0)])))
            .unwrap();
        p.shutdown();
        drop(p);
        let p = Platform::open(cfg, None).unwrap();
        assert_eq!(p.broker.query_range("a.b", 0, 10).unwrap().records.len(), 1);
        assert!(dir.path().join("artifacts").is_dir());
    }
}

//! Declarative pipeline description and its translation into an [`Engine`].
//!
//! ```json
//! {
//!   "stores": [{"key": "photo-raw", "capacity": 16}],
//!   "providers": [{"key": "camera", "kind": "camera", "output_store": "photo-raw"}],
//!   "triggers": [{"store": "photo-raw", "start_provider": "to-bitmap"}],
//!   "choosers": [],
//!   "runtime": {"worker_count": 4}
//! }
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use gateway_core::backends::{
    AnekaProvider, BackendEndpointConfig, BackendError, BatchSource, EdgeLensProvider,
    FogBusProvider, LocalProvider, Transform, TransformError,
};
use gateway_core::engine::{InputSpec, ProviderBody, ProviderDescriptor, TriggerAction};
use gateway_core::sources::{BitmapProvider, CameraProvider, OximeterProvider, SourceError, StreamProfile};
use gateway_core::engine::DEFAULT_STORE_CAPACITY;
use gateway_core::{ChooserPolicy, Engine, EngineError, RuntimeConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("{what} {key:?} does not exist")]
    UnknownReference { what: &'static str, key: String },
    #[error("duplicate {what} {key:?}")]
    Duplicate { what: &'static str, key: String },
    #[error("trigger cycle through stores {0:?}")]
    CycleDetected(Vec<String>),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("provider {key}: {reason}")]
    Provider { key: String, reason: String },
}

fn default_capacity() -> usize {
    DEFAULT_STORE_CAPACITY
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreSpec {
    pub key: String,
    #[serde(default = "default_capacity")]
    pub capacity: usize,
}

fn default_true() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProviderKind {
    Camera(CameraProvider),
    OximeterStream {
        profile: StreamProfile,
        /// Start streaming as soon as the daemon is up.
        #[serde(default = "default_true", skip_serializing_if = "is_true")]
        autostart: bool,
    },
    Fogbus {
        endpoint: BackendEndpointConfig,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        batch: Option<BatchSource>,
    },
    Edgelens {
        endpoint: BackendEndpointConfig,
    },
    Aneka {
        endpoint: BackendEndpointConfig,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        transform: Option<String>,
    },
    Local {
        transform: String,
    },
    BitmapConvert,
}

impl ProviderKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProviderKind::Camera(_) => "camera",
            ProviderKind::OximeterStream { .. } => "oximeter-stream",
            ProviderKind::Fogbus { .. } => "fogbus",
            ProviderKind::Edgelens { .. } => "edgelens",
            ProviderKind::Aneka { .. } => "aneka",
            ProviderKind::Local { .. } => "local",
            ProviderKind::BitmapConvert => "bitmap-convert",
        }
    }

    fn input_spec(&self) -> InputSpec {
        match self {
            ProviderKind::Camera(_) | ProviderKind::OximeterStream { .. } => InputSpec::None,
            ProviderKind::Fogbus { batch: Some(_), .. } => InputSpec::None,
            _ => InputSpec::SingleEnvelope,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderSpec {
    pub key: String,
    pub output_store: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_ms: Option<u64>,
    #[serde(flatten)]
    pub kind: ProviderKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerSpec {
    pub store: String,
    /// Start this provider with the stored envelope.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_provider: Option<String>,
    /// Produce into this store, letting its chooser pick the provider.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub produce: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub allow_cycle: bool,
}

impl TriggerSpec {
    pub fn start(store: &str, provider: &str) -> Self {
        Self {
            store: store.to_string(),
            start_provider: Some(provider.to_string()),
            produce: None,
            allow_cycle: false,
        }
    }

    pub fn produce(store: &str, target: &str) -> Self {
        Self {
            store: store.to_string(),
            start_provider: None,
            produce: Some(target.to_string()),
            allow_cycle: false,
        }
    }

    fn action(&self) -> Result<TriggerAction, ConfigError> {
        match (&self.start_provider, &self.produce) {
            (Some(p), None) => Ok(TriggerAction::StartProvider(p.clone())),
            (None, Some(s)) => Ok(TriggerAction::ProduceData(s.clone())),
            _ => Err(ConfigError::Invalid(format!(
                "trigger on {:?} needs exactly one of start_provider or produce",
                self.store
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub stores: Vec<StoreSpec>,
    #[serde(default)]
    pub providers: Vec<ProviderSpec>,
    #[serde(default)]
    pub triggers: Vec<TriggerSpec>,
    #[serde(default)]
    pub choosers: Vec<ChooserPolicy>,
    #[serde(default)]
    pub runtime: RuntimeConfig,
}

pub fn load_config(path: impl AsRef<Path>) -> Result<PipelineConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    PipelineConfig::from_json(&text)
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig =
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn provider(&self, key: &str) -> Option<&ProviderSpec> {
        self.providers.iter().find(|p| p.key == key)
    }

    /// Checks every cross-reference and rejects trigger cycles that are not
    /// explicitly allowed.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut stores = HashSet::new();
        for s in &self.stores {
            if s.key.is_empty() || s.capacity == 0 {
                return Err(ConfigError::Invalid(format!(
                    "store {:?} needs a key and a positive capacity",
                    s.key
                )));
            }
            if !stores.insert(s.key.as_str()) {
                return Err(ConfigError::Duplicate {
                    what: "store",
                    key: s.key.clone(),
                });
            }
        }
        let store_ref = |key: &str| {
            if stores.contains(key) {
                Ok(())
            } else {
                Err(ConfigError::UnknownReference {
                    what: "store",
                    key: key.to_string(),
                })
            }
        };

        let mut providers: HashMap<&str, &ProviderSpec> = HashMap::new();
        for p in &self.providers {
            if providers.insert(p.key.as_str(), p).is_some() {
                return Err(ConfigError::Duplicate {
                    what: "provider",
                    key: p.key.clone(),
                });
            }
            store_ref(&p.output_store)?;
            match &p.kind {
                ProviderKind::Fogbus {
                    batch: Some(batch), ..
                } => store_ref(&batch.store)?,
                ProviderKind::Local { transform } => check_transform(transform)?,
                ProviderKind::Aneka {
                    transform: Some(transform),
                    ..
                } => check_transform(transform)?,
                _ => {}
            }
        }
        let provider_ref = |key: &str| {
            providers
                .get(key)
                .copied()
                .ok_or_else(|| ConfigError::UnknownReference {
                    what: "provider",
                    key: key.to_string(),
                })
        };

        for t in &self.triggers {
            store_ref(&t.store)?;
            match t.action()? {
                TriggerAction::StartProvider(p) => {
                    provider_ref(&p)?;
                }
                TriggerAction::ProduceData(s) => store_ref(&s)?,
                TriggerAction::Notify(_) => {}
            }
        }

        let mut chooser_stores = HashSet::new();
        for c in &self.choosers {
            store_ref(&c.store_key)?;
            if !chooser_stores.insert(c.store_key.as_str()) {
                return Err(ConfigError::Duplicate {
                    what: "chooser for store",
                    key: c.store_key.clone(),
                });
            }
            if c.candidates.is_empty() {
                return Err(ConfigError::Invalid(format!(
                    "chooser for {:?} has no candidates",
                    c.store_key
                )));
            }
            for candidate in &c.candidates {
                let p = provider_ref(candidate)?;
                if p.output_store != c.store_key {
                    return Err(ConfigError::Invalid(format!(
                        "chooser candidate {candidate:?} publishes to {:?}, not {:?}",
                        p.output_store, c.store_key
                    )));
                }
            }
        }

        self.runtime
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.check_cycles()
    }

    /// Store graph: an edge from the trigger's store to every store the
    /// triggered work can write to.
    fn check_cycles(&self) -> Result<(), ConfigError> {
        let mut edges: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for t in self.triggers.iter().filter(|t| !t.allow_cycle) {
            let targets: Vec<&str> = match (&t.start_provider, &t.produce) {
                (Some(p), _) => self
                    .provider(p)
                    .map(|p| vec![p.output_store.as_str()])
                    .unwrap_or_default(),
                (None, Some(s)) => vec![s.as_str()],
                (None, None) => vec![],
            };
            edges.entry(t.store.as_str()).or_default().extend(targets);
        }

        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Visiting,
            Done,
        }
        fn visit<'a>(
            node: &'a str,
            edges: &BTreeMap<&'a str, Vec<&'a str>>,
            marks: &mut HashMap<&'a str, Mark>,
            path: &mut Vec<&'a str>,
        ) -> Option<Vec<String>> {
            match marks.get(node) {
                Some(Mark::Done) => return None,
                Some(Mark::Visiting) => {
                    let start = path.iter().position(|n| *n == node).unwrap_or(0);
                    let mut cycle: Vec<String> = path[start..].iter().map(|s| s.to_string()).collect();
                    cycle.push(node.to_string());
                    return Some(cycle);
                }
                None => {}
            }
            marks.insert(node, Mark::Visiting);
            path.push(node);
            for next in edges.get(node).into_iter().flatten() {
                if let Some(cycle) = visit(next, edges, marks, path) {
                    return Some(cycle);
                }
            }
            path.pop();
            marks.insert(node, Mark::Done);
            None
        }

        let mut marks = HashMap::new();
        for node in edges.keys() {
            if let Some(cycle) = visit(node, &edges, &mut marks, &mut Vec::new()) {
                return Err(ConfigError::CycleDetected(cycle));
            }
        }
        Ok(())
    }
}

fn check_transform(id: &str) -> Result<(), ConfigError> {
    id.parse::<Transform>()
        .map(drop)
        .map_err(|e: TransformError| ConfigError::Invalid(e.to_string()))
}

/// An engine wired up from a [`PipelineConfig`]. The runtime is not started.
pub struct Pipeline {
    pub engine: Engine,
    pub config: PipelineConfig,
    oximeters: Vec<(String, Arc<OximeterProvider>)>,
}

impl Pipeline {
    pub fn build(config: PipelineConfig) -> Result<Self, BuildError> {
        config.validate()?;
        let engine = Engine::new();
        for s in &config.stores {
            engine.register_store(s.key.clone(), s.capacity)?;
        }
        let mut oximeters = Vec::new();
        for spec in &config.providers {
            let fail = |reason: String| BuildError::Provider {
                key: spec.key.clone(),
                reason,
            };
            let backend = |e: BackendError| fail(e.to_string());
            let source = |e: SourceError| fail(e.to_string());
            let body: Arc<dyn ProviderBody> = match &spec.kind {
                ProviderKind::Camera(camera) => {
                    camera.validate().map_err(source)?;
                    Arc::new(camera.clone())
                }
                ProviderKind::OximeterStream { profile, autostart } => {
                    let provider = Arc::new(OximeterProvider::new(profile.clone()).map_err(source)?);
                    if *autostart {
                        oximeters.push((spec.key.clone(), Arc::clone(&provider)));
                    }
                    provider
                }
                ProviderKind::Fogbus { endpoint, batch } => {
                    let mut provider = FogBusProvider::new(endpoint.clone()).map_err(backend)?;
                    if let Some(batch) = batch {
                        provider = provider.with_batch(batch.clone());
                    }
                    Arc::new(provider)
                }
                ProviderKind::Edgelens { endpoint } => {
                    Arc::new(EdgeLensProvider::new(endpoint.clone()).map_err(backend)?)
                }
                ProviderKind::Aneka {
                    endpoint,
                    transform,
                } => {
                    let mut provider = AnekaProvider::new(endpoint.clone()).map_err(backend)?;
                    if let Some(t) = transform {
                        provider = provider.with_transform(t.parse().map_err(|e: TransformError| fail(e.to_string()))?);
                    }
                    Arc::new(provider)
                }
                ProviderKind::Local { transform } => Arc::new(
                    LocalProvider::new(transform).map_err(|e| fail(e.to_string()))?,
                ),
                ProviderKind::BitmapConvert => Arc::new(BitmapProvider),
            };
            let mut descriptor = ProviderDescriptor::new(spec.key.clone(), spec.output_store.clone())
                .with_input(spec.kind.input_spec());
            if let Some(ms) = spec.timeout_ms {
                descriptor = descriptor.with_timeout(Duration::from_millis(ms));
            }
            engine.register_provider_arc(descriptor, body)?;
        }
        for policy in &config.choosers {
            engine.set_chooser(policy.clone())?;
        }
        for t in &config.triggers {
            engine.attach_trigger(&t.store, t.action()?)?;
        }
        Ok(Self {
            engine,
            config,
            oximeters,
        })
    }

    /// Starts the runtime and every autostart oximeter stream.
    pub fn start(&self) -> Result<(), BuildError> {
        self.engine
            .start_daemon(self.config.runtime.clone().with_env_overrides())?;
        for (key, _) in &self.oximeters {
            self.engine
                .run_provider(key, gateway_core::ProviderInput::None, None)?;
        }
        Ok(())
    }

    /// Stops streams, then the runtime.
    pub fn stop(&self, drain: bool) {
        for (key, provider) in &self.oximeters {
            if let Some(n) = provider.stop() {
                tracing::info!(provider = %key, frames = n, "stream stopped");
            }
        }
        if let Err(e) = self.engine.stop_daemon(drain) {
            tracing::debug!(error = %e, "runtime already stopped");
        }
    }
}

/// The camera pipeline: photos are converted to a bitmap and, in parallel,
/// offloaded to whichever detector is free; detections are converted too.
pub fn camera_demo(edgelens: BackendEndpointConfig, aneka: BackendEndpointConfig) -> PipelineConfig {
    let store = |key: &str| StoreSpec {
        key: key.to_string(),
        capacity: 32,
    };
    let provider = |key: &str, out: &str, kind| ProviderSpec {
        key: key.to_string(),
        output_store: out.to_string(),
        timeout_ms: None,
        kind,
    };
    PipelineConfig {
        stores: vec![
            store("photo-raw"),
            store("photo-bitmap"),
            store("detect-out"),
            store("display"),
        ],
        providers: vec![
            provider("camera", "photo-raw", ProviderKind::Camera(CameraProvider::default())),
            provider("photo-to-bitmap", "photo-bitmap", ProviderKind::BitmapConvert),
            provider("edgelens", "detect-out", ProviderKind::Edgelens { endpoint: edgelens }),
            provider(
                "aneka",
                "detect-out",
                ProviderKind::Aneka {
                    endpoint: aneka,
                    transform: Some(Transform::Complement.id().to_string()),
                },
            ),
            provider("detect-to-bitmap", "display", ProviderKind::BitmapConvert),
        ],
        triggers: vec![
            TriggerSpec::start("photo-raw", "photo-to-bitmap"),
            TriggerSpec::produce("photo-raw", "detect-out"),
            TriggerSpec::start("detect-out", "detect-to-bitmap"),
        ],
        choosers: vec![ChooserPolicy::priority("detect-out", &["edgelens", "aneka"]).with_fallback(true)],
        runtime: RuntimeConfig::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gateway_core::backends::FileStoreConfig;

    fn demo() -> PipelineConfig {
        camera_demo(
            BackendEndpointConfig::new("http://127.0.0.1:9001"),
            BackendEndpointConfig::new("http://127.0.0.1:9002")
                .with_transfer(FileStoreConfig::http("http://127.0.0.1:9003")),
        )
    }

    #[test]
    fn camera_demo_loads() {
        let cfg = PipelineConfig::from_json(&demo().to_json()).unwrap();
        assert_eq!(cfg.stores.len(), 4);
        assert_eq!(cfg.providers.len(), 5);
        let pipeline = Pipeline::build(cfg).unwrap();
        assert_eq!(pipeline.engine.providers_for("detect-out"), ["edgelens", "aneka"]);
    }

    #[test]
    fn round_trip_is_stable() {
        let once = PipelineConfig::from_json(&demo().to_json()).unwrap();
        let twice = PipelineConfig::from_json(&once.to_json()).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once, demo());
    }

    #[test]
    fn unknown_provider_in_trigger() {
        let mut cfg = demo();
        cfg.triggers.push(TriggerSpec::start("display", "ghost"));
        assert!(matches!(
            cfg.validate(),
            Err(ConfigError::UnknownReference { what: "provider", .. })
        ));
    }

    #[test]
    fn self_loop_is_a_cycle() {
        let json = r#"{
            "stores": [{"key": "a", "capacity": 4}],
            "providers": [{"key": "p", "kind": "local", "transform": "complement", "output_store": "a"}],
            "triggers": [{"store": "a", "start_provider": "p"}]
        }"#;
        assert!(matches!(
            PipelineConfig::from_json(json),
            Err(ConfigError::CycleDetected(c)) if c == ["a", "a"]
        ));
        let allowed = json.replace(r#""start_provider": "p""#, r#""start_provider": "p", "allow_cycle": true"#);
        assert!(PipelineConfig::from_json(&allowed).is_ok());
    }

    #[test]
    fn longer_cycle_through_produce() {
        let mut cfg = demo();
        cfg.triggers.push(TriggerSpec::produce("display", "photo-raw"));
        assert!(matches!(cfg.validate(), Err(ConfigError::CycleDetected(_))));
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            PipelineConfig::from_json("{"),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(
            PipelineConfig::from_json(r#"{"stores":[],"providers":[{"key":"x","kind":"warp","output_store":"s"}]}"#),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn chooser_candidates_must_publish_to_its_store() {
        let mut cfg = demo();
        cfg.choosers[0].candidates.push("camera".into());
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
    }
}

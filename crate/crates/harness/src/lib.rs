//! Operational surface of the gateway: JSON pipeline configs, the control
//! daemon, mock fog/cloud backends and scripted end-to-end scenarios.

pub mod config;
pub mod control;
pub mod mock;
pub mod scenario;

pub use config::{load_config, BuildError, ConfigError, Pipeline, PipelineConfig};
pub use scenario::{run_scenario, ScenarioError, ScenarioReport, SCENARIOS};

/// Logs to stderr, filtered by `RUST_LOG` (default `info`).
pub fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

//! Fog and cloud offloading adapters.
//!
//! Each adapter speaks one client-side workflow:
//!
//! * [`fogbus`]: one `POST /analyze` to a master that proxies to a worker.
//! * [`edgelens`]: ask the master for a worker, then upload, execute and poll
//!   the worker directly.
//! * [`aneka`]: put the input on a shared file store, submit a task to the
//!   master's REST API, poll it, and fetch the result from the file store.
//!
//! [`transform::LocalProvider`] runs the same byte transforms in-process.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod aneka;
pub mod edgelens;
pub mod filestore;
pub mod fogbus;
mod http;
pub mod transform;

pub use aneka::{AnekaClient, AnekaProvider, TaskReceipt, TaskState};
pub use edgelens::{EdgeLensClient, EdgeLensProvider};
pub use filestore::{FileStore, FileStoreConfig, FileStoreKind, HttpBlobStore, LocalDirStore};
pub use fogbus::{BatchSource, FogBusClient, FogBusProvider};
pub use transform::{local_execute, LocalProvider, Transform, TransformError};

/// Header carrying the engine request id on every adapter request.
pub const REQUEST_ID_HEADER: &str = "X-Request-Id";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error("backend returned HTTP {status}: {body}")]
    BackendError { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("master has no worker to assign")]
    NoWorkerAssigned,
    #[error("result not ready after {polls} polls")]
    PollExhausted { polls: u32 },
    #[error("remote task failed: {0}")]
    TaskFailed(String),
    #[error("file transfer failed: {0}")]
    TransferFailed(String),
    #[error("unexpected response: {0}")]
    Protocol(String),
    #[error("cancelled")]
    Cancelled,
    #[error("adapter misconfigured: {0}")]
    Config(String),
}

/// Result of one offloaded execution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Offloaded {
    pub payload: Vec<u8>,
    /// Status requests issued while waiting for the result.
    pub polls: u32,
}

fn default_poll_interval() -> Duration {
    Duration::from_millis(250)
}

fn default_poll_limit() -> u32 {
    120
}

fn default_connect_timeout() -> Duration {
    Duration::from_secs(5)
}

fn default_request_timeout() -> Duration {
    Duration::from_secs(30)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendEndpointConfig {
    pub master_url: String,
    #[serde(
        rename = "poll_interval_ms",
        with = "crate::millis",
        default = "default_poll_interval"
    )]
    pub poll_interval: Duration,
    #[serde(default = "default_poll_limit")]
    pub poll_limit: u32,
    /// Shared file store; only the Aneka adapter uses it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<FileStoreConfig>,
    #[serde(
        rename = "connect_timeout_ms",
        with = "crate::millis",
        default = "default_connect_timeout"
    )]
    pub connect_timeout: Duration,
    /// Bound on any single HTTP exchange.
    #[serde(
        rename = "request_timeout_ms",
        with = "crate::millis",
        default = "default_request_timeout"
    )]
    pub request_timeout: Duration,
}

impl BackendEndpointConfig {
    pub fn new(master_url: impl Into<String>) -> Self {
        Self {
            master_url: master_url.into(),
            poll_interval: default_poll_interval(),
            poll_limit: default_poll_limit(),
            transfer: None,
            connect_timeout: default_connect_timeout(),
            request_timeout: default_request_timeout(),
        }
    }

    pub fn with_polling(mut self, interval: Duration, limit: u32) -> Self {
        self.poll_interval = interval;
        self.poll_limit = limit;
        self
    }

    pub fn with_transfer(mut self, transfer: FileStoreConfig) -> Self {
        self.transfer = Some(transfer);
        self
    }

    pub fn with_connect_timeout(mut self, timeout: Duration) -> Self {
        self.connect_timeout = timeout;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !self.master_url.starts_with("http://") {
            return Err(BackendError::Config(format!(
                "master_url must be an http:// URL, got {:?}",
                self.master_url
            )));
        }
        if self.poll_limit == 0 {
            return Err(BackendError::Config("poll_limit must be positive".into()));
        }
        Ok(())
    }

    /// `master_url` joined with `path`, tolerating a trailing slash.
    pub(crate) fn master(&self, path: &str) -> String {
        join_url(&self.master_url, path)
    }

    /// Worst-case wall time spent polling before giving up.
    pub fn poll_budget(&self) -> Duration {
        self.poll_interval * self.poll_limit
    }
}

pub(crate) fn join_url(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path.trim_start_matches('/'))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_from_json() {
        let cfg: BackendEndpointConfig =
            serde_json::from_str(r#"{"master_url":"http://127.0.0.1:1"}"#).unwrap();
        assert_eq!(cfg, BackendEndpointConfig::new("http://127.0.0.1:1"));
        assert_eq!(cfg.poll_budget(), Duration::from_secs(30));
    }

    #[test]
    fn config_json_uses_millis() {
        let cfg = BackendEndpointConfig::new("http://h")
            .with_polling(Duration::from_millis(20), 3);
        let json = serde_json::to_value(&cfg).unwrap();
        assert_eq!(json["poll_interval_ms"], 20);
        assert_eq!(json["poll_limit"], 3);
        let back: BackendEndpointConfig = serde_json::from_value(json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn url_join() {
        assert_eq!(join_url("http://h:1/", "/worker"), "http://h:1/worker");
        assert_eq!(join_url("http://h:1", "tasks/7"), "http://h:1/tasks/7");
    }

    #[test]
    fn validation() {
        assert!(BackendEndpointConfig::new("ftp://x").validate().is_err());
        assert!(BackendEndpointConfig::new("http://x")
            .with_polling(Duration::ZERO, 0)
            .validate()
            .is_err());
    }
}

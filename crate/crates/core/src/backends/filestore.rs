//! Shared file storage used to move images to and from the Aneka master.

use std::fs;
use std::path::{Component, Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::http::HttpClient;
use super::{join_url, BackendError};
use crate::envelope::RequestId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FileStoreKind {
    LocalDirectory,
    HttpBlob,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileStoreConfig {
    pub kind: FileStoreKind,
    /// Directory for `local-directory`, base URL for `http-blob`.
    pub root: String,
}

impl FileStoreConfig {
    pub fn local(root: impl AsRef<Path>) -> Self {
        Self {
            kind: FileStoreKind::LocalDirectory,
            root: root.as_ref().to_string_lossy().into_owned(),
        }
    }

    pub fn http(base_url: impl Into<String>) -> Self {
        Self {
            kind: FileStoreKind::HttpBlob,
            root: base_url.into(),
        }
    }

    pub fn open(&self, connect_timeout: Duration) -> Box<dyn FileStore> {
        match self.kind {
            FileStoreKind::LocalDirectory => Box::new(LocalDirStore::new(&self.root)),
            FileStoreKind::HttpBlob => Box::new(HttpBlobStore::new(&self.root, connect_timeout)),
        }
    }
}

/// Flat key/value file storage. Paths are relative and `/`-separated.
pub trait FileStore: Send + Sync {
    fn put(&self, path: &str, data: &[u8], request_id: RequestId) -> Result<(), BackendError>;
    fn get(&self, path: &str, request_id: RequestId) -> Result<Vec<u8>, BackendError>;
}

/// Rejects absolute paths and anything that climbs out of the root.
pub fn sanitize(path: &str) -> Result<PathBuf, BackendError> {
    let candidate = Path::new(path);
    let mut clean = PathBuf::new();
    for part in candidate.components() {
        match part {
            Component::Normal(p) => clean.push(p),
            Component::CurDir => {}
            _ => {
                return Err(BackendError::TransferFailed(format!(
                    "path {path:?} escapes the store root"
                )))
            }
        }
    }
    if clean.as_os_str().is_empty() {
        return Err(BackendError::TransferFailed("empty path".into()));
    }
    Ok(clean)
}

#[derive(Debug, Clone)]
pub struct LocalDirStore {
    root: PathBuf,
}

impl LocalDirStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl FileStore for LocalDirStore {
    fn put(&self, path: &str, data: &[u8], _request_id: RequestId) -> Result<(), BackendError> {
        let target = self.root.join(sanitize(path)?);
        let fail = |e: std::io::Error| BackendError::TransferFailed(format!("{}: {e}", target.display()));
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent).map_err(fail)?;
        }
        // Write then rename so a concurrent reader never sees half a file.
        let partial = target.with_extension("part");
        fs::write(&partial, data).map_err(fail)?;
        fs::rename(&partial, &target).map_err(fail)
    }

    fn get(&self, path: &str, _request_id: RequestId) -> Result<Vec<u8>, BackendError> {
        let target = self.root.join(sanitize(path)?);
        fs::read(&target)
            .map_err(|e| BackendError::TransferFailed(format!("{}: {e}", target.display())))
    }
}

/// Blob server speaking `PUT /blob/{path}` and `GET /blob/{path}`.
#[derive(Clone)]
pub struct HttpBlobStore {
    base_url: String,
    http: HttpClient,
}

impl HttpBlobStore {
    pub fn new(base_url: &str, connect_timeout: Duration) -> Self {
        Self {
            base_url: base_url.to_string(),
            http: HttpClient::new(connect_timeout, Duration::from_secs(30)),
        }
    }

    fn url(&self, path: &str) -> Result<String, BackendError> {
        sanitize(path)?;
        Ok(join_url(&self.base_url, &format!("blob/{}", path.trim_start_matches('/'))))
    }
}

fn transfer_error(err: BackendError) -> BackendError {
    match err {
        BackendError::TransferFailed(_) => err,
        other => BackendError::TransferFailed(other.to_string()),
    }
}

impl FileStore for HttpBlobStore {
    fn put(&self, path: &str, data: &[u8], request_id: RequestId) -> Result<(), BackendError> {
        self.http
            .put(&self.url(path)?, request_id, data)
            .and_then(|r| r.error_for_status())
            .map(drop)
            .map_err(transfer_error)
    }

    fn get(&self, path: &str, request_id: RequestId) -> Result<Vec<u8>, BackendError> {
        self.http
            .get(&self.url(path)?, request_id)
            .and_then(|r| r.error_for_status())
            .map(|r| r.body)
            .map_err(transfer_error)
    }
}

use std::io;
use std::time::Duration;

use ureq::Agent;

use super::{BackendError, REQUEST_ID_HEADER};
use crate::envelope::RequestId;

const BODY_LIMIT: u64 = 256 * 1024 * 1024;

pub(crate) struct HttpReply {
    pub status: u16,
    pub body: Vec<u8>,
}

impl HttpReply {
    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.body).trim().to_string()
    }

    /// Turns any 4xx/5xx into [`BackendError::BackendError`].
    pub fn error_for_status(self) -> Result<Self, BackendError> {
        if self.status >= 400 {
            Err(BackendError::BackendError {
                status: self.status,
                body: self.text(),
            })
        } else {
            Ok(self)
        }
    }
}

/// Blocking client shared by all invocations of one adapter. `ureq::Agent`
/// pools connections and is safe to use from several workers at once.
#[derive(Clone)]
pub(crate) struct HttpClient {
    agent: Agent,
}

impl HttpClient {
    pub fn new(connect_timeout: Duration, request_timeout: Duration) -> Self {
        let config = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_connect(Some(connect_timeout))
            .timeout_global(Some(request_timeout))
            .build();
        Self {
            agent: Agent::new_with_config(config),
        }
    }

    pub fn get(&self, url: &str, request_id: RequestId) -> Result<HttpReply, BackendError> {
        let result = self
            .agent
            .get(url)
            .header(REQUEST_ID_HEADER, request_id.to_string())
            .call();
        read_reply(result)
    }

    pub fn post(
        &self,
        url: &str,
        request_id: RequestId,
        content_type: &str,
        body: &[u8],
    ) -> Result<HttpReply, BackendError> {
        let result = self
            .agent
            .post(url)
            .header(REQUEST_ID_HEADER, request_id.to_string())
            .header("Content-Type", content_type)
            .send(body);
        read_reply(result)
    }

    pub fn put(&self, url: &str, request_id: RequestId, body: &[u8]) -> Result<HttpReply, BackendError> {
        let result = self
            .agent
            .put(url)
            .header(REQUEST_ID_HEADER, request_id.to_string())
            .header("Content-Type", "application/octet-stream")
            .send(body);
        read_reply(result)
    }
}

fn read_reply(
    result: Result<ureq::http::Response<ureq::Body>, ureq::Error>,
) -> Result<HttpReply, BackendError> {
    let mut response = result.map_err(map_error)?;
    let status = response.status().as_u16();
    let body = response
        .body_mut()
        .with_config()
        .limit(BODY_LIMIT)
        .read_to_vec()
        .map_err(map_error)?;
    Ok(HttpReply { status, body })
}

fn map_error(err: ureq::Error) -> BackendError {
    match err {
        ureq::Error::Timeout(_) => BackendError::Timeout,
        ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => {
            BackendError::BackendUnreachable(err.to_string())
        }
        ureq::Error::Io(io) => match io.kind() {
            io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock => BackendError::Timeout,
            io::ErrorKind::ConnectionRefused
            | io::ErrorKind::ConnectionReset
            | io::ErrorKind::ConnectionAborted
            | io::ErrorKind::NotConnected
            | io::ErrorKind::AddrNotAvailable => BackendError::BackendUnreachable(io.to_string()),
            _ => BackendError::Protocol(io.to_string()),
        },
        ureq::Error::BadUri(uri) => BackendError::Config(format!("bad URL {uri}")),
        other => BackendError::Protocol(other.to_string()),
    }
}

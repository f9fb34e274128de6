//! EdgeLens: the master only assigns a worker; the client then talks to that
//! worker directly to upload, execute and fetch the result.

use super::http::HttpClient;
use super::{join_url, BackendEndpointConfig, BackendError, Offloaded};
use crate::engine::{ProviderBody, ProviderCall, ProviderError, ProviderOutput};
use crate::envelope::RequestId;
use crate::exec::CancelToken;
use crate::MEDIA_OCTET_STREAM;

#[derive(Clone)]
pub struct EdgeLensClient {
    cfg: BackendEndpointConfig,
    http: HttpClient,
}

impl EdgeLensClient {
    pub fn new(cfg: BackendEndpointConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        let http = HttpClient::new(cfg.connect_timeout, cfg.request_timeout);
        Ok(Self { cfg, http })
    }

    pub fn config(&self) -> &BackendEndpointConfig {
        &self.cfg
    }

    /// `GET /worker` on the master. 204 or an empty body means no worker.
    pub fn assign_worker(&self, request_id: RequestId) -> Result<String, BackendError> {
        let reply = self
            .http
            .get(&self.cfg.master("worker"), request_id)?
            .error_for_status()?;
        let worker = reply.text();
        if reply.status == 204 || worker.is_empty() {
            return Err(BackendError::NoWorkerAssigned);
        }
        if !worker.starts_with("http://") {
            return Err(BackendError::Protocol(format!("bad worker URL {worker:?}")));
        }
        Ok(worker)
    }

    /// The full sequence: assign, upload, execute, poll.
    pub fn detect(
        &self,
        image: &[u8],
        request_id: RequestId,
        cancel: &CancelToken,
    ) -> Result<Offloaded, BackendError> {
        let worker = self.assign_worker(request_id)?;
        check(cancel)?;

        let job = self
            .http
            .post(
                &join_url(&worker, "upload"),
                request_id,
                "application/octet-stream",
                image,
            )?
            .error_for_status()?
            .text();
        if job.is_empty() || job.contains('/') {
            return Err(BackendError::Protocol(format!("bad job id {job:?}")));
        }
        check(cancel)?;

        let started = self
            .http
            .post(
                &join_url(&worker, &format!("execute/{job}")),
                request_id,
                "application/octet-stream",
                &[],
            )?
            .error_for_status()?;
        if started.status != 202 {
            return Err(BackendError::Protocol(format!(
                "execute answered {} instead of 202",
                started.status
            )));
        }

        let result_url = join_url(&worker, &format!("result/{job}"));
        for polls in 1..=self.cfg.poll_limit {
            check(cancel)?;
            let reply = self.http.get(&result_url, request_id)?;
            match reply.status {
                200 => {
                    return Ok(Offloaded {
                        payload: reply.body,
                        polls,
                    })
                }
                404 => {}
                _ => {
                    reply.error_for_status()?;
                    return Err(BackendError::Protocol("unexpected result status".into()));
                }
            }
            if polls < self.cfg.poll_limit && !cancel.sleep(self.cfg.poll_interval) {
                return Err(BackendError::Cancelled);
            }
        }
        Err(BackendError::PollExhausted {
            polls: self.cfg.poll_limit,
        })
    }
}

fn check(cancel: &CancelToken) -> Result<(), BackendError> {
    if cancel.is_cancelled() {
        Err(BackendError::Cancelled)
    } else {
        Ok(())
    }
}

pub struct EdgeLensProvider {
    client: EdgeLensClient,
}

impl EdgeLensProvider {
    pub fn new(cfg: BackendEndpointConfig) -> Result<Self, BackendError> {
        Ok(Self {
            client: EdgeLensClient::new(cfg)?,
        })
    }
}

impl ProviderBody for EdgeLensProvider {
    fn execute(&self, call: &ProviderCall<'_>) -> Result<Option<ProviderOutput>, ProviderError> {
        let result = self
            .client
            .detect(&call.input.concat_payloads(), call.ctx.request_id, call.cancel)?;
        let media = call.input.media_type().unwrap_or(MEDIA_OCTET_STREAM);
        Ok(Some(ProviderOutput::new(result.payload, media)))
    }
}

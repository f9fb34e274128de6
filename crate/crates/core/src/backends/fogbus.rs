//! FogBus: the master proxies a single request to a worker of its choosing.

use serde::{Deserialize, Serialize};

use super::http::HttpClient;
use super::{BackendEndpointConfig, BackendError};
use crate::engine::{ProviderBody, ProviderCall, ProviderError, ProviderOutput};
use crate::envelope::RequestId;
use crate::exec::CancelToken;
use crate::MEDIA_TEXT;

#[derive(Clone)]
pub struct FogBusClient {
    cfg: BackendEndpointConfig,
    http: HttpClient,
}

impl FogBusClient {
    pub fn new(cfg: BackendEndpointConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        let http = HttpClient::new(cfg.connect_timeout, cfg.request_timeout);
        Ok(Self { cfg, http })
    }

    pub fn config(&self) -> &BackendEndpointConfig {
        &self.cfg
    }

    /// Exactly one `POST /analyze`; the response body is the result.
    pub fn analyze(
        &self,
        payload: &[u8],
        request_id: RequestId,
        cancel: &CancelToken,
    ) -> Result<Vec<u8>, BackendError> {
        if cancel.is_cancelled() {
            return Err(BackendError::Cancelled);
        }
        let reply = self
            .http
            .post(
                &self.cfg.master("analyze"),
                request_id,
                "application/octet-stream",
                payload,
            )?
            .error_for_status()?;
        Ok(reply.body)
    }
}

/// Where a batching provider collects its input from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSource {
    pub store: String,
    /// Newest envelopes to include, oldest first.
    pub window: usize,
}

pub struct FogBusProvider {
    client: FogBusClient,
    batch: Option<BatchSource>,
    media_type: String,
}

impl FogBusProvider {
    pub fn new(cfg: BackendEndpointConfig) -> Result<Self, BackendError> {
        Ok(Self {
            client: FogBusClient::new(cfg)?,
            batch: None,
            media_type: MEDIA_TEXT.to_string(),
        })
    }

    /// Ignore the trigger input and send the latest `window` envelopes of
    /// `store` instead.
    pub fn with_batch(mut self, batch: BatchSource) -> Self {
        self.batch = Some(batch);
        self
    }

    pub fn with_media_type(mut self, media_type: impl Into<String>) -> Self {
        self.media_type = media_type.into();
        self
    }
}

impl ProviderBody for FogBusProvider {
    fn execute(&self, call: &ProviderCall<'_>) -> Result<Option<ProviderOutput>, ProviderError> {
        let payload = match &self.batch {
            Some(batch) => call
                .engine
                .retrieve_latest(&batch.store, batch.window)?
                .iter()
                .flat_map(|e| e.payload.iter().copied())
                .collect(),
            None => call.input.concat_payloads(),
        };
        let result = self
            .client
            .analyze(&payload, call.ctx.request_id, call.cancel)?;
        Ok(Some(ProviderOutput::new(result, self.media_type.clone())))
    }
}

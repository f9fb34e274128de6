//! Aneka: inputs and results travel through a shared file store; the master's
//! REST API only takes task submissions and status queries.

use serde::{Deserialize, Serialize};

use super::filestore::FileStore;
use super::http::HttpClient;
use super::transform::Transform;
use super::{BackendEndpointConfig, BackendError, Offloaded};
use crate::engine::{ProviderBody, ProviderCall, ProviderError, ProviderOutput};
use crate::envelope::RequestId;
use crate::exec::CancelToken;
use crate::MEDIA_OCTET_STREAM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskState {
    Submitted,
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskReceipt {
    #[serde(default)]
    pub task_id: String,
    pub state: TaskState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result_ref: Option<String>,
}

impl TaskReceipt {
    pub fn validate(&self) -> Result<(), BackendError> {
        match (self.state, &self.result_ref) {
            (TaskState::Completed, None) => Err(BackendError::Protocol(
                "completed task without result_ref".into(),
            )),
            (TaskState::Completed, Some(_)) | (_, None) => Ok(()),
            (state, Some(_)) => Err(BackendError::Protocol(format!(
                "result_ref present on a {state:?} task"
            ))),
        }
    }
}

/// Body of `POST /tasks`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSubmission {
    pub input: String,
    pub transform: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Submitted {
    task_id: String,
}

pub fn input_path(request_id: RequestId) -> String {
    format!("in/{request_id}")
}

pub struct AnekaClient {
    cfg: BackendEndpointConfig,
    http: HttpClient,
    files: Box<dyn FileStore>,
}

impl AnekaClient {
    pub fn new(cfg: BackendEndpointConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        let files = cfg
            .transfer
            .as_ref()
            .ok_or_else(|| BackendError::Config("aneka needs a transfer file store".into()))?
            .open(cfg.connect_timeout);
        let http = HttpClient::new(cfg.connect_timeout, cfg.request_timeout);
        Ok(Self { cfg, http, files })
    }

    pub fn config(&self) -> &BackendEndpointConfig {
        &self.cfg
    }

    pub fn submit(
        &self,
        input: &str,
        transform: Transform,
        request_id: RequestId,
    ) -> Result<String, BackendError> {
        let body = serde_json::to_vec(&TaskSubmission {
            input: input.to_string(),
            transform: transform.id().to_string(),
        })
        .expect("submission serializes");
        let reply = self
            .http
            .post(&self.cfg.master("tasks"), request_id, "application/json", &body)?
            .error_for_status()?;
        let submitted: Submitted = serde_json::from_slice(&reply.body)
            .map_err(|e| BackendError::Protocol(format!("task submission reply: {e}")))?;
        Ok(submitted.task_id)
    }

    pub fn status(&self, task_id: &str, request_id: RequestId) -> Result<TaskReceipt, BackendError> {
        let reply = self
            .http
            .get(&self.cfg.master(&format!("tasks/{task_id}")), request_id)?
            .error_for_status()?;
        let mut receipt: TaskReceipt = serde_json::from_slice(&reply.body)
            .map_err(|e| BackendError::Protocol(format!("task status reply: {e}")))?;
        if receipt.task_id.is_empty() {
            receipt.task_id = task_id.to_string();
        }
        receipt.validate()?;
        Ok(receipt)
    }

    /// Put, submit, poll until a terminal state, get.
    pub fn detect(
        &self,
        image: &[u8],
        transform: Transform,
        request_id: RequestId,
        cancel: &CancelToken,
    ) -> Result<Offloaded, BackendError> {
        let input = input_path(request_id);
        self.files.put(&input, image, request_id)?;
        check(cancel)?;
        let task_id = self.submit(&input, transform, request_id)?;

        for polls in 1..=self.cfg.poll_limit {
            check(cancel)?;
            let receipt = self.status(&task_id, request_id)?;
            match receipt.state {
                TaskState::Completed => {
                    let result_ref = receipt.result_ref.expect("validated");
                    let payload = self.files.get(&result_ref, request_id)?;
                    return Ok(Offloaded { payload, polls });
                }
                TaskState::Failed => return Err(BackendError::TaskFailed(task_id)),
                TaskState::Submitted | TaskState::Running => {}
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

pub struct AnekaProvider {
    client: AnekaClient,
    transform: Transform,
}

impl AnekaProvider {
    pub fn new(cfg: BackendEndpointConfig) -> Result<Self, BackendError> {
        Ok(Self {
            client: AnekaClient::new(cfg)?,
            transform: Transform::AppendMarker,
        })
    }

    pub fn with_transform(mut self, transform: Transform) -> Self {
        self.transform = transform;
        self
    }
}

impl ProviderBody for AnekaProvider {
    fn execute(&self, call: &ProviderCall<'_>) -> Result<Option<ProviderOutput>, ProviderError> {
        let result = self.client.detect(
            &call.input.concat_payloads(),
            self.transform,
            call.ctx.request_id,
            call.cancel,
        )?;
        let media = self
            .transform
            .output_media_type(Some(call.input.media_type().unwrap_or(MEDIA_OCTET_STREAM)));
        Ok(Some(ProviderOutput::new(result.payload, media)))
    }
}

impl std::fmt::Debug for AnekaClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AnekaClient").field("cfg", &self.cfg).finish()
    }
}

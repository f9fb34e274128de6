use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

/// Per-store sequence number. The first envelope stored in a store gets 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DataId(pub u64);

impl fmt::Display for DataId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Identifier shared by every envelope produced while serving one request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(pub u64);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Context that travels with a request chain through stores and triggers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestContext {
    pub request_id: RequestId,
    /// What started the chain: "cli", "stream:<key>", "trigger:<store>", ...
    pub origin: String,
    pub deadline: Option<Instant>,
}

impl RequestContext {
    /// Builds a context around an existing request id.
    ///
    /// Engine-minted ids come from [`Engine::new_request`](crate::Engine::new_request);
    /// this constructor is for callers that already hold one.
    pub fn with_id(request_id: RequestId, origin: impl Into<String>) -> Self {
        Self {
            request_id,
            origin: origin.into(),
            deadline: None,
        }
    }

    pub fn with_deadline(mut self, deadline: Instant) -> Self {
        self.deadline = Some(deadline);
        self
    }
}

/// One unit of published data.
///
/// Envelopes are shared behind `Arc` once stored and never mutated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataEnvelope {
    pub data_id: DataId,
    pub request_id: RequestId,
    /// Nanoseconds since the owning engine was created.
    pub created_at: u64,
    pub payload: Vec<u8>,
    pub media_type: String,
    /// Key of the provider that produced the payload, or `"external"`.
    pub producer_key: String,
}

impl DataEnvelope {
    pub const EXTERNAL_PRODUCER: &'static str = "external";

    /// An envelope that did not come out of a store, e.g. a file handed to the
    /// CLI as provider input. Its `data_id` is 0, which no store ever assigns.
    pub fn external(payload: Vec<u8>, media_type: impl Into<String>, request_id: RequestId) -> Self {
        Self {
            data_id: DataId(0),
            request_id,
            created_at: 0,
            payload,
            media_type: media_type.into(),
            producer_key: Self::EXTERNAL_PRODUCER.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }
}

/// What a provider is started with.
#[derive(Debug, Clone, Default)]
pub enum ProviderInput {
    #[default]
    None,
    Single(Arc<DataEnvelope>),
    Batch(Vec<Arc<DataEnvelope>>),
}

impl ProviderInput {
    pub fn is_none(&self) -> bool {
        matches!(self, ProviderInput::None)
    }

    /// Payload bytes of the input; batches are concatenated in order.
    pub fn concat_payloads(&self) -> Vec<u8> {
        match self {
            ProviderInput::None => Vec::new(),
            ProviderInput::Single(env) => env.payload.clone(),
            ProviderInput::Batch(batch) => {
                let total = batch.iter().map(|e| e.payload.len()).sum();
                let mut out = Vec::with_capacity(total);
                for env in batch {
                    out.extend_from_slice(&env.payload);
                }
                out
            }
        }
    }

    /// Media type of the first envelope, if any.
    pub fn media_type(&self) -> Option<&str> {
        match self {
            ProviderInput::None => None,
            ProviderInput::Single(env) => Some(&env.media_type),
            ProviderInput::Batch(batch) => batch.first().map(|e| e.media_type.as_str()),
        }
    }

    pub fn envelopes(&self) -> Vec<Arc<DataEnvelope>> {
        match self {
            ProviderInput::None => Vec::new(),
            ProviderInput::Single(env) => vec![env.clone()],
            ProviderInput::Batch(batch) => batch.clone(),
        }
    }
}

impl From<DataEnvelope> for ProviderInput {
    fn from(env: DataEnvelope) -> Self {
        ProviderInput::Single(Arc::new(env))
    }
}

impl From<Arc<DataEnvelope>> for ProviderInput {
    fn from(env: Arc<DataEnvelope>) -> Self {
        ProviderInput::Single(env)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(bytes: &[u8]) -> Arc<DataEnvelope> {
        Arc::new(DataEnvelope::external(bytes.to_vec(), "x", RequestId(1)))
    }

    #[test]
    fn batch_concatenates_in_order() {
        let input = ProviderInput::Batch(vec![env(b"ab"), env(b""), env(b"cd")]);
        assert_eq!(input.concat_payloads(), b"abcd");
        assert_eq!(input.media_type(), Some("x"));
    }

    #[test]
    fn none_input_is_empty() {
        assert!(ProviderInput::None.concat_payloads().is_empty());
        assert_eq!(ProviderInput::None.media_type(), None);
    }

    #[test]
    fn external_envelope_has_reserved_id() {
        let e = DataEnvelope::external(vec![1, 2], "a/b", RequestId(9));
        assert_eq!(e.data_id, DataId(0));
        assert_eq!(e.producer_key, "external");
    }
}

//! Pipeline engine for IoT gateways.
//!
//! Data flows through keyed [`Store`](engine::StoreHandle)s. Providers publish
//! into exactly one store; triggers attached to a store fire on every new
//! envelope, usually to start another provider. When several providers
//! publish to the same store a [`Chooser`] arbitrates between them.
//!
//! Provider bodies run on the [`exec`] runtime: a fixed worker pool plus a
//! single coordination thread that runs the pre/post hooks and engine
//! bookkeeping.

pub mod backends;
pub mod chooser;
pub mod engine;
pub mod envelope;
pub mod exec;
pub mod millis;
pub mod ppm;
pub mod sources;

pub use chooser::{choose, Chooser, ChooserMode, ChooserPolicy};
pub use engine::{
    Engine, EngineError, InputSpec, Notification, ProviderBody, ProviderCall, ProviderDescriptor,
    ProviderError, ProviderOutput, ProviderState, ProviderStatus, StoreEvent, StoreEventKind,
    StoreHandle, TriggerAction, TriggerId, TriggerRegistration,
};
pub use envelope::{DataEnvelope, DataId, ProviderInput, RequestContext, RequestId};
pub use exec::{CancelToken, RuntimeConfig, Ticket, TicketStatus};

/// Media type of raw oximeter notification frames.
pub const MEDIA_OXIMETER_FRAME: &str = "application/x-oximeter-frame";
/// Media type of binary PPM (P6) images.
pub const MEDIA_PPM: &str = "image/x-portable-pixmap";
/// Media type of decoded RGB rasters produced by the bitmap converter.
pub const MEDIA_BITMAP: &str = "application/x-rgb24-bitmap";
pub const MEDIA_OCTET_STREAM: &str = "application/octet-stream";
pub const MEDIA_TEXT: &str = "text/plain";

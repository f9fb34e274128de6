//! Simulated device-side providers: a push-based oximeter and an on-demand
//! camera.

use thiserror::Error;

use crate::engine::EngineError;

pub mod camera;
pub mod oximeter;

pub use camera::{capture, BitmapProvider, CameraProvider, CapturedImage, Pattern};
pub use oximeter::{
    decode_batch, decode_frame, start_stream, stop_stream, OximeterFrame, OximeterProvider,
    Sample, StreamHandle, StreamProfile, Waveform,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SourceError {
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("invalid stream profile: {0}")]
    ProfileInvalid(String),
    #[error("unknown store {0:?}")]
    UnknownStore(String),
    #[error("stream already stopped")]
    AlreadyStopped,
    #[error("image dimensions {width}x{height} outside 1..=4096")]
    BadDimensions { width: u32, height: u32 },
    #[error("unknown pattern {0:?}")]
    UnknownPattern(String),
    #[error("input is not a P6 image")]
    NotAnImage,
    #[error(transparent)]
    Engine(#[from] EngineError),
}

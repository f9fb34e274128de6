//! Deterministic byte transforms standing in for remote analysis.
//!
//! The mock backends apply exactly these functions, so a local run and an
//! offloaded run of the same transform give byte-identical results.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::engine::{ProviderBody, ProviderCall, ProviderError, ProviderOutput};
use crate::envelope::ProviderInput;
use crate::sources::oximeter::decode_batch;
use crate::{ppm, MEDIA_OCTET_STREAM, MEDIA_TEXT};

/// Appended by the `append-marker` transform.
pub const DETECTION_MARKER: &[u8] = b"DETECTED";
/// Readings with SpO2 strictly below this count as desaturated.
pub const HYPOPNEA_THRESHOLD: u8 = 92;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransformError {
    #[error("unknown transform {0:?}")]
    UnknownTransform(String),
    #[error("malformed input: {0}")]
    MalformedInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transform {
    /// Bitwise NOT of every byte; for a P6 image only the pixels.
    Complement,
    /// Input followed by [`DETECTION_MARKER`].
    AppendMarker,
    /// `HYPOPNEA:<n>` for a batch of oximeter frames, `n` being the number of
    /// frames under [`HYPOPNEA_THRESHOLD`].
    HypopneaCount,
}

impl Transform {
    pub const ALL: [Transform; 3] = [
        Transform::Complement,
        Transform::AppendMarker,
        Transform::HypopneaCount,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Transform::Complement => "complement",
            Transform::AppendMarker => "append-marker",
            Transform::HypopneaCount => "hypopnea-count",
        }
    }

    pub fn apply(&self, input: &[u8]) -> Result<Vec<u8>, TransformError> {
        match self {
            Transform::Complement => {
                let skip = ppm::parse(input).map_or(0, |info| info.header_len);
                let mut out = input.to_vec();
                out[skip..].iter_mut().for_each(|b| *b = !*b);
                Ok(out)
            }
            Transform::AppendMarker => {
                let mut out = Vec::with_capacity(input.len() + DETECTION_MARKER.len());
                out.extend_from_slice(input);
                out.extend_from_slice(DETECTION_MARKER);
                Ok(out)
            }
            Transform::HypopneaCount => {
                if input.is_empty() {
                    return Err(TransformError::MalformedInput("empty batch".into()));
                }
                let frames = decode_batch(input)
                    .map_err(|e| TransformError::MalformedInput(e.to_string()))?;
                let dips = frames
                    .iter()
                    .filter(|f| f.spo2 < HYPOPNEA_THRESHOLD)
                    .count();
                Ok(format!("HYPOPNEA:{dips}").into_bytes())
            }
        }
    }

    /// Media type of the transform's output for an input of `input_media`.
    pub fn output_media_type(&self, input_media: Option<&str>) -> String {
        match self {
            Transform::HypopneaCount => MEDIA_TEXT.to_string(),
            _ => input_media.unwrap_or(MEDIA_OCTET_STREAM).to_string(),
        }
    }
}

impl FromStr for Transform {
    type Err = TransformError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Transform::ALL
            .into_iter()
            .find(|t| t.id() == s)
            .ok_or_else(|| TransformError::UnknownTransform(s.to_string()))
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// Applies a transform to the input's payload bytes, concatenated for batches.
pub fn local_execute(input: &ProviderInput, transform_id: &str) -> Result<Vec<u8>, TransformError> {
    let transform: Transform = transform_id.parse()?;
    transform.apply(&input.concat_payloads())
}

/// Runs a transform in-process instead of offloading it.
#[derive(Debug, Clone, Copy)]
pub struct LocalProvider {
    pub transform: Transform,
}

impl LocalProvider {
    pub fn new(transform_id: &str) -> Result<Self, TransformError> {
        Ok(Self {
            transform: transform_id.parse()?,
        })
    }
}

impl ProviderBody for LocalProvider {
    fn execute(&self, call: &ProviderCall<'_>) -> Result<Option<ProviderOutput>, ProviderError> {
        let out = self.transform.apply(&call.input.concat_payloads())?;
        Ok(Some(ProviderOutput::new(
            out,
            self.transform.output_media_type(call.input.media_type()),
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::{DataEnvelope, RequestId};
    use crate::sources::capture;
    use crate::sources::oximeter::OximeterFrame;
    use std::sync::Arc;

    fn single(bytes: &[u8]) -> ProviderInput {
        DataEnvelope::external(bytes.to_vec(), "x", RequestId(1)).into()
    }

    #[test]
    fn complement_raw_bytes() {
        assert_eq!(local_execute(&single(b"\x00\xFF"), "complement").unwrap(), b"\xFF\x00");
    }

    #[test]
    fn complement_keeps_ppm_header() {
        let img = capture(2, 2, "checker").unwrap();
        let out = local_execute(&single(&img.ppm), "complement").unwrap();
        assert_eq!(&out[..img.header_len()], b"P6\n2 2\n255\n");
        assert_eq!(
            &out[img.header_len()..],
            [0xFF, 0xFF, 0xFF, 0, 0, 0, 0, 0, 0, 0xFF, 0xFF, 0xFF]
        );
    }

    #[test]
    fn append_marker() {
        assert_eq!(
            local_execute(&single(b"img"), "append-marker").unwrap(),
            b"imgDETECTED"
        );
    }

    #[test]
    fn hypopnea_count_over_batch() {
        let batch: Vec<_> = [97u8, 91, 87, 92, 50]
            .iter()
            .enumerate()
            .map(|(i, &spo2)| {
                let frame = OximeterFrame {
                    spo2,
                    pulse_bpm: 70,
                    seq: i as u16,
                };
                Arc::new(DataEnvelope::external(frame.encode().to_vec(), "x", RequestId(1)))
            })
            .collect();
        let out = local_execute(&ProviderInput::Batch(batch), "hypopnea-count").unwrap();
        assert_eq!(out, b"HYPOPNEA:3");
    }

    #[test]
    fn hypopnea_count_rejects_bad_batches() {
        for bad in [&b""[..], b"\x60\x48\x00", b"\xFF\x48\x00\x00"] {
            assert!(matches!(
                local_execute(&single(bad), "hypopnea-count"),
                Err(TransformError::MalformedInput(_))
            ));
        }
    }

    #[test]
    fn unknown_transform() {
        assert_eq!(
            local_execute(&single(b""), "yolo"),
            Err(TransformError::UnknownTransform("yolo".into()))
        );
    }

    #[test]
    fn ids_round_trip() {
        for t in Transform::ALL {
            assert_eq!(t.id().parse::<Transform>().unwrap(), t);
        }
    }
}

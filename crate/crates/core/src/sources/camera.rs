//! Deterministic test-pattern camera and the PPM-to-raster converter.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SourceError;
use crate::engine::{ProviderBody, ProviderCall, ProviderError, ProviderOutput};
use crate::{ppm, MEDIA_BITMAP, MEDIA_PPM};

pub const MAX_DIMENSION: u32 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    /// Alternating black and white pixels, black at the top-left.
    Checker,
    /// Red ramps left to right, green top to bottom, blue along the diagonal.
    Gradient,
    Solid([u8; 3]),
}

impl FromStr for Pattern {
    type Err = SourceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "checker" => Ok(Pattern::Checker),
            "gradient" => Ok(Pattern::Gradient),
            _ => {
                let hex = s
                    .strip_prefix("solid:")
                    .filter(|h| h.len() == 6 && h.bytes().all(|b| b.is_ascii_hexdigit()))
                    .ok_or_else(|| SourceError::UnknownPattern(s.to_string()))?;
                let channel = |i: usize| u8::from_str_radix(&hex[i..i + 2], 16).expect("hex");
                Ok(Pattern::Solid([channel(0), channel(2), channel(4)]))
            }
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pattern::Checker => f.write_str("checker"),
            Pattern::Gradient => f.write_str("gradient"),
            Pattern::Solid([r, g, b]) => write!(f, "solid:{r:02X}{g:02X}{b:02X}"),
        }
    }
}

fn ramp(pos: u32, span: u32) -> u8 {
    (pos * 255).checked_div(span).unwrap_or(0) as u8
}

impl Pattern {
    fn pixel(&self, x: u32, y: u32, width: u32, height: u32) -> [u8; 3] {
        match self {
            Pattern::Checker => {
                if (x + y).is_multiple_of(2) {
                    [0x00; 3]
                } else {
                    [0xFF; 3]
                }
            }
            Pattern::Gradient => [
                ramp(x, width - 1),
                ramp(y, height - 1),
                ramp(x + y, width + height - 2),
            ],
            Pattern::Solid(rgb) => *rgb,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturedImage {
    pub width: u32,
    pub height: u32,
    pub pattern_id: String,
    /// The whole P6 file: header followed by `3 * width * height` bytes.
    pub ppm: Vec<u8>,
}

impl CapturedImage {
    pub fn header_len(&self) -> usize {
        self.ppm.len() - self.pixel_bytes().len()
    }

    pub fn pixel_bytes(&self) -> &[u8] {
        let n = 3 * self.width as usize * self.height as usize;
        &self.ppm[self.ppm.len() - n..]
    }
}

/// Renders a test pattern. Pure: equal arguments give byte-identical images.
pub fn capture(width: u32, height: u32, pattern_id: &str) -> Result<CapturedImage, SourceError> {
    if !(1..=MAX_DIMENSION).contains(&width) || !(1..=MAX_DIMENSION).contains(&height) {
        return Err(SourceError::BadDimensions { width, height });
    }
    let pattern: Pattern = pattern_id.parse()?;
    let mut ppm = ppm::header(width, height);
    ppm.reserve(3 * width as usize * height as usize);
    for y in 0..height {
        for x in 0..width {
            ppm.extend_from_slice(&pattern.pixel(x, y, width, height));
        }
    }
    Ok(CapturedImage {
        width,
        height,
        pattern_id: pattern_id.to_string(),
        ppm,
    })
}

fn default_width() -> u32 {
    640
}

fn default_height() -> u32 {
    480
}

fn default_pattern() -> String {
    "gradient".to_string()
}

/// Takes a photo every time it is executed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CameraProvider {
    #[serde(default = "default_width")]
    pub width: u32,
    #[serde(default = "default_height")]
    pub height: u32,
    #[serde(default = "default_pattern")]
    pub pattern: String,
}

impl Default for CameraProvider {
    fn default() -> Self {
        Self {
            width: default_width(),
            height: default_height(),
            pattern: default_pattern(),
        }
    }
}

impl CameraProvider {
    pub fn new(width: u32, height: u32, pattern: &str) -> Result<Self, SourceError> {
        let camera = Self {
            width,
            height,
            pattern: pattern.to_string(),
        };
        camera.validate()?;
        Ok(camera)
    }

    pub fn validate(&self) -> Result<(), SourceError> {
        self.pattern.parse::<Pattern>()?;
        if !(1..=MAX_DIMENSION).contains(&self.width) || !(1..=MAX_DIMENSION).contains(&self.height) {
            return Err(SourceError::BadDimensions {
                width: self.width,
                height: self.height,
            });
        }
        Ok(())
    }
}

impl ProviderBody for CameraProvider {
    fn execute(&self, _call: &ProviderCall<'_>) -> Result<Option<ProviderOutput>, ProviderError> {
        let image = capture(self.width, self.height, &self.pattern)?;
        Ok(Some(ProviderOutput::new(image.ppm, MEDIA_PPM)))
    }
}

/// Decodes a P6 image into a bare raster: width and height as big-endian
/// `u32`, then RGB bytes row by row.
#[derive(Debug, Clone, Copy, Default)]
pub struct BitmapProvider;

impl BitmapProvider {
    pub fn convert(image: &[u8]) -> Result<Vec<u8>, SourceError> {
        let info = ppm::parse(image).ok_or(SourceError::NotAnImage)?;
        let mut out = Vec::with_capacity(8 + image.len() - info.header_len);
        out.extend_from_slice(&info.width.to_be_bytes());
        out.extend_from_slice(&info.height.to_be_bytes());
        out.extend_from_slice(&image[info.header_len..]);
        Ok(out)
    }
}

impl ProviderBody for BitmapProvider {
    fn execute(&self, call: &ProviderCall<'_>) -> Result<Option<ProviderOutput>, ProviderError> {
        let bitmap = Self::convert(&call.input.concat_payloads())?;
        Ok(Some(ProviderOutput::new(bitmap, MEDIA_BITMAP)))
    }
}

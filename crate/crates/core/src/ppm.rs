//! Minimal binary PPM (P6, maxval 255) helpers.

/// `P6\n<w> <h>\n255\n`
pub fn header(width: u32, height: u32) -> Vec<u8> {
    format!("P6\n{width} {height}\n255\n").into_bytes()
}

/// Parsed header of a P6 image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PpmInfo {
    pub width: u32,
    pub height: u32,
    /// Offset of the first pixel byte.
    pub header_len: usize,
}

/// Parses a P6 header and checks that exactly `3 * w * h` pixel bytes follow.
///
/// Accepts any whitespace between header fields but no comments.
pub fn parse(bytes: &[u8]) -> Option<PpmInfo> {
    if !bytes.starts_with(b"P6") {
        return None;
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        let ws = bytes[pos..].iter().take_while(|b| b.is_ascii_whitespace()).count();
        if ws == 0 {
            return None;
        }
        pos += ws;
        let digits = bytes[pos..].iter().take_while(|b| b.is_ascii_digit()).count();
        if digits == 0 || digits > 9 {
            return None;
        }
        *field = std::str::from_utf8(&bytes[pos..pos + digits]).ok()?.parse().ok()?;
        pos += digits;
    }
    // Exactly one whitespace byte separates maxval from the raster.
    if !bytes.get(pos)?.is_ascii_whitespace() {
        return None;
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval != 255 {
        return None;
    }
    let expected = 3usize.checked_mul(width as usize)?.checked_mul(height as usize)?;
    (bytes.len() - pos == expected).then_some(PpmInfo {
        width,
        height,
        header_len: pos,
    })
}

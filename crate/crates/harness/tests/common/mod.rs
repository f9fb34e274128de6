//! Reference implementations written against the wire formats only. They
//! share no code with the crates under test.

#![allow(dead_code)]

/// Length of a binary PPM header `P6\n<w> <h>\n255\n`, if `bytes` is one
/// whose pixel section has exactly the advertised length.
pub fn ppm_header_len(bytes: &[u8]) -> Option<usize> {
    let text = bytes.get(..bytes.len().min(64))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < text.len() && text[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < text.len() && !text[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return None;
        }
        fields.push(std::str::from_utf8(&text[start..pos]).ok()?.to_string());
    }
    // Exactly one whitespace byte separates maxval from the pixels.
    if pos >= text.len() || !text[pos].is_ascii_whitespace() {
        return None;
    }
    let header = pos + 1;
    let (w, h): (usize, usize) = (fields[1].parse().ok()?, fields[2].parse().ok()?);
    (fields[0] == "P6" && fields[3] == "255" && bytes.len() == header + 3 * w * h).then_some(header)
}

pub fn complement(bytes: &[u8]) -> Vec<u8> {
    let keep = ppm_header_len(bytes).unwrap_or(0);
    bytes
        .iter()
        .enumerate()
        .map(|(i, b)| if i < keep { *b } else { 255 - *b })
        .collect()
}

pub fn append_marker(bytes: &[u8]) -> Vec<u8> {
    [bytes, b"DETECTED"].concat()
}

/// `HYPOPNEA:<n>` over 4-byte frames `[spo2, pulse, seq_hi, seq_lo]`.
pub fn hypopnea_count(bytes: &[u8]) -> Option<Vec<u8>> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(4) {
        return None;
    }
    let mut dips = 0;
    for frame in bytes.chunks(4) {
        if frame[0] > 100 {
            return None;
        }
        if frame[0] < 92 {
            dips += 1;
        }
    }
    Some(format!("HYPOPNEA:{dips}").into_bytes())
}

/// Frames in one oximeter batch.
pub fn frames(readings: &[(u8, u8)]) -> Vec<u8> {
    readings
        .iter()
        .enumerate()
        .flat_map(|(i, &(spo2, pulse))| {
            let seq = (i as u16).to_be_bytes();
            [spo2, pulse, seq[0], seq[1]]
        })
        .collect()
}

/// A P6 image of arbitrary pixel bytes.
pub fn ppm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), 3 * width * height);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Requests one adapter invocation sends.
pub mod request_counts {
    pub const FOGBUS: usize = 1;

    pub fn edgelens(polls: usize) -> usize {
        3 + polls
    }

    /// Transfers against the file store and calls against the master.
    pub fn aneka(polls: usize) -> (usize, usize) {
        (2, 1 + polls)
    }
}

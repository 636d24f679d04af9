//! 8-bit binary PGM (P5) export for visual inspection.

use super::formats::FormatError;
use crate::sensor_model::BinaryFrame;

/// Decoded P5 image with any header comments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub comments: Vec<String>,
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8], comment: Option<&str>) -> Vec<u8> {
    let mut out = b"P5\n".to_vec();
    if let Some(c) = comment {
        for line in c.lines() {
            out.extend_from_slice(format!("# {line}\n").as_bytes());
        }
    }
    out.extend_from_slice(format!("{width} {height}\n255\n").as_bytes());
    out.extend_from_slice(pixels);
    out
}

/// Bits {0, 1} map to {0, 255}.
pub fn frame_to_pgm(frame: &BinaryFrame) -> Vec<u8> {
    let mut px = Vec::with_capacity(frame.width() * frame.height());
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            px.push(if frame.get(x, y) { 255 } else { 0 });
        }
    }
    encode_pgm(frame.width(), frame.height(), &px, None)
}

/// Min-max scales a real map onto 0..=255; the scale goes into the comment line.
pub fn grid_to_pgm(width: usize, height: usize, data: &[f64]) -> Vec<u8> {
    let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let px: Vec<u8> = data
        .iter()
        .map(|v| {
            if range > 0.0 {
                ((v - min) / range * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    encode_pgm(width, height, &px, Some(&format!("scale min={min:e} max={max:e}")))
}

/// Parses the scale recorded by [`grid_to_pgm`].
pub fn parse_scale(comment: &str) -> Option<(f64, f64)> {
    let rest = comment.strip_prefix("scale ")?;
    let mut min = None;
    let mut max = None;
    for part in rest.split_whitespace() {
        if let Some(v) = part.strip_prefix("min=") {
            min = v.parse().ok();
        } else if let Some(v) = part.strip_prefix("max=") {
            max = v.parse().ok();
        }
    }
    Some((min?, max?))
}

fn invalid(offset: usize, detail: &str) -> FormatError {
    FormatError::Invariant {
        offset,
        detail: detail.to_string(),
    }
}

pub fn decode_pgm(buf: &[u8]) -> Result<Pgm, FormatError> {
    if buf.len() < 2 || &buf[..2] != b"P5" {
        return Err(FormatError::BadMagic {
            offset: 0,
            expected: "P5".into(),
            found: String::from_utf8_lossy(&buf[..buf.len().min(2)]).into_owned(),
        });
    }
    let mut pos = 2;
    let mut comments = Vec::new();
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        match buf.get(pos) {
            None => {
                return Err(FormatError::Truncated {
                    offset: pos,
                    what: "header".into(),
                    needed: 1,
                    available: 0,
                })
            }
            Some(b'#') => {
                let end = buf[pos..]
                    .iter()
                    .position(|&b| b == b'\n')
                    .map_or(buf.len(), |e| pos + e);
                comments.push(String::from_utf8_lossy(&buf[pos + 1..end]).trim().to_string());
                pos = end + 1;
            }
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            Some(b) if b.is_ascii_digit() => {
                let start = pos;
                while buf.get(pos).is_some_and(|b| b.is_ascii_digit()) {
                    pos += 1;
                }
                let v: usize = std::str::from_utf8(&buf[start..pos])
                    .unwrap()
                    .parse()
                    .map_err(|_| invalid(start, "header number out of range"))?;
                fields.push(v);
            }
            Some(_) => return Err(invalid(pos, "unexpected byte in header")),
        }
    }
    // exactly one whitespace byte separates the header from the raster
    if !buf.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(invalid(pos, "missing whitespace after maxval"));
    }
    pos += 1;
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(invalid(pos, "only maxval 255 is supported"));
    }
    if (width as u64) * (height as u64) > super::formats::MAX_ELEMENTS {
        return Err(FormatError::DimOverflow {
            offset: 3,
            detail: format!("{width}x{height}"),
        });
    }
    let n = width * height;
    let available = buf.len() - pos;
    if available < n {
        return Err(FormatError::Truncated {
            offset: pos,
            what: "raster".into(),
            needed: n,
            available,
        });
    }
    if available > n {
        return Err(FormatError::Trailing {
            offset: pos + n,
            count: available - n,
        });
    }
    Ok(Pgm {
        width,
        height,
        pixels: buf[pos..].to_vec(),
        comments,
    })
}

//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::fs;
use std::path::Path;

use super::VideoError;

/// Decoded 8-bit image, always expanded to interleaved RGB.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pixmap {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

fn header_fields(bytes: &[u8], count: usize) -> Option<(Vec<&[u8]>, usize)> {
    let mut fields = Vec::with_capacity(count);
    let mut i = 0;
    while fields.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        fields.push(&bytes[start..i]);
    }
    // exactly one whitespace byte separates the header from the raster
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return None;
    }
    Some((fields, i + 1))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Pixmap, VideoError> {
    let bad = |detail: String| VideoError::Pixmap {
        path: path.to_path_buf(),
        detail,
    };
    let (fields, offset) = header_fields(bytes, 4).ok_or_else(|| bad("truncated header".into()))?;
    let channels = match fields[0] {
        b"P6" => 3,
        b"P5" => 1,
        other => return Err(bad(format!("unsupported magic {:?}", String::from_utf8_lossy(other)))),
    };
    let num = |f: &[u8], what: &str| -> Result<usize, VideoError> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("invalid {what}")))
    };
    let width = num(fields[1], "width")?;
    let height = num(fields[2], "height")?;
    let maxval = num(fields[3], "maxval")?;
    if maxval != 255 {
        return Err(bad(format!("maxval {maxval}, only 255 is supported")));
    }
    if width == 0 || height == 0 {
        return Err(bad("zero-sized image".into()));
    }
    let payload = &bytes[offset..];
    let expected = width * height * channels;
    if payload.len() != expected {
        return Err(bad(format!(
            "header declares {width}x{height} ({expected} bytes) but payload has {} bytes",
            payload.len()
        )));
    }
    let rgb = if channels == 3 {
        payload.to_vec()
    } else {
        payload.iter().flat_map(|&v| [v, v, v]).collect()
    };
    Ok(Pixmap { width, height, rgb })
}

pub fn read(path: &Path) -> Result<Pixmap, VideoError> {
    let bytes = fs::read(path).map_err(|e| VideoError::io(path, e))?;
    decode(&bytes, path)
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    debug_assert_eq!(rgb.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    debug_assert_eq!(gray.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<(), VideoError> {
    fs::write(path, encode_pgm(width, height, gray)).map_err(|e| VideoError::io(path, e))
}

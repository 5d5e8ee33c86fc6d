//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.

use std::path::Path;

use crate::error::{Error, Result};

/// Encodes an interleaved RGB buffer as P6.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3, "rgb buffer size");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Encodes a grey buffer as P5.
pub fn encode_pgm(width: usize, height: usize, grey: &[u8]) -> Vec<u8> {
    assert_eq!(grey.len(), width * height, "grey buffer size");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(grey);
    out
}

/// Decoded raster: dimensions plus raw samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Vec<u8>,
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Raster> {
    let bad = |msg: &str| Error::format("PNM image", path, msg);
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    // Exactly one whitespace byte separates the header from the samples.
    pos += 1;
    let channels = match fields[0] {
        "P6" => 3,
        "P5" => 1,
        other => return Err(bad(&format!("unsupported magic {other:?}"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad header number {s:?}")));
    let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(bad(&format!("only 8-bit samples are supported, maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(bad("zero-sized image"));
    }
    let need = width * height * channels;
    let samples = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated pixel data"))?;
    Ok(Raster {
        width,
        height,
        channels,
        samples: samples.to_vec(),
    })
}

pub fn read(path: &Path) -> Result<Raster> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_and_pgm_decode_what_they_encode() {
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|v| (v * 13) as u8).collect();
        let r = decode(&encode_ppm(2, 3, &rgb), Path::new("x.ppm")).unwrap();
        assert_eq!((r.width, r.height, r.channels), (2, 3, 3));
        assert_eq!(r.samples, rgb);

        let grey = vec![0u8, 10, 255, 32];
        let bytes = encode_pgm(4, 1, &grey);
        assert!(bytes.starts_with(b"P5\n4 1\n255\n"));
        let r = decode(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!(r.channels, 1);
        assert_eq!(r.samples, grey);
    }

    #[test]
    fn truncated_and_foreign_files_are_errors() {
        let bytes = encode_pgm(4, 4, &[1; 16]);
        assert!(decode(&bytes[..bytes.len() - 1], Path::new("t.pgm")).is_err());
        assert!(decode(b"P3\n1 1\n255\n0 0 0", Path::new("t.ppm")).is_err());
        assert!(decode(b"garbage", Path::new("t.pgm")).is_err());
        assert!(decode(b"P5\n1 1\n65535\n\0\0", Path::new("t.pgm")).is_err());
    }
}

//! Binary PPM (P6) and PGM (P5) encoding/decoding — the only image formats
//! this crate touches, so no imaging dependency is pulled in.

use crate::{Error, Result};
use std::fs;
use std::path::Path;

/// Encode 8-bit RGB (row-major, 3 bytes per pixel) as binary PPM.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3, "pixel buffer size mismatch");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Encode 8-bit grayscale as binary PGM.
pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), width * height, "pixel buffer size mismatch");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    fs::write(path, encode_ppm(width, height, rgb))?;
    Ok(())
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(width, height, gray))?;
    Ok(())
}

/// Header tokenizer: skips whitespace and `#` comments, reads one ASCII token.
struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        HeaderReader { bytes, pos: 0 }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::InvalidArgument("image header ended early".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::InvalidArgument("non-numeric image header field".into()))
    }
}

fn decode_netpbm(bytes: &[u8], magic: &[u8], samples: usize) -> Result<(usize, usize, Vec<u8>)> {
    let mut header = HeaderReader::new(bytes);
    if header.token()? != magic {
        return Err(Error::InvalidArgument(format!(
            "not a binary {} file",
            String::from_utf8_lossy(magic)
        )));
    }
    let width = header.number()?;
    let height = header.number()?;
    let maxval = header.number()?;
    if maxval != 255 {
        return Err(Error::InvalidArgument(format!("unsupported maxval {maxval}, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("zero image dimension".into()));
    }
    // exactly one whitespace byte separates header from raster data
    let data_start = header.pos + 1;
    let need = width * height * samples;
    if bytes.len() < data_start + need {
        return Err(Error::InvalidArgument(format!(
            "truncated raster: need {need} bytes, have {}",
            bytes.len().saturating_sub(data_start)
        )));
    }
    Ok((width, height, bytes[data_start..data_start + need].to_vec()))
}

/// Decode binary PPM into (width, height, rgb bytes).
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    decode_netpbm(bytes, b"P6", 3)
}

/// Decode binary PGM into (width, height, gray bytes).
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    decode_netpbm(bytes, b"P5", 1)
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    decode_ppm(&fs::read(path)?)
}

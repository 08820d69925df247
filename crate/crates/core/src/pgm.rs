//! Binary (P5) PGM images, 8 or 16 bits per sample.

use std::path::Path;

use crate::error::{Error, Result};

pub fn encode_pgm8(width: usize, height: usize, data: &[u8]) -> Result<Vec<u8>> {
    check_len(width, height, data.len())?;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    Ok(out)
}

/// Samples are written big-endian, as the format requires.
pub fn encode_pgm16(width: usize, height: usize, data: &[u16]) -> Result<Vec<u8>> {
    check_len(width, height, data.len())?;
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for v in data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    Ok(out)
}

fn check_len(width: usize, height: usize, len: usize) -> Result<()> {
    if width * height != len {
        return Err(Error::DimensionMismatch {
            expected: (width, height),
            found: (len, 1),
        });
    }
    Ok(())
}

/// Decodes either depth; 8-bit samples are widened.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::BadMagic);
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments before each header field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::TruncatedFile(format!("PGM header ends before field {i}"))),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                line: 1 + bytes[..pos].iter().filter(|&&b| b == b'\n').count(),
                message: format!("bad PGM header field {i}"),
            })?;
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Parse {
            line: 3,
            message: format!("PGM maxval {maxval} out of range"),
        });
    }
    let n = width * height;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    let data = if maxval < 256 {
        if raster.len() < n {
            return Err(Error::TruncatedFile(format!("expected {n} samples, found {}", raster.len())));
        }
        raster[..n].iter().map(|&b| b as u16).collect()
    } else {
        if raster.len() < 2 * n {
            return Err(Error::TruncatedFile(format!("expected {} bytes, found {}", 2 * n, raster.len())));
        }
        raster[..2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    Ok((width, height, data))
}

pub fn write_pgm8(path: impl AsRef<Path>, width: usize, height: usize, data: &[u8]) -> Result<()> {
    std::fs::write(path, encode_pgm8(width, height, data)?)?;
    Ok(())
}

pub fn write_pgm16(path: impl AsRef<Path>, width: usize, height: usize, data: &[u16]) -> Result<()> {
    std::fs::write(path, encode_pgm16(width, height, data)?)?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u16>)> {
    decode_pgm(&std::fs::read(path)?)
}

//! Raster files: an ASCII header line `RASTER 1 <H> <W> <C>\n` followed by
//! `H*W*C` little-endian `f32` values in `(h, w, c)` order.

use std::fs;
use std::path::Path;

use super::Raster;
use crate::error::{Error, Result};

const MAGIC: &str = "RASTER";
const VERSION: &str = "1";
const MAX_HEADER: usize = 128;

pub fn encode_raster(r: &Raster) -> Result<Vec<u8>> {
    let header = format!("{MAGIC} {VERSION} {} {} {}\n", r.height(), r.width(), r.channels());
    let mut out = Vec::with_capacity(header.len() + 4 * r.data().len());
    out.extend_from_slice(header.as_bytes());
    for (i, &v) in r.data().iter().enumerate() {
        let x = v as f32;
        if !x.is_finite() {
            return Err(Error::format("payload", format!("value {v} at offset {i} overflows f32")));
        }
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

/// Parses one positive dimension token.
pub(crate) fn parse_dim(field: &str, token: Option<&str>) -> Result<usize> {
    let token = token.ok_or_else(|| Error::format(field, "missing"))?;
    if token.is_empty() || !token.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::format(field, format!("`{token}` is not a positive integer")));
    }
    match token.parse::<usize>() {
        Ok(0) => Err(Error::format(field, "must be positive")),
        Ok(v) => Ok(v),
        Err(_) => Err(Error::format(field, format!("`{token}` is out of range"))),
    }
}

/// Splits `bytes` at the first newline, returning the header text and payload.
pub(crate) fn split_header(bytes: &[u8]) -> Result<(&str, &[u8])> {
    let end = bytes
        .iter()
        .take(MAX_HEADER)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("header", "no newline-terminated header line"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::format("header", "header is not ASCII"))?;
    Ok((header, &bytes[end + 1..]))
}

/// Decodes little-endian `f32` values into finite `f64`s.
pub(crate) fn decode_f32s(payload: &[u8], count: usize, field: &str) -> Result<Vec<f64>> {
    let need = count.checked_mul(4).ok_or_else(|| Error::format(field, "declared size overflows"))?;
    if payload.len() < need {
        return Err(Error::format(field, format!("truncated: header declares {need} bytes, found {}", payload.len())));
    }
    if payload.len() > need {
        return Err(Error::format(field, format!("{} trailing bytes after {need} declared", payload.len() - need)));
    }
    payload
        .chunks_exact(4)
        .enumerate()
        .map(|(i, b)| {
            let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            if v.is_finite() {
                Ok(v as f64)
            } else {
                Err(Error::format(field, format!("non-finite value at index {i}")))
            }
        })
        .collect()
}

pub fn decode_raster(bytes: &[u8]) -> Result<Raster> {
    let (header, payload) = split_header(bytes)?;
    let mut tokens = header.split(' ');
    match tokens.next() {
        Some(MAGIC) => {}
        other => return Err(Error::format("magic", format!("expected `{MAGIC}`, got {other:?}"))),
    }
    match tokens.next() {
        Some(VERSION) => {}
        other => return Err(Error::format("version", format!("unsupported version {other:?}"))),
    }
    let height = parse_dim("height", tokens.next())?;
    let width = parse_dim("width", tokens.next())?;
    let channels = parse_dim("channels", tokens.next())?;
    if let Some(extra) = tokens.next() {
        return Err(Error::format("header", format!("unexpected token `{extra}`")));
    }
    let count = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::format("payload", "dimensions overflow"))?;
    let data = decode_f32s(payload, count, "payload")?;
    Raster::new(height, width, channels, data)
}

pub fn save_raster(r: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_raster(r)?).map_err(|e| Error::io(path, e))
}

pub fn load_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raster(&bytes)
}

//! Middlebury `.flo`: "PIEH", little-endian i32 width and height, then
//! interleaved little-endian f32 `(u, v)` row-major.

use std::fs;
use std::path::Path;

use ofrnn_core::imaging::FlowField;

use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"PIEH";

pub fn encode(flow: &FlowField) -> Vec<u8> {
    let (w, h) = flow.dims();
    let mut out = Vec::with_capacity(12 + 8 * w * h);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for (u, v) in flow.u().iter().zip(flow.v()) {
        out.extend_from_slice(&(*u as f32).to_le_bytes());
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing PIEH tag".into()));
    }
    let int = |at: usize| i32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let (w, h) = (int(4), int(8));
    if w <= 0 || h <= 0 {
        return Err(Error::Format(format!("bad flow dimensions {w}x{h}")));
    }
    let n = w as usize * h as usize;
    let body = &bytes[12..];
    if body.len() != 8 * n {
        return Err(Error::TruncatedFile(format!("{w}x{h} flow needs {} data bytes, found {}", 8 * n, body.len())));
    }
    let float = |i: usize| f32::from_le_bytes(body[4 * i..4 * i + 4].try_into().expect("4 bytes")) as f64;
    let u = (0..n).map(|i| float(2 * i)).collect();
    let v = (0..n).map(|i| float(2 * i + 1)).collect();
    Ok(FlowField::new(w as usize, h as usize, u, v)?)
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    decode(&fs::read(path).map_err(Error::io(path))?)
}

pub fn write_flo(flow: &FlowField, path: &Path) -> Result<()> {
    fs::write(path, encode(flow)).map_err(Error::io(path))
}

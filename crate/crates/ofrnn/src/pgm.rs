//! Binary greyscale PGM (P5), 8 or 16 bit.

use std::fs;
use std::path::Path;

use ofrnn_core::imaging::{Image, PixelMask};

use crate::{Error, Result};

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::Format("missing PGM magic number".into()));
    }
    match bytes[1] {
        b'5' => {}
        b'1' | b'2' | b'3' | b'4' | b'6' | b'7' => {
            return Err(Error::UnsupportedFormat(format!("P{} is not binary greyscale", bytes[1] as char)))
        }
        _ => return Err(Error::Format("unknown netpbm magic number".into())),
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad PGM header field".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("PGM header must end in whitespace".into()));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("bad PGM dimensions {width}x{height} or maxval {maxval}")));
    }
    Ok(Header { width: width as usize, height: height as usize, maxval, offset: pos + 1 })
}

/// Intensities divided by maxval.
pub fn decode(bytes: &[u8]) -> Result<Image> {
    let h = parse_header(bytes)?;
    let n = h.width * h.height;
    let depth = if h.maxval < 256 { 1 } else { 2 };
    let body = &bytes[h.offset..];
    if body.len() < n * depth {
        return Err(Error::TruncatedFile(format!("PGM needs {} data bytes, found {}", n * depth, body.len())));
    }
    let max = h.maxval as f64;
    let data = (0..n)
        .map(|i| {
            let raw = if depth == 1 { body[i] as u32 } else { u16::from_be_bytes([body[2 * i], body[2 * i + 1]]) as u32 };
            raw.min(h.maxval) as f64 / max
        })
        .collect();
    Ok(Image::new(h.width, h.height, data)?)
}

/// 16-bit encoding; values are clamped to [0, 1].
pub fn encode16(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width(), img.height()).into_bytes();
    for &v in img.data() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn encode_mask(mask: &PixelMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.labels().iter().map(|&l| if l != 0 { 255 } else { 0 }));
    out
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode(&fs::read(path).map_err(Error::io(path))?)
}

pub fn write_image(img: &Image, path: &Path) -> Result<()> {
    fs::write(path, encode16(img)).map_err(Error::io(path))
}

/// Pixels at half intensity or above are set.
pub fn read_mask(path: &Path) -> Result<PixelMask> {
    let img = read_image(path)?;
    Ok(PixelMask::from_fn(img.width(), img.height(), |x, y| img.get(x, y) >= 0.5))
}

pub fn write_mask(mask: &PixelMask, path: &Path) -> Result<()> {
    fs::write(path, encode_mask(mask)).map_err(Error::io(path))
}

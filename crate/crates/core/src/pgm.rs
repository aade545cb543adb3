//! Binary PGM (`P5`) reading and writing, 8-bit and 16-bit big-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image};

fn pgm_err(msg: impl Into<String>) -> Error {
    Error::Pgm(msg.into())
}

/// Serialises pixel values rounded and clamped to `[0, maxval]`.
pub fn write_pgm(img: &Image, maxval: u16) -> Result<Vec<u8>> {
    if maxval != 255 && maxval != 65535 {
        return Err(pgm_err(format!("unsupported maxval {maxval}")));
    }
    let mut out = format!("P5\n{} {}\n{}\n", img.width(), img.height(), maxval).into_bytes();
    for &p in img.pixels() {
        let v = p.round().clamp(0.0, maxval as f32) as u16;
        if maxval == 255 {
            out.push(v as u8);
        } else {
            out.extend_from_slice(&v.to_be_bytes());
        }
    }
    Ok(out)
}

struct Header {
    width: usize,
    height: usize,
    maxval: u16,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(pgm_err("truncated header"));
    }
    if &bytes[..2] != b"P5" {
        let magic = String::from_utf8_lossy(&bytes[..2]);
        return Err(pgm_err(format!("unsupported format {magic:?} (only binary P5)")));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(pgm_err("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(pgm_err("malformed header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| pgm_err("header value out of range"))?;
    }
    // exactly one whitespace byte before the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(pgm_err("malformed header")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(pgm_err("zero image extent"));
    }
    if maxval != 255 && maxval != 65535 {
        return Err(pgm_err(format!("unsupported maxval {maxval}")));
    }
    Ok(Header {
        width,
        height,
        maxval: maxval as u16,
        data_start: pos,
    })
}

/// Parses a `P5` image; pixel values are the stored integer samples.
pub fn read_pgm(bytes: &[u8]) -> Result<Image> {
    let h = parse_header(bytes)?;
    let bytes_per = if h.maxval == 255 { 1 } else { 2 };
    let n = h.width.checked_mul(h.height).ok_or_else(|| pgm_err("image too large"))?;
    let need = n * bytes_per;
    let data = &bytes[h.data_start..];
    if data.len() < need {
        return Err(pgm_err(format!("truncated payload: {} of {need} bytes", data.len())));
    }
    let pixels = if bytes_per == 1 {
        data[..need].iter().map(|&b| b as f32).collect()
    } else {
        data[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32)
            .collect()
    };
    Image::new(h.width, h.height, pixels)
}

/// Masks are stored as 8-bit PGM with 0 / 255.
pub fn write_mask_pgm(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

/// Any non-zero sample is set.
pub fn read_mask_pgm(bytes: &[u8]) -> Result<BinaryMask> {
    let img = read_pgm(bytes)?;
    BinaryMask::new(img.width(), img.height(), img.pixels().iter().map(|&p| p > 0.0).collect())
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    read_pgm(&fs::read(path)?)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    read_mask_pgm(&fs::read(path)?)
}

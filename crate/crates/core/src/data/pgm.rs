//! Binary greymap (P5) images, 8- or 16-bit.

use std::fs;
use std::path::Path;

use super::Grid;
use crate::error::{Error, Result};

struct Header {
    w: usize,
    h: usize,
    maxval: u32,
    payload_at: usize,
}

fn parse_header(bytes: &[u8], origin: &str) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::parse(origin, "byte 0: missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let name = ["width", "height", "maxval"][k];
        if start == pos {
            return Err(Error::parse(origin, format!("byte {pos}: expected {name}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| {
            Error::parse(
                origin,
                format!("byte {start}: {name} `{text}` out of range"),
            )
        })?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(Error::parse(
                origin,
                format!("byte {pos}: expected whitespace after maxval"),
            ))
        }
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(Error::parse(
            origin,
            format!("byte {pos}: empty image {w}x{h}"),
        ));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::parse(
            origin,
            format!("byte {pos}: maxval {maxval} outside 1..=65535"),
        ));
    }
    Ok(Header {
        w: w as usize,
        h: h as usize,
        maxval,
        payload_at: pos,
    })
}

/// Raw samples of a P5 image and its maxval.
fn parse_raw(bytes: &[u8], origin: &str) -> Result<(Grid<u16>, u32)> {
    let hdr = parse_header(bytes, origin)?;
    let wide = hdr.maxval > 255;
    let need = hdr.w * hdr.h * if wide { 2 } else { 1 };
    let payload = &bytes[hdr.payload_at..];
    if payload.len() < need {
        return Err(Error::parse(
            origin,
            format!(
                "byte {}: payload has {} bytes, expected {need}",
                hdr.payload_at + payload.len(),
                payload.len()
            ),
        ));
    }
    let data: Vec<u16> = if wide {
        payload[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        payload[..need].iter().map(|&b| b as u16).collect()
    };
    if let Some(i) = data.iter().position(|&v| v as u32 > hdr.maxval) {
        return Err(Error::parse(
            origin,
            format!(
                "byte {}: sample {} exceeds maxval {}",
                hdr.payload_at + i * if wide { 2 } else { 1 },
                data[i],
                hdr.maxval
            ),
        ));
    }
    Ok((Grid::new(hdr.h, hdr.w, data)?, hdr.maxval))
}

/// Intensities scaled to `[0, 1]` by maxval.
pub fn parse_pgm(bytes: &[u8], origin: &str) -> Result<Grid<f32>> {
    let (raw, maxval) = parse_raw(bytes, origin)?;
    Ok(raw.map(|v| (v as f64 / maxval as f64) as f32))
}

pub fn load_image_pgm(path: &Path) -> Result<Grid<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes, &path.display().to_string())
}

fn encode(grid: &Grid<u16>, maxval: u16) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{maxval}\n", grid.w, grid.h).into_bytes();
    if maxval > 255 {
        for v in &grid.data {
            out.extend_from_slice(&v.to_be_bytes());
        }
    } else {
        out.extend(grid.data.iter().map(|&v| v as u8));
    }
    out
}

/// Writes a 16-bit image; values are clamped to `[0, 1]`.
pub fn save_image_pgm(image: &Grid<f32>, path: &Path) -> Result<()> {
    let raw = image.map(|v| (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16);
    fs::write(path, encode(&raw, 65535)).map_err(|e| Error::io(path, e))
}

/// Grey level step between consecutive classes: 85 for three classes.
fn class_step(classes: usize) -> Result<u16> {
    if !(2..=255).contains(&classes) {
        return Err(Error::invalid(format!(
            "cannot encode {classes} classes in an 8-bit mask"
        )));
    }
    Ok((255 / classes) as u16)
}

/// Writes class `k` as grey level `k * (255 / classes)`.
pub fn save_mask_pgm(mask: &Grid<u8>, classes: usize, path: &Path) -> Result<()> {
    let step = class_step(classes)?;
    if let Some(&bad) = mask.data.iter().find(|&&v| v as usize >= classes) {
        return Err(Error::invalid(format!(
            "mask value {bad} is not below {classes}"
        )));
    }
    let raw = mask.map(|v| v as u16 * step);
    fs::write(path, encode(&raw, 255)).map_err(|e| Error::io(path, e))
}

pub fn load_mask_pgm(path: &Path, classes: usize) -> Result<Grid<u8>> {
    let origin = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (raw, maxval) = parse_raw(&bytes, &origin)?;
    if maxval > 255 {
        return Err(Error::parse(
            &origin,
            format!("mask must be 8-bit, maxval is {maxval}"),
        ));
    }
    let step = class_step(classes)?;
    let mut out = Vec::with_capacity(raw.data.len());
    for (i, &v) in raw.data.iter().enumerate() {
        if v % step != 0 || (v / step) as usize >= classes {
            return Err(Error::parse(
                &origin,
                format!(
                    "pixel {i}: grey level {v} is not a multiple of {step} below {}",
                    step as usize * classes
                ),
            ));
        }
        out.push((v / step) as u8);
    }
    Grid::new(raw.h, raw.w, out)
}

//! Minimal binary Netpbm I/O: P5 (grayscale) and P6 (RGB) with maxval 255,
//! plus a helper that turns a real-valued map into displayable gray levels.
//!
//! The writers emit a canonical byte stream — fixed header layout, no
//! comments — so regenerating a file with the same content is byte-identical.

use std::fs;
use std::path::Path;

use crate::{Error, Result};

fn header(magic: &str, w: usize, h: usize) -> Vec<u8> {
    format!("{magic}\n{w} {h}\n255\n").into_bytes()
}

/// Writes a grayscale image, row-major, one byte per pixel.
pub fn write_pgm(path: &Path, w: usize, h: usize, pixels: &[u8]) -> Result<()> {
    write_netpbm(path, "P5", w, h, 1, pixels)
}

/// Writes an RGB image, row-major, three interleaved bytes per pixel.
pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    write_netpbm(path, "P6", w, h, 3, rgb)
}

fn write_netpbm(path: &Path, magic: &str, w: usize, h: usize, depth: usize, data: &[u8]) -> Result<()> {
    if data.len() != w * h * depth {
        return Err(Error::Data(format!(
            "{magic} payload for {w}x{h} must hold {} bytes, got {}",
            w * h * depth,
            data.len()
        )));
    }
    let mut bytes = header(magic, w, h);
    bytes.extend_from_slice(data);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a P5 file written by this module (or any comment-free binary PGM
/// with maxval 255). Returns (width, height, pixels).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_netpbm(path, "P5", 1)
}

/// Reads a P6 file. Returns (width, height, interleaved rgb).
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_netpbm(path, "P6", 3)
}

fn read_netpbm(path: &Path, magic: &str, depth: usize) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::Data(format!("{}: {why}", path.display()));

    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    // Magic plus three whitespace-separated header fields, '#' comments allowed.
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
        if pos == start {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != magic {
        return Err(bad(&format!("expected {magic}, found {}", fields[0])));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    if fields[3] != "255" {
        return Err(bad("only maxval 255 is supported"));
    }
    pos += 1; // single whitespace byte after maxval
    let need = w * h * depth;
    if bytes.len() < pos + need {
        return Err(bad("truncated pixel data"));
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}

/// Min-max normalizes a real map to gray levels; a constant map becomes all
/// zeros. Used for attention heatmaps.
pub fn heatmap_bytes(map: &[f64]) -> Vec<u8> {
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo).is_normal() || hi <= lo {
        return vec![0; map.len()];
    }
    map.iter()
        .map(|v| (((v - lo) / (hi - lo)) * 255.0).round() as u8)
        .collect()
}

//! 8-bit binary grayscale (P5) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Encode an H×W map in [0, 1] (values outside are clamped).
pub fn encode(map: &[f32], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(map.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write(path: &Path, map: &[f32], height: usize, width: usize) -> Result<()> {
    if map.len() != height * width {
        return Err(Error::shape("pgm", format!("{} values for {height}×{width}", map.len())));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(map, height, width)).map_err(|e| Error::io(path, e))
}

/// Write the trailing two axes of a map tensor (any leading axes of size 1).
pub fn write_tensor(path: &Path, map: &Tensor) -> Result<()> {
    let s = map.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return Err(Error::shape("pgm", format!("expected a single map, got {s:?}")));
    }
    write(path, map.data(), s[s.len() - 2], s[s.len() - 1])
}

/// Decode a P5 image into `(height, width, values in [0, 1])`.
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let bad = |msg: &str| Error::Invalid(format!("PGM: {msg}"));
    let mut fields = Vec::new();
    let mut pos = 0;
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
    if fields[0] != "P5" {
        return Err(bad("only binary P5 is supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    let pixels = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
    if pixels.len() < width * height {
        return Err(bad("truncated raster"));
    }
    let scale = maxval as f32;
    Ok((height, width, pixels[..width * height].iter().map(|&p| f32::from(p) / scale).collect()))
}

pub fn read(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Tile equally sized maps into a single row-major grid with `cols` columns
/// and a one-pixel black gutter.
pub fn grid(maps: &[Vec<f32>], height: usize, width: usize, cols: usize) -> (usize, usize, Vec<f32>) {
    let cols = cols.max(1);
    let rows = maps.len().div_ceil(cols);
    let gh = rows * (height + 1) + 1;
    let gw = cols * (width + 1) + 1;
    let mut out = vec![0.0; gh * gw];
    for (i, map) in maps.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        let (oy, ox) = (1 + r * (height + 1), 1 + c * (width + 1));
        for y in 0..height {
            out[(oy + y) * gw + ox..][..width].copy_from_slice(&map[y * width..(y + 1) * width]);
        }
    }
    (gh, gw, out)
}

//! 8-bit binary PGM files, contact sheets and strips.

use std::path::Path;

use crate::error::{FadeError, Result};

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn pgm_bytes(width: usize, height: usize, pixels: &[f32]) -> Vec<u8> {
    pgm_bytes_with_comment(width, height, pixels, None)
}

/// PGM bytes with an optional single-line `#` comment after the magic.
pub fn pgm_bytes_with_comment(width: usize, height: usize, pixels: &[f32], comment: Option<&str>) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = b"P5\n".to_vec();
    if let Some(c) = comment {
        out.extend(format!("# {}\n", c.replace('\n', " ")).into_bytes());
    }
    out.extend(format!("{width} {height}\n255\n").into_bytes());
    out.extend(pixels.iter().map(|&v| to_u8(v)));
    out
}

pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[f32]) -> Result<()> {
    std::fs::write(path, pgm_bytes(width, height, pixels))?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = std::fs::read(path)?;
    parse_pgm(&bytes)
}

pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let bad = |m: &str| FadeError::Format(format!("pgm: {m}"));
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
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("only 8-bit binary P5 is supported"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let data = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated pixel data"))?;
    Ok((w, h, data.iter().map(|&b| b as f32 / 255.0).collect()))
}

/// Tiles equally sized square images into a grid with `cols` columns and a
/// one-pixel mid-gray gutter.
pub fn contact_sheet(images: &[Vec<f32>], side: usize, cols: usize) -> (usize, usize, Vec<f32>) {
    let cols = cols.max(1);
    let rows = images.len().div_ceil(cols).max(1);
    let w = cols * (side + 1) + 1;
    let h = rows * (side + 1) + 1;
    let mut px = vec![0.5f32; w * h];
    for (i, img) in images.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        let (ox, oy) = (1 + c * (side + 1), 1 + r * (side + 1));
        for y in 0..side {
            for x in 0..side {
                px[(oy + y) * w + ox + x] = img[y * side + x];
            }
        }
    }
    (w, h, px)
}

/// Nearest-neighbour upscaling of a `w × h` grid by an integer factor.
pub fn upscale(w: usize, h: usize, px: &[f32], factor: usize) -> (usize, usize, Vec<f32>) {
    let (nw, nh) = (w * factor, h * factor);
    let mut out = vec![0.0; nw * nh];
    for y in 0..nh {
        for x in 0..nw {
            out[y * nw + x] = px[(y / factor) * w + x / factor];
        }
    }
    (nw, nh, out)
}

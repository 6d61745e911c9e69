//! Grayscale images and binary PGM (P5) output.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major intensities in `[0, 1]`.
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// Copy a `side × side` tile with its top-left corner at `(row, col)`.
    pub fn paste(&mut self, tile: &[f64], side: usize, row: usize, col: usize) {
        for r in 0..side {
            let dst = (row + r) * self.width + col;
            self.pixels[dst..dst + side].copy_from_slice(&tile[r * side..(r + 1) * side]);
        }
    }

    pub fn tile(&self, side: usize, row: usize, col: usize) -> Vec<f64> {
        (0..side)
            .flat_map(|r| {
                let src = (row * side + r) * self.width + col * side;
                self.pixels[src..src + side].iter().copied()
            })
            .collect()
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

/// Parse a P5 file with maxval 255 back into intensities.
pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: pos as u64,
                msg: "truncated PGM header".into(),
            });
        }
        fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    let bad = |(at, f): &(usize, String)| Error::Format {
        offset: *at as u64,
        msg: format!("bad PGM header field {f:?}"),
    };
    if fields[0].1 != "P5" || fields[3].1 != "255" {
        return Err(bad(&fields[0]));
    }
    let width: usize = fields[1].1.parse().map_err(|_| bad(&fields[1]))?;
    let height: usize = fields[2].1.parse().map_err(|_| bad(&fields[2]))?;
    let data = &bytes[pos + 1..];
    if data.len() != width * height {
        return Err(Error::Format {
            offset: (pos + 1) as u64,
            msg: format!("expected {} pixel bytes, found {}", width * height, data.len()),
        });
    }
    Ok(GrayImage {
        width,
        height,
        pixels: data.iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

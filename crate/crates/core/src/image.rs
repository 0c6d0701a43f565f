//! RGB images with channels in `[0, 1]` and binary PPM (P6) I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved RGB image, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Snaps every channel to the nearest of the 256 levels stored in a PPM.
    pub fn quantized(&self) -> Self {
        Self { height: self.height, width: self.width, data: self.data.iter().map(|&v| quantize(v) as f64 / 255.0).collect() }
    }

    pub fn clamped(&self) -> Self {
        Self { height: self.height, width: self.width, data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect() }
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| quantize(v)));
        out
    }

    pub fn from_ppm_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |r: &str| Error::format(origin, r);
        let mut fields = Vec::with_capacity(4);
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
                return Err(bad("truncated PPM header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII PPM header"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("only binary P6 PPM is supported"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PPM header number"));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad("PPM maxval must be 255"));
        }
        // Exactly one whitespace byte separates the header from the raster.
        let body = &bytes[pos + 1..];
        if body.len() != width * height * 3 {
            return Err(bad("PPM raster size does not match header"));
        }
        Ok(Self { height, width, data: body.iter().map(|&b| b as f64 / 255.0).collect() })
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm_bytes(&bytes, path)
    }

    /// Values remapped from `[0, 1]` to `[-1, 1]`.
    pub fn to_signed(&self) -> Vec<f64> {
        self.data.iter().map(|v| 2.0 * v - 1.0).collect()
    }

    /// Inverse of [`Image::to_signed`], clamped to `[0, 1]`.
    pub fn from_signed(height: usize, width: usize, signed: &[f64]) -> Result<Self> {
        Self::new(height, width, signed.iter().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect())
    }

    /// Mirror image about the vertical axis.
    pub fn flipped_horizontally(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                out.set_pixel(r, self.width - 1 - c, self.pixel(r, c));
            }
        }
        out
    }

    pub fn mean_squared_difference(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / self.data.len() as f64
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Tiles equally sized images left to right into one sheet.
pub fn contact_sheet(images: &[Image]) -> Result<Image> {
    let first = images.first().ok_or_else(|| Error::InvalidInput("contact sheet needs at least one image".into()))?;
    let (h, w) = (first.height, first.width);
    if images.iter().any(|i| i.height != h || i.width != w) {
        return Err(Error::InvalidInput("contact sheet images must share a size".into()));
    }
    let mut sheet = Image::filled(h, w * images.len(), [0.0; 3]);
    for (k, img) in images.iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                sheet.set_pixel(r, k * w + c, img.pixel(r, c));
            }
        }
    }
    Ok(sheet)
}

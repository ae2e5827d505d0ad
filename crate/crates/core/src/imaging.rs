//! Raster types shared across the pipeline and their 8-bit PNG codecs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-channel image with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::shape(height * width, pixels.len()));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }

    pub fn is_finite(&self) -> bool {
        self.pixels.iter().all(|v| v.is_finite())
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.pixels {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// 8-bit quantization, round half away from zero.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Self {
        debug_assert!(top + h <= self.height && left + w <= self.width);
        Self::from_fn(h, w, |r, c| self.get(top + r, left + c))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |r, c| {
            self.get(r, self.width - 1 - c)
        })
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, |r, c| {
            self.get(self.height - 1 - r, c)
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_gray_png(path, self.width, self.height, &self.to_u8())
    }

    /// Loads an 8-bit grayscale PNG. Color or 16-bit inputs are rejected.
    pub fn load_png(path: &Path) -> Result<Self> {
        let (h, w, bytes) = load_gray_png(path)?;
        Self::from_u8(h, w, &bytes)
    }
}

/// Strictly binary H×W mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(height * width, values.len()));
        }
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidInput(format!(
                "mask is not binary (found value {v})"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(u8::from(f(r, c)));
            }
        }
        Self {
            height,
            width,
            values,
        }
    }

    /// Binarize a real-valued map: `v >= threshold` becomes 1.
    pub fn threshold(height: usize, width: usize, values: &[f64], threshold: f64) -> Self {
        Self {
            height,
            width,
            values: values.iter().map(|&v| u8::from(v >= threshold)).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.values[r * self.width + c] != 0
    }

    pub fn set(&mut self, r: usize, c: usize, on: bool) {
        self.values[r * self.width + c] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Self {
        Self::from_fn(h, w, |r, c| self.get(top + r, left + c))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |r, c| {
            self.get(r, self.width - 1 - c)
        })
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, |r, c| {
            self.get(self.height - 1 - r, c)
        })
    }

    /// Written as 0/255.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.values.iter().map(|&v| v * 255).collect();
        save_gray_png(path, self.width, self.height, &bytes)
    }

    /// Reads an 8-bit grayscale PNG and binarizes at 128.
    pub fn load_png(path: &Path) -> Result<Self> {
        let (h, w, bytes) = load_gray_png(path)?;
        Ok(Self {
            height: h,
            width: w,
            values: bytes.iter().map(|&b| u8::from(b >= 128)).collect(),
        })
    }
}

/// Detector output, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ProbabilityMap {
    pub fn binarize(&self, threshold: f64) -> BinaryMask {
        BinaryMask::threshold(self.height, self.width, &self.values, threshold)
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self {
            height: mask.height(),
            width: mask.width(),
            values: mask.as_f64(),
        }
    }
}

fn save_gray_png(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    image::save_buffer_with_format(
        path,
        bytes,
        width as u32,
        height as u32,
        image::ExtendedColorType::L8,
        image::ImageFormat::Png,
    )?;
    Ok(())
}

fn load_gray_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode()?;
    match img {
        image::DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            Ok((h as usize, w as usize, buf.into_raw()))
        }
        other => Err(Error::Dataset(format!(
            "{} is not 8-bit grayscale ({:?})",
            path.display(),
            other.color()
        ))),
    }
}

//! Grayscale images, corpus curation and crop augmentation.

mod curation;
mod io;

use rand::Rng;

use crate::error::{Error, Result};

pub use curation::{
    anchor_position, content_box, crop_black_borders, curate, dedup_feature, dedup_scan, resolution_report,
    write_manifest, CorpusEntry, CropBox, Curation, ResolutionStats, DEFAULT_DEDUP_THRESHOLD, FEATURE_LEN,
};
pub use io::{load_gray, save_gray, save_pgm, save_png};

/// Number of intensity levels of an 8-bit image.
pub const LEVELS: usize = 256;

/// Single-channel 8-bit image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
    pub source_id: String,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
            source_id: String::new(),
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    /// Builds an image from real values, rounding and clamping to 0..=255.
    pub fn from_real(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        let pixels = values.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
        Self::new(height, width, pixels)
    }

    /// Linearly rescales arbitrary real values so that their range maps to 0..=255.
    /// A constant field maps to 0.
    pub fn from_real_rescaled(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let scaled: Vec<f64> = values
            .iter()
            .map(|v| if span > 0.0 { (v - lo) / span * 255.0 } else { 0.0 })
            .collect();
        Self::from_real(height, width, &scaled)
    }

    pub fn with_source(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    /// Pixels as reals in `0.0..=255.0`.
    pub fn to_real(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| f64::from(p)).collect()
    }

    /// Pixels scaled to `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect()
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop {height}x{width} at ({top},{left}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(height * width);
        for r in top..top + height {
            let start = r * self.width + left;
            pixels.extend_from_slice(&self.pixels[start..start + width]);
        }
        Ok(Self {
            height,
            width,
            pixels,
            source_id: self.source_id.clone(),
        })
    }

    /// Pads on the bottom and right by repeating the last row and column.
    pub fn pad_edge(&self, height: usize, width: usize) -> Self {
        let height = height.max(self.height);
        let width = width.max(self.width);
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            let sr = r.min(self.height - 1);
            for c in 0..width {
                pixels.push(self.pixels[sr * self.width + c.min(self.width - 1)]);
            }
        }
        Self {
            height,
            width,
            pixels,
            source_id: self.source_id.clone(),
        }
    }

    pub fn inverted(&self) -> Self {
        Self {
            pixels: self.pixels.iter().map(|p| 255 - p).collect(),
            ..self.clone()
        }
    }
}

/// Uniformly positioned `size×size` crop; also returns its (top, left) origin.
pub fn random_crop_with_origin<R: Rng + ?Sized>(
    img: &GrayImage,
    size: usize,
    rng: &mut R,
) -> Result<(GrayImage, (usize, usize))> {
    if size == 0 || size > img.height.min(img.width) {
        return Err(Error::Precondition(format!(
            "crop size {size} does not fit a {}x{} image",
            img.height, img.width
        )));
    }
    let top = rng.gen_range(0..=img.height - size);
    let left = rng.gen_range(0..=img.width - size);
    Ok((img.crop(top, left, size, size)?, (top, left)))
}

pub fn random_crop<R: Rng + ?Sized>(img: &GrayImage, size: usize, rng: &mut R) -> Result<GrayImage> {
    random_crop_with_origin(img, size, rng).map(|(c, _)| c)
}

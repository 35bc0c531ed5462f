//! Grayscale slices and volumes, plus their on-disk encoding (16-bit PGM).

use std::io::Cursor;
use std::path::Path;

use image::{ImageBuffer, ImageFormat, Luma};

use crate::error::{Error, Result};

/// One axial slice, row-major, intensities nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Slice {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for a {height}x{width} slice",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.pixels[row * self.width + col] = v;
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Mirror about the vertical axis (column `c` ↦ `width - 1 - c`).
    pub fn flipped_horizontally(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.height {
            out.pixels[r * self.width..(r + 1) * self.width].reverse();
        }
        out
    }

    /// Encodes as binary 16-bit PGM; values are clamped to `[0, 1]`.
    pub fn to_pgm(&self) -> Result<Vec<u8>> {
        let data: Vec<u16> = self
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * u16::MAX as f32).round() as u16)
            .collect();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, data)
                .ok_or_else(|| Error::ShapeMismatch("slice buffer size".into()))?;
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Pnm)
            .map_err(|e| Error::InvalidData(format!("pgm encode: {e}")))?;
        Ok(out.into_inner())
    }

    /// Decodes any PNM grayscale image; 8-bit input is widened.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Pnm)
            .map_err(|e| Error::InvalidData(format!("pgm decode: {e}")))?
            .into_luma16();
        let (w, h) = img.dimensions();
        let pixels = img
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / u16::MAX as f32)
            .collect();
        Slice::from_vec(h as usize, w as usize, pixels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm(&bytes)
    }

    /// Applies the 16-bit storage quantisation in memory.
    pub fn quantized(&self) -> Self {
        let q = |v: f32| (v.clamp(0.0, 1.0) * u16::MAX as f32).round() as u16 as f32 / u16::MAX as f32;
        Self {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&v| q(v)).collect(),
        }
    }
}

/// Stack of axial slices indexed by depth `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    slices: Vec<Slice>,
}

impl Volume {
    pub fn new(slices: Vec<Slice>) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::InvalidData("volume has no slices".into()))?
            .shape();
        if let Some(s) = slices.iter().find(|s| s.shape() != first) {
            return Err(Error::ShapeMismatch(format!(
                "slice {:?} in a volume of {:?} slices",
                s.shape(),
                first
            )));
        }
        Ok(Self { slices })
    }

    pub fn depth(&self) -> usize {
        self.slices.len()
    }

    pub fn height(&self) -> usize {
        self.slices[0].height()
    }

    pub fn width(&self) -> usize {
        self.slices[0].width()
    }

    pub fn slice(&self, z: usize) -> Option<&Slice> {
        self.slices.get(z)
    }

    pub fn slices(&self) -> &[Slice] {
        &self.slices
    }
}

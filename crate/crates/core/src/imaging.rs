//! Grayscale image matrices and their 8-bit PNG encoding.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

/// A grayscale image stored row-major, values nominally in `[0, 1]` with 1 = white.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "image buffer has {} values, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Quantize to 8 bits per pixel: `round(value * 255)` after clamping.
    pub fn to_gray8(&self) -> Gray8 {
        Gray8 {
            height: self.height,
            width: self.width,
            pixels: self
                .data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        }
    }
}

/// An 8-bit grayscale raster; the form in which images reach an OCR engine.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray8 {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Gray8 {
    pub fn to_image(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
        }
    }

    /// Bytes that identify this raster: big-endian dimensions followed by pixels.
    pub fn identity_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.pixels.len());
        out.extend_from_slice(&(self.height as u64).to_be_bytes());
        out.extend_from_slice(&(self.width as u64).to_be_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .ok_or_else(|| Error::InvalidArgument("pixel buffer does not match dimensions".into()))?;
        let mut out = Vec::new();
        buf.write_to(&mut Cursor::new(&mut out), image::ImageOutputFormat::Png)
            .map_err(|e| Error::parse("png encode", e))?;
        Ok(out)
    }

    /// Decode PNG bytes of any color type into 8-bit grayscale.
    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| Error::parse("png decode", e))?
            .into_luma8();
        Ok(Gray8 {
            height: img.height() as usize,
            width: img.width() as usize,
            pixels: img.into_raw(),
        })
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(&bytes)
    }
}

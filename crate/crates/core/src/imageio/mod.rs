//! On-disk artifacts: 8-bit PGM images and masks, Middlebury `.flo` flow,
//! `LMEF` float maps, `MRVS` checkpoints and JSON dataset manifests.
//!
//! Every multi-byte value is little-endian. Readers never panic on bad
//! input; they return [`Error::Format`] or [`Error::Length`].

mod checkpoint;
mod floats;
mod manifest;
mod pgm;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION,
};
pub use floats::{
    decode_flo, decode_floatmap, encode_flo, encode_floatmap, read_flo, read_floatmap, write_flo,
    write_floatmap,
};
pub use manifest::{assign_splits, DatasetManifest, ManifestEntry, Split, SplitFractions};
pub use pgm::{
    decode_mask, decode_pgm, encode_mask, encode_pgm, read_mask, read_pgm, write_mask, write_pgm,
};

use crate::error::{Error, Result};

/// Grayscale luminance in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{}x{} image needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value.clamp(0.0, 1.0); width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Sample with coordinates clamped to the image.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }
}

/// Per-pixel labels: 1 = virtual-image region, 0 = real-image region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{}x{} mask needs {} labels, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Validation(format!("mask label {v} is not 0 or 1")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

/// Row-major `f32` map with finite values (entropy maps, error maps,
/// probability maps).
#[derive(Clone, Debug, PartialEq)]
pub struct FloatMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FloatMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{}x{} map needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn validate_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::Validation(format!(
                "non-finite value {} at index {i}",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

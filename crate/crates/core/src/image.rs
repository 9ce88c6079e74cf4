//! RGB images and single-channel masks with values in `[0, 1]`.
//!
//! Pixels are stored row-major, channels interleaved (`HWC`).

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(shape_err("image dimensions must be positive"));
        }
        if data.len() != height * width * CHANNELS {
            return Err(shape_err(format!(
                "image data has {} values, expected {height}x{width}x{CHANNELS}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    /// Builds an image from a per-pixel closure returning RGB.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for r in 0..height {
            for c in 0..width {
                data.extend_from_slice(&f(r, c));
            }
        }
        Self::new(height, width, data)
    }

    /// 8-bit RGB input, divided by 255.
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Element-wise product with a mask broadcast over channels.
    pub fn masked(&self, mask: &Mask) -> Result<Image> {
        mask.check_matches(self)?;
        let data = self
            .data
            .chunks(CHANNELS)
            .zip(&mask.data)
            .flat_map(|(px, &m)| px.iter().map(move |v| v * m))
            .collect();
        Ok(Image {
            height: self.height,
            width: self.width,
            data,
        })
    }

    pub fn expect_resolution(&self, height: usize, width: usize) -> Result<()> {
        if self.resolution() != (height, width) {
            return Err(shape_err(format!(
                "image is {}x{}, pipeline expects {height}x{width}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err(format!(
                "mask has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("mask value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn complement(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|m| 1.0 - m).collect(),
        }
    }

    /// Soft intersection: element-wise minimum.
    pub fn intersect(&self, other: &Mask) -> Result<Mask> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(shape_err("cannot intersect masks of different sizes"));
        }
        Ok(Mask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a.min(*b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub(crate) fn check_matches(&self, img: &Image) -> Result<()> {
        if (self.height, self.width) != img.resolution() {
            return Err(shape_err(format!(
                "mask is {}x{}, image is {}x{}",
                self.height, self.width, img.height, img.width
            )));
        }
        Ok(())
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `H×W×3` image with channel-interleaved values in `[0, 1]`.
///
/// Also carries 3-channel targets (a mask replicated across channels) and
/// decoded predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageGrid {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::Shape(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * Self::CHANNELS,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image from a per-pixel closure returning RGB.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub(crate) fn from_raw_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Self {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self { height, width, data }
    }
}

/// A multi-channel latent grid stored token-major: `data[(i * width + j) * channels + c]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentGrid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl LatentGrid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty latent {channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "latent {height}x{width}x{channels} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite latent value".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn same_geometry(&self, other: &LatentGrid) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }

    /// Little-endian bytes of the values, for hashing and byte comparisons.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// A real-valued single-channel mask in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftMask {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl SoftMask {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty mask {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("mask value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

impl From<&BinaryMask> for SoftMask {
    fn from(m: &BinaryMask) -> Self {
        SoftMask {
            height: m.height,
            width: m.width,
            data: m.data.iter().map(|&v| f32::from(v)).collect(),
        }
    }
}

/// A `{0, 1}` mask; 1 marks the foreground (blade) class.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty mask {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Domain(format!("binary mask value {v} is not 0 or 1")));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
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

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn foreground_fraction(&self) -> f64 {
        let fg = self.data.iter().filter(|&&v| v == 1).count();
        fg as f64 / self.data.len() as f64
    }

    /// Foreground and background swapped.
    pub fn inverted(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }
}

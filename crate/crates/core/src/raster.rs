//! Float images stored top-to-bottom, channels interleaved.

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "{width}×{height}×{channels} image with {} values",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, i: usize) -> &[f32] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn pixel_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Pixel as RGB; single-channel images are broadcast.
    pub fn rgb(&self, i: usize) -> [f64; 3] {
        let p = self.pixel(i);
        match p.len() {
            1 => [p[0] as f64; 3],
            _ => [p[0] as f64, p[1] as f64, p[2] as f64],
        }
    }

    pub fn channel(&self, c: usize) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().skip(c).step_by(self.channels).copied().collect(),
        }
    }

    pub fn same_shape(&self, o: &Image) -> Result<()> {
        if self.width != o.width || self.height != o.height {
            return Err(Error::invalid(format!(
                "image sizes differ: {}×{} vs {}×{}",
                self.width, self.height, o.width, o.height
            )));
        }
        Ok(())
    }
}

/// Display transform: clip to `[0, 1]` then gamma 2.2.
pub fn tonemap(v: f64) -> f64 {
    v.clamp(0.0, 1.0).powf(1.0 / 2.2)
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

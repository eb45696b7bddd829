//! RGB image values in `[0,1]` with 8-bit PNG ingestion and persistence.
//!
//! Pixels are stored planar (channel, row, column) so per-channel statistics
//! and tensor batching are straight slice walks. The PNG boundary is the
//! only quantization point: `/255` on load, `round(v*255)` on save.

use std::path::Path;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// H x W x 3 real image in `[0,1]`, stored planar as `[3,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; CHANNELS * height * width],
        }
    }

    pub fn from_planar(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::Dimension {
                op: "Image::from_planar",
                detail: format!(
                    "expected {} values for {}x{}, got {}",
                    CHANNELS * height * width,
                    height,
                    width,
                    data.len()
                ),
            });
        }
        Ok(Image { height, width, data })
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

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Mean of the three channels per pixel.
    pub fn luminance(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; n];
        for c in 0..CHANNELS {
            for (o, v) in out.iter_mut().zip(self.channel(c)) {
                *o += v / CHANNELS as f64;
            }
        }
        out
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Interleaved 8-bit RGB rows -> planar [0,1] image.
    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != CHANNELS * height * width {
            return Err(Error::Dimension {
                op: "Image::from_rgb8",
                detail: format!("expected {} bytes, got {}", CHANNELS * height * width, rgb.len()),
            });
        }
        let mut img = Image::new(height, width);
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    img.set(c, y, x, f64::from(rgb[(y * width + x) * CHANNELS + c]) / 255.0);
                }
            }
        }
        Ok(img)
    }

    /// Planar image -> interleaved 8-bit RGB via `round(v*255)`, clamped.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = vec![0u8; CHANNELS * self.height * self.width];
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..CHANNELS {
                    let v = (self.get(c, y, x) * 255.0).round().clamp(0.0, 255.0);
                    out[(y * self.width + x) * CHANNELS + c] = v as u8;
                }
            }
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let dynimg = image::open(path).map_err(|e| Error::Png {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let rgb = dynimg.to_rgb8();
        Image::from_rgb8(rgb.height() as usize, rgb.width() as usize, rgb.as_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = self.to_rgb8();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer sized by construction");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Png {
                path: path.display().to_string(),
                detail: e.to_string(),
            })
    }
}

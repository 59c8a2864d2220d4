use std::path::Path;

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};

/// An RGB image in height×width×channel order with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn offset(&self, y: usize, x: usize) -> usize {
        (y * self.width + x) * 3
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = self.offset(y, x);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let o = self.offset(y, x);
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self { height: h as usize, width: w as usize, data }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw: Vec<u8> = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        ImageBuffer::<Rgb<u8>, _>::from_raw(self.width as u32, self.height as u32, raw).expect("raster buffer size")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
    }

    /// Bilinear resize; a no-op clone when already at the target size.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if self.height == height && self.width == width {
            return self.clone();
        }
        let out = image::imageops::resize(&self.to_rgb8(), width as u32, height as u32, FilterType::Triangle);
        Self::from_rgb8(&out)
    }

    pub(crate) fn resized_checked(self, height: usize, width: usize) -> Result<Self> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Shape("zero-sized image".into()));
        }
        Ok(self.resized(height, width))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = Raster::filled(6, 4, [0.2, 0.4, 0.6]);
        r.set_pixel(1, 2, [1.0, 0.0, 0.5]);
        let path = dir.path().join("x.png");
        r.save_png(&path).unwrap();
        let back = Raster::load(&path).unwrap();
        assert_eq!((back.height, back.width), (6, 4));
        for (a, b) in r.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn resize_reaches_target_shape() {
        let r = Raster::filled(10, 7, [0.5; 3]).resized(384, 128);
        assert_eq!((r.height, r.width, r.data.len()), (384, 128, 384 * 128 * 3));
    }
}

//! Plain raster containers and PNG I/O.

use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; (width * height * 3) as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> [f32; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [f32; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixel_count(&self) -> usize {
        (self.width * self.height) as usize
    }

    /// Rec. 601 luma.
    pub fn to_gray(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|c| 0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64)
            .collect()
    }

    pub fn to_png_bytes(&self) -> Vec<u8> {
        let raw: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        encode_png(self.width, self.height, image::ColorType::Rgb8, &raw)
    }

    pub fn from_png_bytes(bytes: &[u8], asset: &str) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                asset: asset.into(),
                reason: e.to_string(),
            })?
            .to_rgb8();
        Ok(Self {
            width: img.width(),
            height: img.height(),
            data: img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_png_bytes(&bytes, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Binary pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![false; (width * height) as usize],
        }
    }

    pub fn filled(width: u32, height: u32, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; (width * height) as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.data[(y * self.width + x) as usize] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// 8-bit grayscale PNG, 255 = set, 0 = unset.
    pub fn to_png_bytes(&self) -> Vec<u8> {
        let raw: Vec<u8> = self.data.iter().map(|&v| if v { 255 } else { 0 }).collect();
        encode_png(self.width, self.height, image::ColorType::L8, &raw)
    }

    /// Any nonzero luma counts as set (tolerates anti-aliased tools at 255).
    pub fn from_png_bytes(bytes: &[u8], asset: &str) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                asset: asset.into(),
                reason: e.to_string(),
            })?
            .to_luma8();
        Ok(Self {
            width: img.width(),
            height: img.height(),
            data: img.as_raw().iter().map(|&v| v >= 128).collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_png_bytes(&bytes, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn encode_png(width: u32, height: u32, color: image::ColorType, raw: &[u8]) -> Vec<u8> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(raw, width, height, color.into())
        .expect("in-memory PNG encoding");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_png_round_trip() {
        let mut m = Mask::new(5, 3);
        m.set(1, 2, true);
        m.set(4, 0, true);
        let back = Mask::from_png_bytes(&m.to_png_bytes(), "mem").unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rgb_png_quantizes_to_8_bits() {
        let mut img = RgbImage::new(2, 2);
        img.set(1, 1, [1.0, 0.5, 0.0]);
        let back = RgbImage::from_png_bytes(&img.to_png_bytes(), "mem").unwrap();
        let px = back.get(1, 1);
        assert_eq!(px[0], 1.0);
        assert!((px[1] - 0.5).abs() < 1.0 / 255.0);
    }
}

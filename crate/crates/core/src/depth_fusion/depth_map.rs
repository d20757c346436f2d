use std::path::Path;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SDPT";
const VERSION: u32 = 1;

/// Per-pixel camera-space depth, row-major. `NaN` marks a missing value.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    values: Vec<f32>,
}

/// Bitwise on values, so two missing pixels compare equal.
impl PartialEq for DepthMap {
    fn eq(&self, other: &Self) -> bool {
        (self.width, self.height) == (other.width, other.height)
            && self
                .values
                .iter()
                .map(|v| v.to_bits())
                .eq(other.values.iter().map(|v| v.to_bits()))
    }
}

impl DepthMap {
    pub fn new(width: u32, height: u32, values: Vec<f32>) -> Result<Self> {
        if values.len() != (width as usize) * (height as usize) {
            return Err(Error::DimensionMismatch(format!(
                "{} depth values for a {width}x{height} map",
                values.len()
            )));
        }
        if let Some(&bad) = values.iter().find(|v| !v.is_nan() && !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidDepth(bad as f64));
        }
        Ok(Self { width, height, values })
    }

    pub fn missing(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            values: vec![f32::NAN; (width * height) as usize],
        }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: u32, y: u32) -> Option<f64> {
        let v = self.values[(y * self.width + x) as usize];
        (!v.is_nan()).then_some(v as f64)
    }

    /// Stores a depth; non-positive or non-finite input clears the pixel.
    pub fn set(&mut self, x: u32, y: u32, depth: Option<f64>) {
        let v = match depth {
            Some(d) if d.is_finite() && d > 0.0 => d as f32,
            _ => f32::NAN,
        };
        self.values[(y * self.width + x) as usize] = v;
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| !v.is_nan()).count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC);
        w.u32(VERSION).u32(self.height).u32(self.width).f32s(&self.values);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], asset: &str) -> Result<Self> {
        let mut r = Reader::new(bytes, asset);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let height = r.u32()?;
        let width = r.u32()?;
        let values = r.f32s(width as usize * height as usize)?;
        r.finish()?;
        Self::new(width, height, values).map_err(|e| r.error(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }
}

use std::path::Path;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::geometry::{Bvh, CameraModel, TriangleMesh};
use crate::imaging::RgbImage;

const MAGIC: &[u8; 4] = b"SFMB";
const VERSION: u32 = 1;

/// Dense per-pixel feature grid, row-major and channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(width: u32, height: u32, channels: u32, data: Vec<f32>) -> Result<Self> {
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "{} feature values for {width}x{height}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("feature map contains non-finite values".into()));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[f32] {
        let c = self.channels as usize;
        let i = (y as usize * self.width as usize + x as usize) * c;
        &self.data[i..i + c]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC);
        w.u32(VERSION)
            .u32(self.height)
            .u32(self.width)
            .u32(self.channels)
            .f32s(&self.data);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], asset: &str) -> Result<Self> {
        let mut r = Reader::new(bytes, asset);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let height = r.u32()?;
        let width = r.u32()?;
        let channels = r.u32()?;
        let data = r.f32s(width as usize * height as usize * channels as usize)?;
        r.finish()?;
        Self::new(width, height, channels, data).map_err(|e| r.error(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }
}

/// Channel count of [`rgb_feature_map`].
pub const RGB_FEATURE_CHANNELS: u32 = 7;

/// Stand-in features computed from an image and the scaffold mesh:
/// `(r, g, b, nx, ny, nz, 1)` with the world normal of the visible surface
/// mapped to `[0, 1]`. Background pixels get zero normal channels.
pub fn rgb_feature_map(image: &RgbImage, mesh: &TriangleMesh, bvh: &Bvh, camera: &CameraModel) -> Result<FeatureMap> {
    if image.width != camera.width || image.height != camera.height {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} vs camera {}x{}",
            image.width, image.height, camera.width, camera.height
        )));
    }
    let normals = mesh.vertex_normals();
    let faces = mesh.faces();
    let mut data = Vec::with_capacity(image.pixel_count() * RGB_FEATURE_CHANNELS as usize);
    for y in 0..image.height {
        for x in 0..image.width {
            data.extend_from_slice(&image.get(x, y));
            let (o, d) = camera.pixel_ray(x, y);
            match bvh.raycast(&o, &d) {
                Some(hit) => {
                    let f = faces[hit.face as usize];
                    let n = (0..3)
                        .map(|k| normals[f[k] as usize] * hit.barycentric[k])
                        .sum::<crate::geometry::Vec3>()
                        .normalize();
                    data.extend(n.iter().map(|v| (v * 0.5 + 0.5) as f32));
                }
                None => data.extend_from_slice(&[0.0; 3]),
            }
            data.push(1.0);
        }
    }
    FeatureMap::new(image.width, image.height, RGB_FEATURE_CHANNELS, data)
}

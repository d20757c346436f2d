use std::path::Path;

use nalgebra::{Matrix3, Vector2};
use serde::{Deserialize, Serialize};

use super::{Mat3, Vec3};
use crate::error::{Error, Result};

/// Convention tag required in camera files.
pub const CAMERA_CONVENTION: &str = "world_to_camera_rh_z_forward";

/// Pinhole camera with a world-to-camera pose.
///
/// Right-handed, +z forward, pixel origin at the top-left corner, pixel
/// centres at integer + 0.5. `x_cam = rotation * x_world + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Mat3,
        translation: Vec3,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("zero image size".into()));
        }
        if !(0.0..=self.width as f64).contains(&self.cx) || !(0.0..=self.height as f64).contains(&self.cy) {
            return Err(Error::InvalidCamera(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        let r = &self.rotation;
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if orth > 1e-6 || (det - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidCamera(format!(
                "rotation is not a proper rotation (orthogonality error {orth:e}, det {det})"
            )));
        }
        if !self.translation.iter().all(|t| t.is_finite()) {
            return Err(Error::InvalidCamera("non-finite translation".into()));
        }
        Ok(())
    }

    /// Camera looking from `eye` towards `target`; `up` fixes the roll. The
    /// image y axis points down, so the camera's y axis is `-up` projected.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: u32, height: u32) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(Error::InvalidCamera("up vector parallel to view direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            rotation,
            translation,
            width,
            height,
        )
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// World-space direction of the optical axis.
    pub fn optical_axis(&self) -> Vec3 {
        self.rotation.transpose() * Vec3::z()
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Projects a world point. Returns the continuous pixel coordinate and the
    /// camera-space depth.
    pub fn project(&self, p: &Vec3) -> Result<(Vector2<f64>, f64)> {
        let c = self.world_to_camera(p);
        if !(c.z > 0.0) {
            return Err(Error::BehindCamera { z: c.z });
        }
        Ok((
            Vector2::new(self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy),
            c.z,
        ))
    }

    /// Exact inverse of [`project`](Self::project).
    pub fn backproject(&self, pixel: &Vector2<f64>, depth: f64) -> Result<Vec3> {
        if !depth.is_finite() || depth <= 0.0 {
            return Err(Error::InvalidDepth(depth));
        }
        let c = Vec3::new(
            (pixel.x - self.cx) / self.fx * depth,
            (pixel.y - self.cy) / self.fy * depth,
            depth,
        );
        Ok(self.rotation.transpose() * (c - self.translation))
    }

    /// Integer pixel containing a continuous coordinate, if inside the image.
    pub fn pixel_index(&self, pixel: &Vector2<f64>) -> Option<(u32, u32)> {
        let (x, y) = (pixel.x.floor(), pixel.y.floor());
        if x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64 {
            Some((x as u32, y as u32))
        } else {
            None
        }
    }

    /// Continuous coordinate of a pixel centre.
    pub fn pixel_center(x: u32, y: u32) -> Vector2<f64> {
        Vector2::new(x as f64 + 0.5, y as f64 + 0.5)
    }

    /// Unit world-space direction through a continuous pixel coordinate.
    pub fn ray_direction(&self, pixel: &Vector2<f64>) -> Vec3 {
        let c = Vec3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0);
        (self.rotation.transpose() * c).normalize()
    }

    /// Ray `(origin, unit direction)` through the centre of pixel `(x, y)`.
    pub fn pixel_ray(&self, x: u32, y: u32) -> (Vec3, Vec3) {
        (self.center(), self.ray_direction(&Self::pixel_center(x, y)))
    }

    /// Camera-space z of the unit ray direction; converts ray parameter to
    /// depth: `depth = t * z_per_t`.
    pub fn depth_per_unit_t(&self, direction: &Vec3) -> f64 {
        (self.rotation * direction).z
    }

    /// Same pose with intrinsics rescaled to a new image size.
    pub fn resized(&self, width: u32, height: u32) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            ..self.clone()
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CameraRecord {
    fx: f64,
    fy: f64,
    #[serde(alias = "fcx")]
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    #[serde(rename = "R")]
    rotation: [f64; 9],
    t: [f64; 3],
    convention: String,
}

pub fn cameras_from_json(text: &str, asset: &str) -> Result<Vec<CameraModel>> {
    let records: Vec<CameraRecord> = serde_json::from_str(text).map_err(|source| Error::Json {
        asset: asset.to_string(),
        source,
    })?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            if r.convention != CAMERA_CONVENTION {
                return Err(Error::format(
                    asset,
                    format!("camera {i}: unsupported convention {:?}", r.convention),
                ));
            }
            CameraModel::new(
                r.fx,
                r.fy,
                r.cx,
                r.cy,
                Matrix3::from_row_slice(&r.rotation),
                Vec3::from_column_slice(&r.t),
                r.width,
                r.height,
            )
            .map_err(|e| Error::format(asset, format!("camera {i}: {e}")))
        })
        .collect()
}

pub fn cameras_to_json(cameras: &[CameraModel]) -> String {
    let records: Vec<CameraRecord> = cameras
        .iter()
        .map(|c| {
            let r = &c.rotation;
            CameraRecord {
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                width: c.width,
                height: c.height,
                rotation: [
                    r[(0, 0)],
                    r[(0, 1)],
                    r[(0, 2)],
                    r[(1, 0)],
                    r[(1, 1)],
                    r[(1, 2)],
                    r[(2, 0)],
                    r[(2, 1)],
                    r[(2, 2)],
                ],
                t: [c.translation.x, c.translation.y, c.translation.z],
                convention: CAMERA_CONVENTION.to_string(),
            }
        })
        .collect();
    serde_json::to_string_pretty(&records).expect("camera records serialize")
}

/// Reads a camera JSON file.
pub fn load_cameras(path: &Path) -> Result<Vec<CameraModel>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    cameras_from_json(&text, &path.display().to_string())
}

pub fn save_cameras(path: &Path, cameras: &[CameraModel]) -> Result<()> {
    std::fs::write(path, cameras_to_json(cameras)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_camera() -> CameraModel {
        CameraModel::new(100.0, 100.0, 50.0, 50.0, Matrix3::identity(), Vec3::zeros(), 100, 100).unwrap()
    }

    fn random_camera(rng: &mut ChaCha8Rng) -> CameraModel {
        let eye = Vec3::new(
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(2.0..4.0),
        );
        CameraModel::look_at(eye, Vec3::zeros(), Vec3::y(), 120.0, 160, 120).unwrap()
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let cam = identity_camera();
        for d in [0.1, 1.0, 37.0] {
            let (px, depth) = cam.project(&Vec3::new(0.0, 0.0, d)).unwrap();
            assert_eq!(px, Vector2::new(50.0, 50.0));
            assert_eq!(depth, d);
        }
    }

    #[test]
    fn direct_projection_arithmetic() {
        let (px, depth) = identity_camera().project(&Vec3::new(0.1, 0.0, 1.0)).unwrap();
        assert!((px - Vector2::new(60.0, 50.0)).norm() < 1e-12);
        assert_eq!(depth, 1.0);
    }

    #[test]
    fn behind_camera_is_error() {
        let err = identity_camera().project(&Vec3::new(0.0, 0.0, -1.0));
        assert!(matches!(err, Err(Error::BehindCamera { .. })));
    }

    #[test]
    fn nan_depth_is_error() {
        let err = identity_camera().backproject(&Vector2::new(1.0, 1.0), f64::NAN);
        assert!(matches!(err, Err(Error::InvalidDepth(_))));
    }

    #[test]
    fn principal_point_backprojects_along_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cam = random_camera(&mut rng);
        let p = cam.backproject(&Vector2::new(cam.cx, cam.cy), 2.5).unwrap();
        let expected = cam.center() + cam.optical_axis() * 2.5;
        assert!((p - expected).norm() < 1e-12);
    }

    #[test]
    fn project_backproject_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cam = random_camera(&mut rng);
        for _ in 0..1000 {
            let p = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let (px, d) = cam.project(&p).unwrap();
            let q = cam.backproject(&px, d).unwrap();
            assert!((p - q).norm() <= 1e-9 * p.norm().max(1.0));
        }
    }

    #[test]
    fn backproject_matches_matrix_inverse() {
        // Independent route: invert the full 3x4 projection via K^-1 and the
        // homogeneous pose.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let cam = random_camera(&mut rng);
            let k = Matrix3::new(cam.fx, 0.0, cam.cx, 0.0, cam.fy, cam.cy, 0.0, 0.0, 1.0);
            let k_inv = k.try_inverse().unwrap();
            let mut pose = nalgebra::Matrix4::identity();
            pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&cam.rotation);
            pose.fixed_view_mut::<3, 1>(0, 3).copy_from(&cam.translation);
            let pose_inv = pose.try_inverse().unwrap();
            let px = Vector2::new(rng.gen_range(0.0..160.0), rng.gen_range(0.0..120.0));
            let d = rng.gen_range(0.5..5.0);
            let cam_pt = k_inv * Vec3::new(px.x, px.y, 1.0) * d;
            let world = pose_inv * nalgebra::Vector4::new(cam_pt.x, cam_pt.y, cam_pt.z, 1.0);
            let ours = cam.backproject(&px, d).unwrap();
            assert!((ours - world.xyz()).norm() < 1e-9);
        }
    }

    #[test]
    fn json_round_trip_and_alias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cams = vec![random_camera(&mut rng), random_camera(&mut rng)];
        let text = cameras_to_json(&cams);
        let back = cameras_from_json(&text, "mem").unwrap();
        assert_eq!(cams, back);
        let aliased = text.replace("\"cx\"", "\"fcx\"");
        assert_eq!(cameras_from_json(&aliased, "mem").unwrap(), cams);
        let wrong = text.replace(CAMERA_CONVENTION, "opengl");
        assert!(cameras_from_json(&wrong, "mem").is_err());
    }

    #[test]
    fn invalid_rotation_rejected() {
        let r = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(CameraModel::new(1.0, 1.0, 1.0, 1.0, r, Vec3::zeros(), 2, 2).is_err());
    }
}

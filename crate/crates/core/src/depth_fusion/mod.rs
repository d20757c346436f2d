//! Multi-view depth validation and point fusion.
//!
//! Camera centres are triangulated into triplets; inside each triplet every
//! view takes a turn as the target while the other two check its depth by
//! forward-backward reprojection. Pixels that survive are back-projected and
//! concatenated into one cloud.

mod camera_graph;
mod depth_map;

pub use camera_graph::{ball_pivot, build_camera_graph, min_pairwise_distance, CameraTriplet};
pub use depth_map::DepthMap;

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Vec3};
use crate::imaging::Mask;

/// A posed depth map.
#[derive(Debug, Clone, Copy)]
pub struct DepthView<'a> {
    pub camera: &'a CameraModel,
    pub depth: &'a DepthMap,
}

impl<'a> DepthView<'a> {
    pub fn new(camera: &'a CameraModel, depth: &'a DepthMap) -> Result<Self> {
        if camera.width != depth.width || camera.height != depth.height {
            return Err(Error::DimensionMismatch(format!(
                "camera {}x{} vs depth {}x{}",
                camera.width, camera.height, depth.width, depth.height
            )));
        }
        Ok(Self { camera, depth })
    }

    /// World point seen at pixel `(x, y)`, if its depth is present.
    pub fn point(&self, x: u32, y: u32) -> Option<Vec3> {
        let d = self.depth.get(x, y)?;
        self.camera.backproject(&CameraModel::pixel_center(x, y), d).ok()
    }
}

/// Distance between `p` and its round trip through `reference`: project,
/// read the nearest reference pixel's depth, back-project at the projected
/// location. `None` if the projection leaves the image or hits a missing
/// depth.
pub fn reprojection_error(p: &Vec3, reference: &DepthView) -> Option<f64> {
    let (pixel, _) = reference.camera.project(p).ok()?;
    let (x, y) = reference.camera.pixel_index(&pixel)?;
    let d = reference.depth.get(x, y)?;
    let back = reference.camera.backproject(&pixel, d).ok()?;
    Some((p - back).norm())
}

/// Validity mask of `target`'s depth against two reference views.
///
/// A pixel is valid when the two reprojection errors sum to less than
/// `epsilon`.
pub fn validate_depth(target: &DepthView, ref_a: &DepthView, ref_b: &DepthView, epsilon: f64) -> Result<Mask> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let (w, h) = (target.depth.width, target.depth.height);
    let mut mask = Mask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let Some(p) = target.point(x, y) else { continue };
            let (Some(ea), Some(eb)) = (reprojection_error(&p, ref_a), reprojection_error(&p, ref_b)) else {
                continue;
            };
            if ea + eb < epsilon {
                mask.set(x, y, true);
            }
        }
    }
    Ok(mask)
}

/// Default threshold: `3 × median nearest-camera distance × 0.005`.
pub fn default_epsilon(cameras: &[CameraModel]) -> f64 {
    let centers: Vec<Vec3> = cameras.iter().map(|c| c.center()).collect();
    let mut nearest: Vec<f64> = centers
        .iter()
        .enumerate()
        .map(|(i, a)| {
            centers
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| (a - b).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .filter(|d| d.is_finite())
        .collect();
    if nearest.is_empty() {
        return 1e-3;
    }
    nearest.sort_by(f64::total_cmp);
    let n = nearest.len();
    let median = if n % 2 == 1 {
        nearest[n / 2]
    } else {
        0.5 * (nearest[n / 2 - 1] + nearest[n / 2])
    };
    3.0 * median * 0.005
}

/// Fused points with the index of the view each came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub source_views: Vec<u32>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_ply(&self) -> Vec<u8> {
        crate::geometry::io::write_ply_cloud(&self.points, &self.source_views)
    }
}

/// Validates every triplet in all three target roles and concatenates the
/// surviving back-projected pixels, ordered by (triplet, role, row-major
/// pixel). Duplicates are kept.
pub fn fuse_points(
    cameras: &[CameraModel],
    depths: &[DepthMap],
    triplets: &[CameraTriplet],
    epsilon: f64,
) -> Result<PointCloud> {
    if cameras.len() != depths.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} cameras vs {} depth maps",
            cameras.len(),
            depths.len()
        )));
    }
    let views = cameras
        .iter()
        .zip(depths)
        .map(|(c, d)| DepthView::new(c, d))
        .collect::<Result<Vec<_>>>()?;
    let mut cloud = PointCloud::default();
    for triplet in triplets {
        if let Some(&bad) = triplet.0.iter().find(|&&i| i >= views.len()) {
            return Err(Error::Config(format!("triplet references view {bad}")));
        }
        for (t, a, b) in triplet.roles() {
            let mask = validate_depth(&views[t], &views[a], &views[b], epsilon)?;
            for y in 0..mask.height {
                for x in 0..mask.width {
                    if mask.get(x, y) {
                        cloud.points.push(views[t].point(x, y).unwrap());
                        cloud.source_views.push(t as u32);
                    }
                }
            }
        }
    }
    if cloud.is_empty() {
        log::warn!("depth fusion produced no valid points");
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;

    fn down_camera(x: f64, y: f64) -> CameraModel {
        // Looking down -z from height 2; all three share orientation.
        let r = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        let c = Vec3::new(x, y, 2.0);
        CameraModel::new(40.0, 40.0, 16.0, 16.0, r, -(r * c), 32, 32).unwrap()
    }

    fn plane_depth(cam: &CameraModel) -> DepthMap {
        // Plane z = 0, camera at height 2 looking straight down.
        let mut d = DepthMap::missing(cam.width, cam.height);
        for y in 0..cam.height {
            for x in 0..cam.width {
                d.set(x, y, Some(2.0));
            }
        }
        d
    }

    #[test]
    fn perfect_plane_is_valid_where_mutually_visible() {
        let cams = [down_camera(0.0, 0.0), down_camera(0.2, 0.0), down_camera(0.1, 0.17)];
        let depths: Vec<DepthMap> = cams.iter().map(plane_depth).collect();
        let v: Vec<DepthView> = cams
            .iter()
            .zip(&depths)
            .map(|(c, d)| DepthView::new(c, d).unwrap())
            .collect();
        let mask = validate_depth(&v[0], &v[1], &v[2], 0.01).unwrap();
        let mut visible = 0;
        for y in 0..32 {
            for x in 0..32 {
                let p = v[0].point(x, y).unwrap();
                let inside = |c: &CameraModel| c.project(&p).ok().and_then(|(px, _)| c.pixel_index(&px)).is_some();
                if inside(&cams[1]) && inside(&cams[2]) {
                    visible += 1;
                    assert!(mask.get(x, y));
                } else {
                    assert!(!mask.get(x, y));
                }
            }
        }
        assert!(visible > 500);
    }

    #[test]
    fn inflated_pixel_is_invalid() {
        let cams = [down_camera(0.0, 0.0), down_camera(0.2, 0.0), down_camera(0.1, 0.17)];
        let mut depths: Vec<DepthMap> = cams.iter().map(plane_depth).collect();
        depths[0].set(16, 16, Some(2.0 + 0.1));
        let v: Vec<DepthView> = cams
            .iter()
            .zip(&depths)
            .map(|(c, d)| DepthView::new(c, d).unwrap())
            .collect();
        let mask = validate_depth(&v[0], &v[1], &v[2], 0.01).unwrap();
        assert!(!mask.get(16, 16));
        assert!(mask.get(15, 16));
    }

    #[test]
    fn nonpositive_epsilon_is_config_error() {
        let cam = down_camera(0.0, 0.0);
        let d = plane_depth(&cam);
        let v = DepthView::new(&cam, &d).unwrap();
        assert!(matches!(validate_depth(&v, &v, &v, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn all_missing_depth_fuses_to_empty() {
        let cams = vec![down_camera(0.0, 0.0), down_camera(0.2, 0.0), down_camera(0.1, 0.17)];
        let depths: Vec<DepthMap> = cams.iter().map(|c| DepthMap::missing(c.width, c.height)).collect();
        let cloud = fuse_points(&cams, &depths, &[CameraTriplet([0, 1, 2])], 0.01).unwrap();
        assert!(cloud.is_empty());
    }
}

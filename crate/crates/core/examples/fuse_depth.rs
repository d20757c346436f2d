//! Fuse depth maps from a camera ring into a point cloud.
//!
//! One view gets a patch of bad depth; geometric validation against its
//! neighbours keeps those pixels out of the cloud.

use serf_core::depth_fusion::{build_camera_graph, default_epsilon, fuse_points, DepthMap};
use serf_core::geometry::{shapes, Bvh, CameraModel, Vec3};
use serf_core::metrics::chamfer;
use serf_core::neural_mesh::render_depth;

fn main() -> serf_core::Result<()> {
    let mesh = shapes::icosphere(4, 1.0);
    let bvh = Bvh::build(&mesh);
    let cameras: Vec<CameraModel> = (0..10)
        .map(|i| {
            let a = i as f64 / 10.0 * std::f64::consts::TAU;
            let eye = Vec3::new(3.0 * a.cos(), if i % 2 == 0 { 0.8 } else { -0.8 }, 3.0 * a.sin());
            CameraModel::look_at(eye, Vec3::zeros(), Vec3::y(), 48.0, 48, 48)
        })
        .collect::<serf_core::Result<_>>()?;
    let mut depths: Vec<DepthMap> = cameras.iter().map(|c| render_depth(&bvh, c)).collect();

    let (w, h) = (depths[0].width, depths[0].height);
    let mut values = depths[0].values().to_vec();
    for y in 16..24 {
        for x in 16..24 {
            values[(y * w + x) as usize] *= 0.7;
        }
    }
    depths[0] = DepthMap::new(w, h, values)?;

    let centers: Vec<Vec3> = cameras.iter().map(|c| c.center()).collect();
    let graph = build_camera_graph(&centers);
    let cloud = fuse_points(&cameras, &depths, &graph, default_epsilon(&cameras))?;
    let on_sphere: Vec<Vec3> = cloud.points.iter().map(|p| p.normalize()).collect();
    println!(
        "{} points fused, chamfer to the unit sphere {:.2e}",
        cloud.len(),
        chamfer(&cloud.points, &on_sphere)?
    );
    Ok(())
}

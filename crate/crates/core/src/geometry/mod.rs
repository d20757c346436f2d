//! Meshes, cameras and spatial queries.
//!
//! Everything here is immutable after construction and safe to share across
//! threads.

mod aabb;
mod bvh;
mod camera;
pub mod io;
mod knn;
mod mesh;
mod sdf;
pub mod shapes;

pub use aabb::Aabb;
pub use bvh::{ray_triangle, Bvh, ClosestPoint, Feature, RayHit};
pub use camera::{load_cameras, save_cameras, CameraModel, CAMERA_CONVENTION};
pub use knn::{KnnIndex, Neighbor};
pub use mesh::{compute_vertex_normals, TriangleMesh};
pub use sdf::MeshSdf;

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

/// Squared Euclidean distance with a fixed summation order, shared by every
/// query so that equal inputs produce bit-equal distances.
#[inline]
pub fn distance_squared(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

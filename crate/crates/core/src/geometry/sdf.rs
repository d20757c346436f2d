use std::collections::HashMap;

use super::{Bvh, ClosestPoint, Feature, TriangleMesh, Vec3};

/// Signed distance to a triangle mesh.
///
/// Magnitude is the exact distance to the closest surface point; the sign
/// comes from the angle-weighted pseudonormal of the feature (face, edge or
/// vertex) that owns that point. Negative inside.
#[derive(Debug, Clone)]
pub struct MeshSdf {
    bvh: Bvh,
    face_normals: Vec<Vec3>,
    edge_normals: HashMap<(u32, u32), Vec3>,
    vertex_normals: Vec<Vec3>,
    sign_reliable: bool,
}

impl MeshSdf {
    pub fn new(mesh: &TriangleMesh) -> Self {
        let face_normals: Vec<Vec3> = (0..mesh.face_count()).map(|f| mesh.face_normal(f)).collect();
        let edge_normals = mesh
            .edge_faces()
            .into_iter()
            .map(|(edge, faces)| {
                let sum: Vec3 = faces.iter().map(|&f| face_normals[f as usize]).sum();
                (edge, sum.normalize())
            })
            .collect();
        let sign_reliable = mesh.is_closed_and_oriented();
        if !sign_reliable {
            log::warn!("mesh is not closed and consistently oriented; SDF sign is unreliable");
        }
        Self {
            bvh: Bvh::build(mesh),
            face_normals,
            edge_normals,
            vertex_normals: mesh.vertex_normals().to_vec(),
            sign_reliable,
        }
    }

    pub fn is_sign_reliable(&self) -> bool {
        self.sign_reliable
    }

    pub fn bvh(&self) -> &Bvh {
        &self.bvh
    }

    pub fn closest(&self, p: &Vec3) -> Option<ClosestPoint> {
        self.bvh.closest_point(p)
    }

    pub fn pseudonormal(&self, feature: Feature) -> Vec3 {
        match feature {
            Feature::Face(f) => self.face_normals[f as usize],
            Feature::Edge(a, b) => self.edge_normals[&(a, b)],
            Feature::Vertex(v) => self.vertex_normals[v as usize],
        }
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        let Some(cp) = self.bvh.closest_point(p) else {
            return f64::INFINITY;
        };
        if cp.distance == 0.0 {
            return 0.0;
        }
        let n = self.pseudonormal(cp.feature);
        if (p - cp.point).dot(&n) < 0.0 {
            -cp.distance
        } else {
            cp.distance
        }
    }
}

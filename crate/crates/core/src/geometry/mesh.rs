use std::collections::HashMap;

use nalgebra::Matrix3;

use super::{Aabb, Vec3};
use crate::error::{Error, Result};

/// Indexed triangle surface with vertex-to-face adjacency and angle-weighted
/// vertex normals.
///
/// Construction validates indices and rejects degenerate faces, so every
/// `TriangleMesh` in circulation satisfies the invariants the queries rely on.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    vertex_normals: Vec<Vec3>,
    vertex_faces: Vec<Vec<u32>>,
    isolated: Vec<u32>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<Self> {
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMesh("non-finite vertex position".into()));
        }
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            if f.iter().any(|&i| i as usize >= n) {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} references vertex outside 0..{n}"
                )));
            }
        }
        let diag = Aabb::from_points(vertices.iter()).diagonal();
        let min_area = 1e-12 * diag * diag;
        for (fi, f) in faces.iter().enumerate() {
            let area = triangle_area(&vertices, f);
            if !(area > min_area) {
                return Err(Error::InvalidMesh(format!("face {fi} is degenerate (area {area:e})")));
            }
        }
        let vertex_faces = vertex_face_adjacency(n, &faces);
        let (vertex_normals, isolated) = compute_vertex_normals(&vertices, &faces, &vertex_faces);
        Ok(Self {
            vertices,
            faces,
            vertex_normals,
            vertex_faces,
            isolated,
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn vertex_normals(&self) -> &[Vec3] {
        &self.vertex_normals
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Faces incident to vertex `v`.
    pub fn incident_faces(&self, v: usize) -> &[u32] {
        &self.vertex_faces[v]
    }

    /// Vertices without incident faces. Their normal is the zero vector.
    pub fn isolated_vertices(&self) -> &[u32] {
        &self.isolated
    }

    pub fn face_vertices(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    /// Unit normal of face `f` following the counter-clockwise winding.
    pub fn face_normal(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.face_vertices(f);
        (b - a).cross(&(c - a)).normalize()
    }

    pub fn face_area(&self, f: usize) -> f64 {
        triangle_area(&self.vertices, &self.faces[f])
    }

    pub fn bbox(&self) -> Aabb {
        Aabb::from_points(self.vertices.iter())
    }

    pub fn bbox_diagonal(&self) -> f64 {
        self.bbox().diagonal()
    }

    /// Unique undirected edges as `(min, max)` vertex pairs, sorted.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut edges: Vec<(u32, u32)> = self
            .faces
            .iter()
            .flat_map(|f| {
                [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])]
                    .into_iter()
                    .map(|(a, b)| (a.min(b), a.max(b)))
            })
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    pub fn mean_edge_length(&self) -> f64 {
        let edges = self.edges();
        if edges.is_empty() {
            return 0.0;
        }
        let total: f64 = edges
            .iter()
            .map(|&(a, b)| (self.vertices[a as usize] - self.vertices[b as usize]).norm())
            .sum();
        total / edges.len() as f64
    }

    /// Map from undirected edge to the faces sharing it.
    pub fn edge_faces(&self) -> HashMap<(u32, u32), Vec<u32>> {
        let mut map: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
        for (fi, f) in self.faces.iter().enumerate() {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                map.entry((a.min(b), a.max(b))).or_default().push(fi as u32);
            }
        }
        map
    }

    /// True when every edge is shared by exactly two faces that traverse it in
    /// opposite directions (closed, consistently oriented 2-manifold).
    pub fn is_closed_and_oriented(&self) -> bool {
        let mut directed: HashMap<(u32, u32), u32> = HashMap::new();
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                *directed.entry((a, b)).or_default() += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &count)| count == 1 && directed.get(&(b, a)) == Some(&1))
    }

    /// Same connectivity with new vertex positions. Fails if the new positions
    /// produce degenerate faces.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} vertices, got {}",
                self.vertices.len(),
                vertices.len()
            )));
        }
        Self::new(vertices, self.faces.clone())
    }

    /// Applies `x -> rotation * x + translation` to every vertex.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Vec3) -> Result<Self> {
        self.with_vertices(self.vertices.iter().map(|v| rotation * v + translation).collect())
    }

    /// Concatenates two meshes, offsetting the second one's indices.
    pub fn merged(&self, other: &TriangleMesh) -> Result<Self> {
        let offset = self.vertices.len() as u32;
        let mut vertices = self.vertices.clone();
        vertices.extend_from_slice(&other.vertices);
        let mut faces = self.faces.clone();
        faces.extend(other.faces.iter().map(|f| f.map(|i| i + offset)));
        Self::new(vertices, faces)
    }

    /// Connected components over face connectivity; isolated vertices form
    /// their own components. Returns a component id per vertex.
    pub fn connected_components(&self) -> (usize, Vec<usize>) {
        let n = self.vertices.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2])] {
                let ra = find(&mut parent, a as usize);
                let rb = find(&mut parent, b as usize);
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
        let mut ids = vec![usize::MAX; n];
        let mut remap = HashMap::new();
        for v in 0..n {
            let root = find(&mut parent, v);
            let next = remap.len();
            ids[v] = *remap.entry(root).or_insert(next);
        }
        (remap.len(), ids)
    }

    /// Vertex one-ring neighbours (sorted, unique).
    pub fn vertex_neighbors(&self) -> Vec<Vec<u32>> {
        let mut rings = vec![Vec::new(); self.vertices.len()];
        for f in &self.faces {
            for k in 0..3 {
                let a = f[k];
                rings[a as usize].push(f[(k + 1) % 3]);
                rings[a as usize].push(f[(k + 2) % 3]);
            }
        }
        for ring in &mut rings {
            ring.sort_unstable();
            ring.dedup();
        }
        rings
    }
}

fn triangle_area(vertices: &[Vec3], f: &[u32; 3]) -> f64 {
    let a = vertices[f[0] as usize];
    let b = vertices[f[1] as usize];
    let c = vertices[f[2] as usize];
    0.5 * (b - a).cross(&(c - a)).norm()
}

fn vertex_face_adjacency(n: usize, faces: &[[u32; 3]]) -> Vec<Vec<u32>> {
    let mut adjacency = vec![Vec::new(); n];
    for (fi, f) in faces.iter().enumerate() {
        for &v in f {
            adjacency[v as usize].push(fi as u32);
        }
    }
    adjacency
}

/// Interior angle of a triangle at corner `corner` (0, 1 or 2).
pub(crate) fn corner_angle(tri: &[Vec3; 3], corner: usize) -> f64 {
    let p = tri[corner];
    let e1 = tri[(corner + 1) % 3] - p;
    let e2 = tri[(corner + 2) % 3] - p;
    e1.cross(&e2).norm().atan2(e1.dot(&e2))
}

/// Angle-weighted vertex normals: each incident face contributes its unit
/// normal scaled by the face's interior angle at the vertex.
///
/// Returns the normals and the list of isolated vertices (zero normal).
pub fn compute_vertex_normals(
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    vertex_faces: &[Vec<u32>],
) -> (Vec<Vec3>, Vec<u32>) {
    let mut normals = vec![Vec3::zeros(); vertices.len()];
    for f in faces {
        let tri = [
            vertices[f[0] as usize],
            vertices[f[1] as usize],
            vertices[f[2] as usize],
        ];
        let n = (tri[1] - tri[0]).cross(&(tri[2] - tri[0])).normalize();
        for (corner, &v) in f.iter().enumerate() {
            normals[v as usize] += n * corner_angle(&tri, corner);
        }
    }
    let mut isolated = Vec::new();
    for (v, n) in normals.iter_mut().enumerate() {
        if vertex_faces[v].is_empty() {
            isolated.push(v as u32);
            *n = Vec3::zeros();
        } else {
            let len = n.norm();
            if len > 0.0 {
                *n /= len;
            }
        }
    }
    (normals, isolated)
}

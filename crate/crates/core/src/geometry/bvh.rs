use super::{distance_squared, Aabb, TriangleMesh, Vec3};

const LEAF_TRIANGLES: usize = 4;
const BARY_TOLERANCE: f64 = 1e-10;
const T_EPSILON: f64 = 1e-10;

/// Nearest ray/mesh intersection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub t: f64,
    pub face: u32,
    pub barycentric: [f64; 3],
}

/// Mesh feature that owns a closest point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    Vertex(u32),
    /// Undirected edge, smaller index first.
    Edge(u32, u32),
    Face(u32),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosestPoint {
    pub point: Vec3,
    pub distance: f64,
    pub face: u32,
    pub feature: Feature,
}

#[derive(Debug, Clone)]
struct Node {
    bounds: Aabb,
    /// Leaf: `[start, start + count)` into `order`. Interior nodes have
    /// `count == 0` and use `left`/`right`.
    start: u32,
    count: u32,
    left: u32,
    right: u32,
}

/// Bounding-volume hierarchy over a mesh's triangles (median split on the
/// longest centroid axis).
#[derive(Debug, Clone)]
pub struct Bvh {
    vertices: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    order: Vec<u32>,
    nodes: Vec<Node>,
}

/// Möller–Trumbore ray/triangle test with a small barycentric tolerance so
/// rays through shared edges and vertices register. Returns the ray parameter
/// and clamped, normalised barycentric weights `(w_a, w_b, w_c)`.
pub fn ray_triangle(origin: &Vec3, dir: &Vec3, tri: &[Vec3; 3]) -> Option<(f64, [f64; 3])> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-300 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(&p) * inv;
    if !(-BARY_TOLERANCE..=1.0 + BARY_TOLERANCE).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < -BARY_TOLERANCE || u + v > 1.0 + BARY_TOLERANCE {
        return None;
    }
    let t = e2.dot(&q) * inv;
    if !(t > T_EPSILON) {
        return None;
    }
    let u = u.max(0.0);
    let v = v.max(0.0);
    let w = (1.0 - u - v).max(0.0);
    let sum = u + v + w;
    Some((t, [w / sum, u / sum, v / sum]))
}

/// Closest point on a triangle with the owning feature (Ericson's region
/// classification). `ids` are the triangle's vertex indices.
pub(crate) fn closest_on_triangle(p: &Vec3, tri: &[Vec3; 3], ids: &[u32; 3], face: u32) -> (Vec3, Feature) {
    let [a, b, c] = *tri;
    let edge = |i: usize, j: usize| Feature::Edge(ids[i].min(ids[j]), ids[i].max(ids[j]));
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (a, Feature::Vertex(ids[0]));
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (b, Feature::Vertex(ids[1]));
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, edge(0, 1));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (c, Feature::Vertex(ids[2]));
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, edge(0, 2));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, edge(1, 2));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, Feature::Face(face))
}

impl Bvh {
    pub fn build(mesh: &TriangleMesh) -> Self {
        let vertices = mesh.vertices().to_vec();
        let faces = mesh.faces().to_vec();
        let centroids: Vec<Vec3> = faces
            .iter()
            .map(|f| (vertices[f[0] as usize] + vertices[f[1] as usize] + vertices[f[2] as usize]) / 3.0)
            .collect();
        let mut order: Vec<u32> = (0..faces.len() as u32).collect();
        let mut nodes = Vec::new();
        if !faces.is_empty() {
            build_node(&vertices, &faces, &centroids, &mut order, 0, faces.len(), &mut nodes);
        }
        Self {
            vertices,
            faces,
            order,
            nodes,
        }
    }

    pub fn bounds(&self) -> Aabb {
        self.nodes.first().map(|n| n.bounds).unwrap_or_else(Aabb::empty)
    }

    fn triangle(&self, f: u32) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f as usize];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    /// Nearest intersection with positive ray parameter. `direction` need not
    /// be unit length; `t` is measured in multiples of it. Equal-`t` hits
    /// resolve to the lower face index.
    pub fn raycast(&self, origin: &Vec3, direction: &Vec3) -> Option<RayHit> {
        if self.nodes.is_empty() || direction.norm_squared() == 0.0 {
            return None;
        }
        let inv = Vec3::new(1.0 / direction.x, 1.0 / direction.y, 1.0 / direction.z);
        let mut best: Option<RayHit> = None;
        let mut stack = vec![0u32];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id as usize];
            let t_max = best.map_or(f64::INFINITY, |b| b.t);
            if node.bounds.ray_interval(origin, &inv, 0.0, t_max).is_none() {
                continue;
            }
            if node.count > 0 {
                for &f in &self.order[node.start as usize..(node.start + node.count) as usize] {
                    if let Some((t, bary)) = ray_triangle(origin, direction, &self.triangle(f)) {
                        let better = match best {
                            None => true,
                            Some(b) => t < b.t || (t == b.t && f < b.face),
                        };
                        if better {
                            best = Some(RayHit {
                                t,
                                face: f,
                                barycentric: bary,
                            });
                        }
                    }
                }
            } else {
                stack.push(node.right);
                stack.push(node.left);
            }
        }
        best
    }

    /// Closest surface point to `p`.
    pub fn closest_point(&self, p: &Vec3) -> Option<ClosestPoint> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best: Option<(f64, Vec3, u32, Feature)> = None;
        let mut stack = vec![0u32];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id as usize];
            let box_d2 = node.bounds.distance_squared(p);
            if let Some((bd, ..)) = best {
                if box_d2 > bd {
                    continue;
                }
            }
            if node.count > 0 {
                for &f in &self.order[node.start as usize..(node.start + node.count) as usize] {
                    let (q, feature) = closest_on_triangle(p, &self.triangle(f), &self.faces[f as usize], f);
                    let d2 = distance_squared(p, &q);
                    let better = match best {
                        None => true,
                        Some((bd, _, bf, _)) => d2 < bd || (d2 == bd && f < bf),
                    };
                    if better {
                        best = Some((d2, q, f, feature));
                    }
                }
            } else {
                let l = &self.nodes[node.left as usize];
                let r = &self.nodes[node.right as usize];
                // Visit the nearer child first (pushed last).
                if l.bounds.distance_squared(p) <= r.bounds.distance_squared(p) {
                    stack.push(node.right);
                    stack.push(node.left);
                } else {
                    stack.push(node.left);
                    stack.push(node.right);
                }
            }
        }
        best.map(|(d2, point, face, feature)| ClosestPoint {
            point,
            distance: d2.sqrt(),
            face,
            feature,
        })
    }
}

fn build_node(
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    centroids: &[Vec3],
    order: &mut [u32],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> u32 {
    let mut bounds = Aabb::empty();
    for &f in &order[start..end] {
        for &v in &faces[f as usize] {
            bounds.grow(&vertices[v as usize]);
        }
    }
    let id = nodes.len() as u32;
    nodes.push(Node {
        bounds,
        start: start as u32,
        count: (end - start) as u32,
        left: 0,
        right: 0,
    });
    if end - start <= LEAF_TRIANGLES {
        return id;
    }
    let cbounds = Aabb::from_points(order[start..end].iter().map(|&f| &centroids[f as usize]));
    let axis = cbounds.longest_axis();
    let mid = (start + end) / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
        centroids[a as usize][axis]
            .total_cmp(&centroids[b as usize][axis])
            .then(a.cmp(&b))
    });
    let left = build_node(vertices, faces, centroids, order, start, mid, nodes);
    let right = build_node(vertices, faces, centroids, order, mid, end, nodes);
    let node = &mut nodes[id as usize];
    node.count = 0;
    node.left = left;
    node.right = right;
    id
}

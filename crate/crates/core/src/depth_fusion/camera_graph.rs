//! Camera-triplet selection by ball pivoting over camera centres.

use std::collections::{BTreeSet, HashMap, VecDeque};

use crate::geometry::{distance_squared, Vec3};

/// Three distinct view indices forming one triangle of the camera graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CameraTriplet(pub [usize; 3]);

impl CameraTriplet {
    /// The three (target, reference, reference) role assignments.
    pub fn roles(&self) -> [(usize, usize, usize); 3] {
        let [a, b, c] = self.0;
        [(a, b, c), (b, c, a), (c, a, b)]
    }

    fn key(&self) -> [usize; 3] {
        let mut k = self.0;
        k.sort_unstable();
        k
    }
}

/// Smallest distance between two distinct camera centres.
pub fn min_pairwise_distance(centers: &[Vec3]) -> Option<f64> {
    let mut best = f64::INFINITY;
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            best = best.min(distance_squared(&centers[i], &centers[j]));
        }
    }
    best.is_finite().then(|| best.sqrt())
}

/// Centre of the radius-`rho` ball touching `a`, `b`, `c` on the side of
/// the triangle normal `(b-a)×(c-a)`.
fn ball_center(a: &Vec3, b: &Vec3, c: &Vec3, rho: f64) -> Option<Vec3> {
    let ab = b - a;
    let ac = c - a;
    let n = ab.cross(&ac);
    let n2 = n.norm_squared();
    let scale = ab.norm_squared().max(ac.norm_squared());
    if n2 <= 1e-18 * scale * scale {
        return None;
    }
    let circ = a + (n.cross(&ab) * ac.norm_squared() + ac.cross(&n) * ab.norm_squared()) / (2.0 * n2);
    let r2 = (circ - a).norm_squared();
    let h2 = rho * rho - r2;
    if h2 < -1e-12 * rho * rho {
        return None;
    }
    Some(circ + n / n2.sqrt() * h2.max(0.0).sqrt())
}

struct Pivoter<'a> {
    points: &'a [Vec3],
    rho: f64,
    tol: f64,
    used: Vec<bool>,
    edge_faces: HashMap<(usize, usize), u8>,
    keys: BTreeSet<[usize; 3]>,
    triangles: Vec<CameraTriplet>,
    front: VecDeque<(usize, usize, usize, Vec3)>,
}

impl<'a> Pivoter<'a> {
    fn ball_is_empty(&self, center: &Vec3, tri: [usize; 3]) -> bool {
        let limit = (self.rho - self.tol).powi(2);
        self.points
            .iter()
            .enumerate()
            .all(|(i, p)| tri.contains(&i) || distance_squared(p, center) >= limit)
    }

    fn edge_count(&self, a: usize, b: usize) -> u8 {
        *self.edge_faces.get(&(a.min(b), a.max(b))).unwrap_or(&0)
    }

    fn can_add(&self, tri: [usize; 3]) -> bool {
        let t = CameraTriplet(tri);
        !self.keys.contains(&t.key()) && (0..3).all(|e| self.edge_count(tri[e], tri[(e + 1) % 3]) < 2)
    }

    fn add(&mut self, tri: [usize; 3], center: Vec3) {
        let t = CameraTriplet(tri);
        self.keys.insert(t.key());
        self.triangles.push(t);
        for e in 0..3 {
            let (a, b) = (tri[e], tri[(e + 1) % 3]);
            *self.edge_faces.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            self.used[a] = true;
            self.front.push_back((a, b, tri[(e + 2) % 3], center));
        }
    }

    fn find_seed(&self, start: usize) -> Option<([usize; 3], Vec3)> {
        let p = &self.points[start];
        let reach = (2.0 * self.rho).powi(2);
        let mut near: Vec<usize> = (0..self.points.len())
            .filter(|&i| i != start && distance_squared(p, &self.points[i]) <= reach)
            .collect();
        near.sort_by(|&a, &b| {
            distance_squared(p, &self.points[a])
                .total_cmp(&distance_squared(p, &self.points[b]))
                .then(a.cmp(&b))
        });
        for (x, &j) in near.iter().enumerate() {
            for &k in &near[x + 1..] {
                for tri in [[start, j, k], [start, k, j]] {
                    let [a, b, c] = tri.map(|i| self.points[i]);
                    if let Some(center) = ball_center(&a, &b, &c, self.rho) {
                        if self.can_add(tri) && self.ball_is_empty(&center, tri) {
                            return Some((tri, center));
                        }
                    }
                }
            }
        }
        None
    }

    /// Rolls the ball over edge `i→j` of a triangle whose third vertex is `k`
    /// and returns the first point it touches.
    fn pivot(&self, i: usize, j: usize, k: usize, c0: &Vec3) -> Option<(usize, Vec3)> {
        let (pi, pj) = (self.points[i], self.points[j]);
        let m = (pi + pj) * 0.5;
        let axis = (pj - pi).normalize();
        let perp = |v: Vec3| v - axis * axis.dot(&v);
        let v0 = perp(c0 - m);
        let away = -perp(self.points[k] - m);
        // Rotation sense that carries the ball centre away from `k`.
        let sense = if axis.cross(&v0).dot(&away) >= 0.0 { 1.0 } else { -1.0 };
        let reach = (2.0 * self.rho).powi(2);
        let old_normal = (pj - pi).cross(&(self.points[k] - pi)).normalize();
        let mut candidates: Vec<(f64, usize, Vec3)> = Vec::new();
        for (p, pt) in self.points.iter().enumerate() {
            if p == i || p == j || p == k || distance_squared(pt, &m) > reach {
                continue;
            }
            let Some(c) = ball_center(&pj, &pi, pt, self.rho) else {
                continue;
            };
            // Skip triangles folding back onto the current one (interior
            // dihedral under 30 degrees).
            let new_normal = (pi - pj).cross(&(pt - pj)).normalize();
            if old_normal.dot(&new_normal) < -(30f64.to_radians().cos()) {
                continue;
            }
            let v = perp(c - m);
            let mut theta = (sense * axis.dot(&v0.cross(&v))).atan2(v0.dot(&v));
            if theta.abs() < 1e-9 {
                // Co-spherical with the current ball: reachable only across
                // the edge.
                if perp(pt - m).dot(&away) <= 0.0 {
                    continue;
                }
                theta = 0.0;
            } else if theta < 0.0 {
                theta += std::f64::consts::TAU;
            }
            candidates.push((theta, p, c));
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        candidates
            .into_iter()
            .find(|&(_, p, c)| self.ball_is_empty(&c, [j, i, p]))
            .map(|(_, p, c)| (p, c))
    }

    fn run(mut self) -> Vec<CameraTriplet> {
        let n = self.points.len();
        let mut next_seed = 0;
        loop {
            while let Some((i, j, k, c)) = self.front.pop_front() {
                if self.edge_count(i, j) >= 2 {
                    continue;
                }
                if let Some((p, center)) = self.pivot(i, j, k, &c) {
                    let tri = [j, i, p];
                    if self.can_add(tri) {
                        self.add(tri, center);
                    }
                }
            }
            while next_seed < n && self.used[next_seed] {
                next_seed += 1;
            }
            if next_seed >= n {
                break;
            }
            match self.find_seed(next_seed) {
                Some((tri, center)) => self.add(tri, center),
                None => next_seed += 1,
            }
        }
        self.triangles
    }
}

/// Ball-pivoting triangulation of camera centres with pivot radius
/// `3 × (minimum pairwise centre distance)`.
///
/// Deterministic: seeds are tried in index order, the pivot front is FIFO,
/// and equal pivot angles resolve to the lower point index. Collinear or
/// coincident centres produce no triangles.
pub fn build_camera_graph(centers: &[Vec3]) -> Vec<CameraTriplet> {
    if centers.len() < 3 {
        log::warn!("camera graph needs at least 3 cameras, got {}", centers.len());
        return Vec::new();
    }
    let d = min_pairwise_distance(centers).unwrap();
    if d <= 0.0 {
        log::warn!("coincident camera centres; camera graph is empty");
        return Vec::new();
    }
    let triangles = ball_pivot(centers, 3.0 * d);
    if triangles.is_empty() {
        log::warn!("camera centres are collinear; no triplets");
    }
    triangles
}

/// Ball pivoting with an explicit radius.
pub fn ball_pivot(points: &[Vec3], rho: f64) -> Vec<CameraTriplet> {
    Pivoter {
        points,
        rho,
        tol: 1e-9 * rho,
        used: vec![false; points.len()],
        edge_faces: HashMap::new(),
        keys: BTreeSet::new(),
        triangles: Vec::new(),
        front: VecDeque::new(),
    }
    .run()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equilateral_gives_one_triplet() {
        let pts = [
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.5, 3f64.sqrt() / 2.0, 0.0),
        ];
        assert_eq!(build_camera_graph(&pts).len(), 1);
    }

    #[test]
    fn collinear_gives_none() {
        let pts: Vec<Vec3> = (0..3).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        assert!(build_camera_graph(&pts).is_empty());
    }

    #[test]
    fn ball_center_is_equidistant() {
        let (a, b, c) = (
            Vec3::new(0.1, 0.2, 0.0),
            Vec3::new(1.0, -0.3, 0.2),
            Vec3::new(0.4, 0.9, -0.1),
        );
        let o = ball_center(&a, &b, &c, 2.0).unwrap();
        for p in [a, b, c] {
            assert!(((o - p).norm() - 2.0).abs() < 1e-12);
        }
        assert!((o - a).dot(&(b - a).cross(&(c - a))) > 0.0);
        assert!(ball_center(&a, &b, &c, 0.1).is_none());
    }
}

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{distance_squared, Aabb, Vec3};
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 8;

/// One k-nearest-neighbour result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: u32,
        end: u32,
    },
    Split {
        axis: u8,
        value: f64,
        left: u32,
        right: u32,
    },
}

/// Static kd-tree over 3D points.
///
/// Results are sorted by distance with ties broken by the lower point index,
/// which makes queries reproducible and comparable against an exhaustive scan.
#[derive(Debug, Clone)]
pub struct KnnIndex {
    points: Vec<Vec3>,
    order: Vec<u32>,
    nodes: Vec<Node>,
}

#[derive(PartialEq)]
struct Candidate {
    dist2: f64,
    index: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl KnnIndex {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyPointSet);
        }
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::new();
        build(&points, &mut order, 0, points.len(), &mut nodes);
        Ok(Self { points, order, nodes })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The `min(k, n)` nearest points, nearest first.
    pub fn query(&self, query: &Vec3, k: usize) -> Vec<Neighbor> {
        let k = k.max(1).min(self.points.len());
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter()
            .map(|c| Neighbor {
                index: c.index as usize,
                distance: c.dist2.sqrt(),
            })
            .collect()
    }

    fn search(&self, node: usize, q: &Vec3, k: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start as usize..end as usize] {
                    let cand = Candidate {
                        dist2: distance_squared(q, &self.points[i as usize]),
                        index: i,
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis as usize] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near as usize, q, k, heap);
                // Equal plane distance may still hide a lower-index tie.
                if heap.len() < k || diff * diff <= heap.peek().expect("nonempty").dist2 {
                    self.search(far as usize, q, k, heap);
                }
            }
        }
    }
}

fn build(points: &[Vec3], order: &mut [u32], start: usize, end: usize, nodes: &mut Vec<Node>) -> u32 {
    let id = nodes.len() as u32;
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: start as u32,
            end: end as u32,
        });
        return id;
    }
    let bounds = Aabb::from_points(order[start..end].iter().map(|&i| &points[i as usize]));
    let axis = bounds.longest_axis();
    let mid = (start + end) / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
        points[a as usize][axis].total_cmp(&points[b as usize][axis])
    });
    let value = points[order[mid] as usize][axis];
    nodes.push(Node::Leaf { start: 0, end: 0 });
    // Points equal to the split value may sit on either side; the search
    // visits both children whenever the plane is within the current radius.
    let left = build(points, order, start, mid, nodes);
    let right = build(points, order, mid, end, nodes);
    nodes[id as usize] = Node::Split {
        axis: axis as u8,
        value,
        left,
        right,
    };
    id
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(points: &[Vec3], q: &Vec3, k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, (p - q).norm_squared()))
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all.into_iter().map(|(i, d)| (i, d.sqrt())).collect()
    }

    #[test]
    fn empty_set_is_error() {
        assert!(matches!(KnnIndex::new(vec![]), Err(Error::EmptyPointSet)));
    }

    #[test]
    fn stored_point_comes_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vec3> = (0..100).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let index = KnnIndex::new(pts.clone()).unwrap();
        let res = index.query(&pts[42], 3);
        assert_eq!(res[0].index, 42);
        assert_eq!(res[0].distance, 0.0);
    }

    #[test]
    fn k_larger_than_n_returns_all() {
        let pts = vec![Vec3::zeros(), Vec3::x(), Vec3::y()];
        let index = KnnIndex::new(pts).unwrap();
        assert_eq!(index.query(&Vec3::zeros(), 10).len(), 3);
    }

    #[test]
    fn ties_prefer_lower_index() {
        // Four points on a circle around the query, duplicated coordinates.
        let pts = vec![Vec3::x(), -Vec3::x(), Vec3::y(), -Vec3::y(), Vec3::x()];
        let index = KnnIndex::new(pts).unwrap();
        let ids: Vec<usize> = index.query(&Vec3::zeros(), 5).iter().map(|n| n.index).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Vec3> = (0..1000).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let index = KnnIndex::new(pts.clone()).unwrap();
        for _ in 0..100 {
            let q = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            let ours: Vec<(usize, f64)> = index.query(&q, 8).iter().map(|n| (n.index, n.distance)).collect();
            let oracle = brute_force(&pts, &q, 8);
            assert_eq!(ours.len(), oracle.len());
            for (a, b) in ours.iter().zip(&oracle) {
                assert_eq!(a.0, b.0);
                assert!((a.1 - b.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grid_points_with_many_ties() {
        let mut pts = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                for k in 0..6 {
                    pts.push(Vec3::new(i as f64, j as f64, k as f64));
                }
            }
        }
        let index = KnnIndex::new(pts.clone()).unwrap();
        for q in [
            Vec3::new(2.0, 2.0, 2.0),
            Vec3::new(2.5, 2.5, 2.5),
            Vec3::new(0.5, 3.0, 1.5),
        ] {
            let ours: Vec<usize> = index.query(&q, 12).iter().map(|n| n.index).collect();
            let oracle: Vec<usize> = brute_force(&pts, &q, 12).iter().map(|n| n.0).collect();
            assert_eq!(ours, oracle);
        }
    }
}

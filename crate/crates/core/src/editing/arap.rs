//! As-rigid-as-possible deformation with clamped cotangent weights.

use nalgebra::{Matrix3, Rotation3};

use super::sparse::{solve_pcg, CsrMatrix};
use super::HandleConstraints;
use crate::error::{Error, Result};
use crate::geometry::{TriangleMesh, Vec3};

pub const DEFAULT_ITERATIONS: usize = 10;
const SOLVER_TOLERANCE: f64 = 1e-13;

/// Symmetric per-edge cotangent weights `½(cot α + cot β)`, clamped at 0.
/// Returns one adjacency list of `(neighbour, weight)` per vertex.
pub fn cotangent_weights(mesh: &TriangleMesh) -> Vec<Vec<(usize, f64)>> {
    let n = mesh.vertex_count();
    let mut acc: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let v = mesh.vertices();
    for f in mesh.faces() {
        for k in 0..3 {
            let (a, b, c) = (f[k] as usize, f[(k + 1) % 3] as usize, f[(k + 2) % 3] as usize);
            let (ea, eb) = (v[a] - v[c], v[b] - v[c]);
            let cross = ea.cross(&eb).norm();
            let cot = if cross > 0.0 { ea.dot(&eb) / cross } else { 0.0 };
            acc[a].push((b, 0.5 * cot));
            acc[b].push((a, 0.5 * cot));
        }
    }
    for list in &mut acc {
        list.sort_by_key(|e| e.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(list.len());
        for &(j, w) in list.iter() {
            match merged.last_mut() {
                Some(last) if last.0 == j => last.1 += w,
                _ => merged.push((j, w)),
            }
        }
        merged.iter_mut().for_each(|e| e.1 = e.1.max(0.0));
        *list = merged;
    }
    acc
}

/// Outcome of [`arap_deform`].
#[derive(Debug, Clone)]
pub struct ArapResult {
    pub mesh: TriangleMesh,
    /// Energy of the initial guess followed by the energy after each
    /// iteration, each with optimal rotations for its positions.
    pub energies: Vec<f64>,
}

/// Rotation maximising `tr(R·cov)`. The SVD answer is only a starting
/// point: one-rings on smooth surfaces have two equal singular values, where
/// `V·Uᵀ` loses accuracy, so it is polished with an iterative closest-rotation
/// solve that is well conditioned there.
fn fit_rotation(cov: &Matrix3<f64>) -> Matrix3<f64> {
    if cov.iter().all(|&c| c == 0.0) {
        return Matrix3::identity();
    }
    let svd = cov.svd(true, true);
    let u = svd.u.unwrap();
    let mut v = svd.v_t.unwrap().transpose();
    let mut r = v * u.transpose();
    if r.determinant() < 0.0 {
        let smallest = (0..3)
            .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
            .unwrap();
        v.column_mut(smallest).neg_mut();
        r = v * u.transpose();
    }
    let guess = Rotation3::from_matrix_unchecked(r);
    Rotation3::from_matrix_eps(&cov.transpose(), 1e-15, 100, guess).into_inner()
}

struct Problem<'a> {
    rest: &'a [Vec3],
    weights: Vec<Vec<(usize, f64)>>,
    /// Position of each vertex among the unknowns, `None` when constrained.
    free_index: Vec<Option<usize>>,
    free: Vec<usize>,
    system: CsrMatrix,
}

impl Problem<'_> {
    fn rotations(&self, current: &[Vec3]) -> Vec<Matrix3<f64>> {
        (0..self.rest.len())
            .map(|i| {
                let mut cov = Matrix3::zeros();
                for &(j, w) in &self.weights[i] {
                    cov += w * (self.rest[i] - self.rest[j]) * (current[i] - current[j]).transpose();
                }
                fit_rotation(&cov)
            })
            .collect()
    }

    fn energy(&self, current: &[Vec3], rotations: &[Matrix3<f64>]) -> f64 {
        (0..self.rest.len())
            .map(|i| {
                self.weights[i]
                    .iter()
                    .map(|&(j, w)| {
                        let d = (current[i] - current[j]) - rotations[i] * (self.rest[i] - self.rest[j]);
                        w * d.norm_squared()
                    })
                    .sum::<f64>()
            })
            .sum()
    }

    /// Global step: solves for the free positions given rotations.
    fn solve_positions(&self, current: &mut [Vec3], rotations: &[Matrix3<f64>]) -> Result<()> {
        let m = self.free.len();
        if m == 0 {
            return Ok(());
        }
        let mut rhs = vec![[0.0f64; 3]; m];
        for (row, &i) in self.free.iter().enumerate() {
            let mut b = Vec3::zeros();
            for &(j, w) in &self.weights[i] {
                b += 0.5 * w * (rotations[i] + rotations[j]) * (self.rest[i] - self.rest[j]);
                if self.free_index[j].is_none() {
                    b += w * current[j];
                }
            }
            rhs[row] = [b.x, b.y, b.z];
        }
        for axis in 0..3 {
            let b: Vec<f64> = rhs.iter().map(|r| r[axis]).collect();
            let mut x: Vec<f64> = self.free.iter().map(|&i| current[i][axis]).collect();
            solve_pcg(&self.system, &b, &mut x, SOLVER_TOLERANCE, 20 * m + 100)?;
            for (&i, xi) in self.free.iter().zip(x) {
                current[i][axis] = xi;
            }
        }
        Ok(())
    }
}

fn check_components(mesh: &TriangleMesh, weights: &[Vec<(usize, f64)>], constrained: &[bool]) -> Result<()> {
    let n = mesh.vertex_count();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (i, list) in weights.iter().enumerate() {
        for &(j, w) in list {
            if w > 0.0 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut anchored = vec![false; n];
    for v in 0..n {
        if constrained[v] {
            let r = find(&mut parent, v);
            anchored[r] = true;
        }
    }
    for v in 0..n {
        let r = find(&mut parent, v);
        if !anchored[r] {
            return Err(Error::Deformation(format!(
                "vertex {v} lies in a component with no handle or static vertex"
            )));
        }
    }
    Ok(())
}

/// Local/global ARAP: the initial guess solves the system with identity
/// rotations, then each iteration fits per-vertex rotations and re-solves
/// the free positions with constrained vertices held at their targets.
pub fn arap_deform(mesh: &TriangleMesh, constraints: &HandleConstraints, iterations: usize) -> Result<ArapResult> {
    let n = mesh.vertex_count();
    constraints.validate(n)?;
    if constraints.handles.is_empty() && constraints.static_set.is_empty() {
        return Err(Error::Deformation("no handle or static vertices given".into()));
    }
    let rest = mesh.vertices();
    let mut current = rest.to_vec();
    let mut constrained = vec![false; n];
    for &(v, target) in &constraints.handles {
        current[v] = target;
        constrained[v] = true;
    }
    for &v in &constraints.static_set {
        constrained[v] = true;
    }
    let weights = cotangent_weights(mesh);
    check_components(mesh, &weights, &constrained)?;

    let free: Vec<usize> = (0..n).filter(|&v| !constrained[v]).collect();
    let mut free_index = vec![None; n];
    for (k, &v) in free.iter().enumerate() {
        free_index[v] = Some(k);
    }
    let mut triplets = Vec::new();
    for (row, &i) in free.iter().enumerate() {
        let mut diag = 0.0;
        for &(j, w) in &weights[i] {
            diag += w;
            if let Some(col) = free_index[j] {
                triplets.push((row, col, -w));
            }
        }
        triplets.push((row, row, diag));
    }
    let problem = Problem {
        rest,
        system: CsrMatrix::from_triplets(free.len(), triplets),
        weights,
        free_index,
        free,
    };

    problem.solve_positions(&mut current, &vec![Matrix3::identity(); n])?;
    let mut rotations = problem.rotations(&current);
    let mut energies = vec![problem.energy(&current, &rotations)];
    for it in 0..iterations {
        problem.solve_positions(&mut current, &rotations)?;
        rotations = problem.rotations(&current);
        let e = problem.energy(&current, &rotations);
        let prev = *energies.last().unwrap();
        if e > prev * (1.0 + 1e-9) + 1e-15 {
            log::warn!("ARAP energy rose from {prev:e} to {e:e} at iteration {it}");
        }
        energies.push(e);
    }
    Ok(ArapResult {
        mesh: mesh.with_vertices(current)?,
        energies,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::shapes;

    #[test]
    fn fitted_rotation_recovers_a_known_rotation() {
        let r = nalgebra::Rotation3::from_euler_angles(0.3, -1.1, 2.0).into_inner();
        let pts = [
            Vec3::new(1.0, 0.0, 0.2),
            Vec3::new(0.0, 1.0, -0.5),
            Vec3::new(0.3, 0.1, 1.0),
        ];
        let mut cov = Matrix3::zeros();
        for p in &pts {
            cov += p * (r * p).transpose();
        }
        assert!((fit_rotation(&cov) - r).norm() < 1e-12);
    }

    #[test]
    fn reflection_is_corrected() {
        let cov = Matrix3::from_diagonal(&Vec3::new(1.0, 2.0, -0.5));
        let r = fit_rotation(&cov);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flat_grid_weights_are_nonnegative_and_symmetric() {
        let w = cotangent_weights(&shapes::grid_plane(4, 4, 0.5, 0.0));
        for (i, list) in w.iter().enumerate() {
            for &(j, wij) in list {
                assert!(wij >= 0.0);
                let back = w[j].iter().find(|e| e.0 == i).unwrap().1;
                assert_eq!(wij, back);
            }
        }
    }
}

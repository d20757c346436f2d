//! Compressed sparse rows and a Jacobi-preconditioned conjugate gradient,
//! enough for the symmetric positive definite Laplacian systems of ARAP.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Square `n × n` matrix from `(row, col, value)` triplets; duplicates
    /// are summed.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|a| (a.0, a.1));
        let mut row_ptr = vec![0; n + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last = None;
        for (r, c, v) in triplets {
            assert!(r < n && c < n, "triplet ({r}, {c}) outside {n}x{n}");
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
                continue;
            }
            last = Some((r, c));
            cols.push(c);
            vals.push(v);
            row_ptr[r + 1] += 1;
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self { n, row_ptr, cols, vals }
    }

    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let span = self.row_ptr[r]..self.row_ptr[r + 1];
            *o = self.cols[span.clone()]
                .iter()
                .zip(&self.vals[span])
                .map(|(&c, v)| v * x[c])
                .sum();
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|r| {
                let span = self.row_ptr[r]..self.row_ptr[r + 1];
                self.cols[span.clone()]
                    .iter()
                    .zip(&self.vals[span])
                    .filter(|(&c, _)| c == r)
                    .map(|(_, v)| v)
                    .sum()
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `a x = b` from the initial guess in `x` until the residual norm is
/// below `tol × ‖b‖`. Returns the iteration count.
pub fn solve_pcg(a: &CsrMatrix, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> Result<usize> {
    let n = a.n;
    let diag = a.diagonal();
    if let Some(i) = diag.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::Deformation(format!(
            "system row {i} has non-positive diagonal {}; vertex has no positive-weight edges",
            diag[i]
        )));
    }
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        x.fill(0.0);
        return Ok(0);
    }
    let mut r = vec![0.0; n];
    a.mul_vec(x, &mut r);
    r.iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(ri, d)| ri / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 0..max_iter {
        if dot(&r, &r).sqrt() <= tol * bnorm {
            return Ok(it);
        }
        a.mul_vec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::Deformation(format!(
                "system is singular or indefinite (pᵀAp = {pap:e} at iteration {it})"
            )));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
            z[i] = r[i] / diag[i];
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        p.iter_mut().zip(&z).for_each(|(pi, zi)| *pi = zi + beta * *pi);
    }
    let res = dot(&r, &r).sqrt() / bnorm;
    if res <= tol {
        Ok(max_iter)
    } else {
        Err(Error::Deformation(format!(
            "conjugate gradient stalled at relative residual {res:e} after {max_iter} iterations"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_sum_and_product_matches_dense() {
        let a = CsrMatrix::from_triplets(
            3,
            vec![(0, 0, 2.0), (2, 1, 1.0), (0, 0, 1.0), (1, 2, -4.0), (2, 2, 5.0)],
        );
        let mut out = [0.0; 3];
        a.mul_vec(&[1.0, 2.0, 3.0], &mut out);
        assert_eq!(out, [3.0, -12.0, 17.0]);
        assert_eq!(a.diagonal(), vec![3.0, 0.0, 5.0]);
    }

    #[test]
    fn pcg_solves_spd_tridiagonal() {
        let n = 50;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.5));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        let a = CsrMatrix::from_triplets(n, t);
        let truth: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut b = vec![0.0; n];
        a.mul_vec(&truth, &mut b);
        let mut x = vec![0.0; n];
        solve_pcg(&a, &b, &mut x, 1e-13, 500).unwrap();
        for (xi, ti) in x.iter().zip(&truth) {
            assert!((xi - ti).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_diagonal_is_reported() {
        let a = CsrMatrix::from_triplets(2, vec![(0, 0, 1.0)]);
        let mut x = vec![0.0; 2];
        assert!(solve_pcg(&a, &[1.0, 1.0], &mut x, 1e-10, 10).is_err());
    }
}

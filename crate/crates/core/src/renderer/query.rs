use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::geometry::{KnnIndex, Vec3};
use crate::neural_mesh::{inverse_distance_weight, NeuralMesh};

/// Local description of a query point relative to its nearest vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryContext {
    pub geo_feature: Vec<f64>,
    pub app_feature: Vec<f64>,
    /// Weighted mean of `-(u_k · n_k)`; -1 straight above a flat patch, +1
    /// straight below.
    pub n_s: f64,
    /// Weighted mean of `view_dir - n_k`.
    pub n_r: Vec3,
    /// Weighted mean distance to the neighbours.
    pub d_hat: f64,
    /// Spatial SDF gradient; filled in after the geometry pass.
    pub sdf_gradient: Vec3,
}

/// Derivatives of the point-dependent geometry inputs with respect to the
/// query position.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryJacobian {
    pub n_s: Vec3,
    pub d_hat: Vec3,
    /// One gradient per geometry feature channel.
    pub geo_feature: Vec<Vec3>,
}

/// Nearest-vertex lookup over a neural mesh.
#[derive(Debug, Clone)]
pub struct VertexQuery {
    index: KnnIndex,
    k: usize,
    delta: f64,
}

impl VertexQuery {
    pub fn new(neural: &NeuralMesh, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        Ok(Self {
            index: KnnIndex::new(neural.mesh.vertices().to_vec())?,
            k,
            delta: neural.delta(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Distance to the nearest vertex and the gap between the K-th and
    /// (K+1)-th neighbour distances. The query is smooth in a ball whose
    /// radius is about half the gap.
    pub fn margins(&self, point: &Vec3) -> (f64, f64) {
        let n = self.index.query(point, self.k + 1);
        let gap = if n.len() > self.k {
            n[self.k].distance - n[self.k - 1].distance
        } else {
            f64::INFINITY
        };
        (n[0].distance, gap)
    }

    /// Builds the query context at `point`, plus its Jacobian when asked.
    pub fn interpolate(
        &self,
        neural: &NeuralMesh,
        point: &Vec3,
        view_dir: &Vec3,
        with_jacobian: bool,
    ) -> (QueryContext, Option<QueryJacobian>) {
        let neighbors = self.index.query(point, self.k);
        let normals = neural.mesh.vertex_normals();
        let verts = neural.mesh.vertices();
        let dg = neural.geometry.dim;
        let da = neural.appearance.dim;

        struct Term {
            w: f64,
            dw: Vec3,
            r: f64,
            u: Vec3,
            v: usize,
        }
        let terms: Vec<Term> = neighbors
            .iter()
            .map(|n| {
                let diff = point - verts[n.index];
                let r = n.distance;
                let u = if r > 0.0 { diff / r } else { Vec3::zeros() };
                let w = inverse_distance_weight(r, self.delta);
                let dw = if r > self.delta { -u / (r * r) } else { Vec3::zeros() };
                Term {
                    w,
                    dw,
                    r,
                    u,
                    v: n.index,
                }
            })
            .collect();
        let total: f64 = terms.iter().map(|t| t.w).sum();

        let mut geo = vec![0.0; dg];
        let mut app = vec![0.0; da];
        let mut n_s = 0.0;
        let mut n_r = Vec3::zeros();
        let mut d_hat = 0.0;
        for t in &terms {
            for (g, &f) in geo.iter_mut().zip(neural.geometry.row(t.v)) {
                *g += t.w * f as f64;
            }
            for (a, &f) in app.iter_mut().zip(neural.appearance.row(t.v)) {
                *a += t.w * f as f64;
            }
            n_s -= t.w * t.u.dot(&normals[t.v]);
            n_r += (view_dir - normals[t.v]) * t.w;
            d_hat += t.w * t.r;
        }
        geo.iter_mut().for_each(|g| *g /= total);
        app.iter_mut().for_each(|a| *a /= total);
        n_s /= total;
        n_r /= total;
        d_hat /= total;

        let jacobian = with_jacobian.then(|| {
            // d(Σ w q / Σ w) = Σ [(q_k - Q) dw_k + w_k dq_k] / Σ w
            let mut j_ns = Vec3::zeros();
            let mut j_d = Vec3::zeros();
            let mut j_geo = vec![Vec3::zeros(); dg];
            for t in &terms {
                let q_ns = -t.u.dot(&normals[t.v]);
                j_ns += t.dw * (q_ns - n_s);
                j_d += t.dw * (t.r - d_hat);
                if t.r > 0.0 {
                    let proj = (Matrix3::identity() - t.u * t.u.transpose()) / t.r;
                    j_ns -= proj * normals[t.v] * t.w;
                    j_d += t.u * t.w;
                }
                for (c, j) in j_geo.iter_mut().enumerate() {
                    *j += t.dw * (neural.geometry.row(t.v)[c] as f64 - geo[c]);
                }
            }
            QueryJacobian {
                n_s: j_ns / total,
                d_hat: j_d / total,
                geo_feature: j_geo.into_iter().map(|j| j / total).collect(),
            }
        });

        (
            QueryContext {
                geo_feature: geo,
                app_feature: app,
                n_s,
                n_r,
                d_hat,
                sdf_gradient: Vec3::zeros(),
            },
            jacobian,
        )
    }
}

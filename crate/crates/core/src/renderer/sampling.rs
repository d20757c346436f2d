use crate::geometry::{Aabb, Bvh, Vec3};

/// `n` evenly spaced values covering `[a, b]` inclusive.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (a + b)],
        _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Where along a ray the coarse samples go.
#[derive(Debug, Clone, PartialEq)]
pub enum CoarseSamples {
    /// The ray hits the mesh: samples span the band around the hit.
    Band(Vec<f64>),
    /// The ray misses the mesh but crosses the bounds.
    Bounds(Vec<f64>),
    /// Nothing to sample; the pixel is background.
    Background,
}

impl CoarseSamples {
    pub fn t_values(&self) -> &[f64] {
        match self {
            CoarseSamples::Band(t) | CoarseSamples::Bounds(t) => t,
            CoarseSamples::Background => &[],
        }
    }
}

/// Uniform samples in `[t0 − band, t0 + band]` around the first mesh hit,
/// or across `bounds` when the mesh is missed.
pub fn coarse_samples(bvh: &Bvh, bounds: &Aabb, origin: &Vec3, dir: &Vec3, band: f64, n: usize) -> CoarseSamples {
    if n < 2 {
        return CoarseSamples::Background;
    }
    let min_t = 1e-6 * band.max(1e-12);
    if let Some(hit) = bvh.raycast(origin, dir) {
        let len = dir.norm();
        let b = band / len;
        return CoarseSamples::Band(linspace((hit.t - b).max(min_t), hit.t + b, n));
    }
    let inv = Vec3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
    match bounds.ray_interval(origin, &inv, min_t, f64::INFINITY) {
        Some((near, far)) if far > near => CoarseSamples::Bounds(linspace(near, far, n)),
        _ => CoarseSamples::Background,
    }
}

/// Deterministic inverse-CDF samples from a piecewise-constant density over
/// the intervals `[t_i, t_{i+1}]` with masses `weights[i]`.
pub fn importance_samples(t: &[f64], weights: &[f64], n: usize) -> Vec<f64> {
    if t.len() < 2 || n == 0 {
        return Vec::new();
    }
    let intervals = t.len() - 1;
    let mass: Vec<f64> = (0..intervals)
        .map(|i| weights.get(i).copied().unwrap_or(0.0).max(0.0) + 1e-5)
        .collect();
    let total: f64 = mass.iter().sum();
    let mut cdf = Vec::with_capacity(intervals + 1);
    cdf.push(0.0);
    for m in &mass {
        cdf.push(cdf.last().unwrap() + m / total);
    }
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    for j in 0..n {
        let u = (j as f64 + 0.5) / n as f64;
        while i + 1 < intervals && cdf[i + 1] < u {
            i += 1;
        }
        let frac = ((u - cdf[i]) / (cdf[i + 1] - cdf[i])).clamp(0.0, 1.0);
        out.push(t[i] + frac * (t[i + 1] - t[i]));
    }
    out
}

/// Sorted union with exact duplicates removed.
pub fn merge_samples(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = a.iter().chain(b).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    all
}

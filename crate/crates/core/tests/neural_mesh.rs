#![allow(clippy::needless_range_loop)]

use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serf_core::geometry::{shapes, Bvh, CameraModel, Vec3};
use serf_core::neural_mesh::{aggregate_features, backproject_features, render_depth, FeatureMap, FeatureMatrix};

fn brute_force(points: &[Vec3], feats: &FeatureMatrix, v: &Vec3, k: usize, delta: f64) -> Vec<f64> {
    let mut order: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| ((p - v).norm_squared(), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut num = vec![0.0; feats.dim];
    let mut den = 0.0;
    for &(d2, i) in order.iter().take(k) {
        let w = 1.0 / d2.sqrt().max(delta);
        den += w;
        for (n, &f) in num.iter_mut().zip(feats.row(i)) {
            *n += w * f as f64;
        }
    }
    num.into_iter().map(|n| n / den).collect()
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|_| {
            Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
        })
        .collect()
}

#[test]
fn aggregation_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mesh = shapes::icosphere(2, 0.9);
    let pts = random_points(&mut rng, 500);
    let feats = FeatureMatrix::from_data(500, 4, (0..2000).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let delta = 1e-6 * mesh.bbox_diagonal();
    let (out, cov) = aggregate_features(&pts, &[&feats], mesh.vertices(), 8, delta, None).unwrap();
    for (v, pos) in mesh.vertices().iter().enumerate() {
        let oracle = brute_force(&pts, &feats, pos, 8, delta);
        for (a, b) in out[0].row(v).iter().zip(&oracle) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
        assert_eq!(cov[v], 8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn aggregation_invariants(seed in 0u64..1000, k in 1usize..10, angle in 0.0f64..std::f64::consts::TAU, scale in 0.5f32..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = random_points(&mut rng, 60);
        let targets = random_points(&mut rng, 20);
        let feats = FeatureMatrix::from_data(60, 3, (0..180).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (base, _) = aggregate_features(&pts, &[&feats], &targets, k, 1e-6, None).unwrap();

        // Convex hull bound over the K neighbours (per channel, all points
        // is a superset so bound by global min/max of chosen neighbours).
        for t in 0..targets.len() {
            let mut order: Vec<(f64, usize)> = pts.iter().enumerate().map(|(i, p)| ((p - targets[t]).norm_squared(), i)).collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for c in 0..3 {
                let vals: Vec<f32> = order.iter().take(k).map(|&(_, i)| feats.row(i)[c]).collect();
                let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min);
                let hi = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                prop_assert!(base[0].row(t)[c] >= lo - 1e-5 && base[0].row(t)[c] <= hi + 1e-5);
            }
        }

        // Rigid motion applied to points and targets together.
        let rot = Rotation3::from_axis_angle(&Vector3::y_axis(), angle);
        let shift = Vec3::new(0.3, -1.0, 2.0);
        let moved = |v: &Vec<Vec3>| v.iter().map(|p| rot * p + shift).collect::<Vec<_>>();
        let (rigid, _) = aggregate_features(&moved(&pts), &[&feats], &moved(&targets), k, 1e-6, None).unwrap();
        for (a, b) in rigid[0].data.iter().zip(&base[0].data) {
            prop_assert!((a - b).abs() < 1e-5);
        }

        // Linear in the features.
        let scaled = FeatureMatrix::from_data(60, 3, feats.data.iter().map(|v| v * scale).collect()).unwrap();
        let (lin, _) = aggregate_features(&pts, &[&scaled], &targets, k, 1e-6, None).unwrap();
        for (a, b) in lin[0].data.iter().zip(&base[0].data) {
            prop_assert!((a - b * scale).abs() < 1e-4);
        }
    }
}

#[test]
fn position_encoded_features_recover_positions() {
    let sphere = shapes::icosphere(3, 1.0);
    let cam = CameraModel::look_at(
        Vec3::new(0.3, 0.4, 3.0),
        Vec3::zeros(),
        Vec3::new(0.0, 1.0, 0.0),
        40.0,
        32,
        32,
    )
    .unwrap();
    let bvh = Bvh::build(&sphere);
    let depth = render_depth(&bvh, &cam);
    let mut data = Vec::new();
    for y in 0..32 {
        for x in 0..32 {
            let p = depth
                .get(x, y)
                .map(|d| cam.backproject(&CameraModel::pixel_center(x, y), d).unwrap())
                .unwrap_or_else(Vec3::zeros);
            data.extend([p.x as f32, p.y as f32, p.z as f32]);
        }
    }
    let fm = FeatureMap::new(32, 32, 3, data).unwrap();
    let pts = backproject_features(&fm, &depth, &cam, 0).unwrap();
    assert!(pts.len() > 100);
    for (p, i) in pts.positions.iter().zip(0..) {
        let f = pts.features.row(i);
        assert!((p - Vec3::new(f[0] as f64, f[1] as f64, f[2] as f64)).norm() < 1e-5);
    }
}

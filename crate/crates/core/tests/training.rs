use serf_core::autodiff::{Tape, Tensor};
use serf_core::geometry::{Bvh, MeshSdf};
use serf_core::renderer::{render_image, NetworkConfig, NetworkParams, RenderConfig, RenderScene};
use serf_core::scene_assets::{generate_synthetic_scene, SceneBundle, SyntheticSceneSpec};
use serf_core::training::{
    eikonal_deviation, fine_tune_appearance, gradient_check, history_csv, loss_color, loss_eikonal, loss_sdf,
    sample_sdf_points, train, GradientCheckCase, LossWeights, TrainConfig, TrainView,
};

fn tiny_net() -> NetworkConfig {
    NetworkConfig {
        width: 16,
        ..NetworkConfig::default()
    }
}

fn fixture() -> (SceneBundle, RenderScene, Vec<TrainView>, NetworkParams) {
    let bundle = generate_synthetic_scene(&SyntheticSceneSpec::icosphere(2, 3, 16, 1)).unwrap();
    let scene = bundle.render_scene().unwrap();
    let bvh = Bvh::build(&bundle.mesh);
    let views = bundle
        .cameras
        .iter()
        .zip(&bundle.views)
        .map(|(c, v)| TrainView::with_silhouette(c.clone(), v.image.clone(), &bvh).unwrap())
        .collect();
    let n = scene.neural();
    let params = NetworkParams::init(tiny_net(), n.appearance.dim, n.geometry.dim, 4).unwrap();
    (bundle, scene, views, params)
}

fn quick_config(iterations: usize) -> TrainConfig {
    TrainConfig {
        ray_batch: 16,
        sdf_batch: 32,
        lr: 1e-3,
        iterations,
        render: RenderConfig {
            coarse_samples: 8,
            fine_samples: 8,
            batch_rays: 8,
        },
        ..TrainConfig::default()
    }
}

#[test]
fn color_loss_is_sum_of_squares() {
    let mut tape = Tape::new();
    let pred = tape.constant(Tensor::from_vec(2, 3, vec![0.1, 0.2, 0.3, 0.9, 0.8, 0.7]));
    let gt = Tensor::from_vec(2, 3, vec![0.0, 0.2, 0.5, 1.0, 0.8, 0.7]);
    let l = loss_color(&mut tape, pred, &gt);
    let expected = 0.1f64.powi(2) + 0.2f64.powi(2) + 0.1f64.powi(2);
    assert!((tape.value(l).data[0] - expected).abs() < 1e-15);
}

#[test]
fn sdf_loss_of_zero_net_is_target_energy() {
    let mut tape = Tape::new();
    let pred = tape.constant(Tensor::from_vec(4, 1, vec![0.0; 4]));
    let l = loss_sdf(&mut tape, pred, &[0.1, -0.1, 0.1, -0.1]);
    assert!((tape.value(l).data[0] - 0.04).abs() < 1e-15);
}

#[test]
fn eikonal_loss_counts_unit_deviation() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::from_vec(
        3,
        3,
        vec![0.0, 0.0, 0.0, 0.6, 0.8, 0.0, 0.0, 2.0, 0.0],
    ));
    let l = loss_eikonal(&mut tape, g);
    // 1 for the zero gradient, 0 for the unit one, 1 for the doubled one.
    assert!((tape.value(l).data[0] - 2.0).abs() < 1e-15);
}

#[test]
fn zero_iterations_leave_params_unchanged() {
    let (_, scene, views, params) = fixture();
    let out = train(&scene, &views, params.clone(), &quick_config(0)).unwrap();
    assert_eq!(out.params, params);
    assert!(out.history.is_empty());
}

#[test]
fn training_is_deterministic_under_a_seed() {
    let (_, scene, views, params) = fixture();
    let a = train(&scene, &views, params.clone(), &quick_config(3)).unwrap();
    let b = train(&scene, &views, params.clone(), &quick_config(3)).unwrap();
    assert_eq!(a.params.to_bytes(), b.params.to_bytes());
    assert_eq!(history_csv(&a.history), history_csv(&b.history));
    assert_ne!(a.params, params);
}

#[test]
fn fine_tuning_never_touches_geometry() {
    let (_, scene, views, params) = fixture();
    let out = fine_tune_appearance(&scene, &views, params.clone(), &quick_config(3)).unwrap();
    assert_eq!(out.params.geometry, params.geometry);
    assert_eq!(out.params.log_steepness.to_bits(), params.log_steepness.to_bits());
    assert_ne!(out.params.appearance, params.appearance);
}

#[test]
fn color_loss_falls_on_a_constant_view() {
    let (bundle, scene, _, params) = fixture();
    let bvh = Bvh::build(&bundle.mesh);
    let cam = bundle.cameras[0].clone();
    let mut image = bundle.views[0].image.clone();
    for y in 0..cam.height {
        for x in 0..cam.width {
            image.set(x, y, [0.8, 0.3, 0.5]);
        }
    }
    let views = vec![TrainView::with_silhouette(cam, image, &bvh).unwrap()];
    let config = TrainConfig {
        loss_weights: LossWeights {
            color: 1.0,
            sdf: 0.0,
            eikonal: 0.0,
        },
        lr: 5e-3,
        ..quick_config(50)
    };
    let out = train(&scene, &views, params, &config).unwrap();
    let first = out.history.first().unwrap().color;
    let last = out.history.last().unwrap().color;
    assert!(last < 0.2 * first, "{first} -> {last}");
}

#[test]
fn history_csv_has_header_and_one_row_per_step() {
    let (_, scene, views, params) = fixture();
    let out = train(&scene, &views, params, &quick_config(2)).unwrap();
    let csv = history_csv(&out.history);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,l_c,l_s,l_re");
    assert_eq!(lines.len(), 3);
}

#[test]
fn sdf_samples_split_between_surface_and_box() {
    let (bundle, _, _, _) = fixture();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let pts = sample_sdf_points(&bundle.mesh, 2000, 0.0, &mut rng);
    let sdf = MeshSdf::new(&bundle.mesh);
    let on_surface = pts.iter().filter(|p| sdf.signed_distance(p).abs() < 1e-9).count();
    assert!((900..=1100).contains(&on_surface), "{on_surface}");
    let bounds = bundle.mesh.bbox().scaled(1.1);
    assert!(pts
        .iter()
        .all(|p| (0..3).all(|a| p[a] >= bounds.min[a] && p[a] <= bounds.max[a])));
}

#[test]
fn tape_gradients_match_finite_differences() {
    let (_, scene, _, params) = fixture();
    let case = GradientCheckCase::random(&scene, &params, 4, 4, 7).unwrap();
    let report = gradient_check(&scene, &params, &case, 8).unwrap();
    assert!(report.max_relative_error() < 1e-4, "{report:?}");
}

#[test]
fn eikonal_deviation_of_zero_net_is_one() {
    let (bundle, scene, _, params) = fixture();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
    let pts = sample_sdf_points(&bundle.mesh, 50, 0.05, &mut rng);
    let dev = eikonal_deviation(&scene, &params.zeroed(), &pts).unwrap();
    assert!((dev - 1.0).abs() < 1e-12);
}

#[test]
fn render_after_training_is_finite() {
    let (bundle, scene, views, params) = fixture();
    let out = train(&scene, &views, params, &quick_config(2)).unwrap();
    let img = render_image(&scene, &out.params, &bundle.cameras[1], &quick_config(0).render).unwrap();
    assert!(img.image.data.iter().all(|c| c.is_finite()));
}

#[test]
fn lr_decay_fraction_must_lie_in_unit_interval() {
    let (_, scene, views, params) = fixture();
    for bad in [0.0, -0.5, 1.5, f64::NAN] {
        let config = TrainConfig {
            final_lr_fraction: bad,
            ..quick_config(1)
        };
        assert!(train(&scene, &views, params.clone(), &config).is_err(), "{bad}");
    }
}

#[test]
fn decayed_lr_moves_params_less_than_constant_lr() {
    let (_, scene, views, params) = fixture();
    let distance = |fraction: f64| {
        let config = TrainConfig {
            final_lr_fraction: fraction,
            ..quick_config(3)
        };
        let out = train(&scene, &views, params.clone(), &config).unwrap();
        out.params
            .tensors()
            .iter()
            .zip(params.tensors())
            .flat_map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()))
            .sum::<f64>()
    };
    // Same first step, smaller later ones.
    assert!(distance(0.01) < distance(1.0));
}

//! Losses, optimiser and training loops for the renderer networks.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{Bvh, CameraModel, MeshSdf, TriangleMesh, Vec3};
use crate::imaging::{Mask, RgbImage};
use crate::renderer::{
    evaluate_on_tape, geometry_forward, plan_samples, render_rays_on_tape, sdf_spatial_gradient, sdf_values,
    NetworkParams, ParamVars, Ray, RenderConfig, RenderScene,
};

/// Σ‖pred − gt‖² over all rows; `gt` has the shape of `pred`.
pub fn loss_color(tape: &mut Tape, pred: Var, gt: &Tensor) -> Var {
    sum_squared_error(tape, pred, gt)
}

/// Σ (ŝ(h) − s(h))² over the sample set.
pub fn loss_sdf(tape: &mut Tape, pred: Var, target: &[f64]) -> Var {
    let gt = Tensor::from_vec(target.len(), 1, target.to_vec());
    sum_squared_error(tape, pred, &gt)
}

/// Σ (‖∇s‖ − 1)² over the rows of an `N × 3` gradient.
pub fn loss_eikonal(tape: &mut Tape, gradient: Var) -> Var {
    let norm = tape.row_norm(gradient);
    let dev = tape.add_scalar(norm, -1.0);
    let sq = tape.square(dev);
    tape.sum(sq)
}

fn sum_squared_error(tape: &mut Tape, pred: Var, gt: &Tensor) -> Var {
    assert_eq!(tape.shape(pred), gt.shape(), "prediction and target shapes differ");
    let gt = tape.constant(gt.clone());
    let diff = tape.sub(pred, gt);
    let sq = tape.square(diff);
    tape.sum(sq)
}

/// Relative weights of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub color: f64,
    pub sdf: f64,
    pub eikonal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            color: 1.0,
            sdf: 0.5,
            eikonal: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub ray_batch: usize,
    pub sdf_batch: usize,
    pub lr: f64,
    pub loss_weights: LossWeights,
    pub iterations: usize,
    pub seed: u64,
    /// Sampling used for the training rays; `batch_rays` is the chunk size
    /// for gradient accumulation.
    pub render: RenderConfig,
    /// Std-dev of the normal jitter for near-surface SDF samples, as a
    /// fraction of the bounding-box diagonal.
    pub surface_jitter: f64,
    /// Learning rate at the last step as a fraction of `lr`; the rate decays
    /// exponentially in between. 1 keeps it constant.
    pub final_lr_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ray_batch: 1024,
            sdf_batch: 1024,
            lr: 5e-4,
            loss_weights: LossWeights::default(),
            iterations: 1000,
            seed: 0,
            render: RenderConfig::default(),
            surface_jitter: 0.05,
            final_lr_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.loss_weights;
        let weights_ok = [w.color, w.sdf, w.eikonal].iter().all(|v| v.is_finite() && *v >= 0.0);
        if !weights_ok
            || !(self.lr > 0.0)
            || !self.lr.is_finite()
            || self.surface_jitter < 0.0
            || !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0)
        {
            return Err(Error::Config(format!("invalid training config {self:?}")));
        }
        if w.color > 0.0 && self.ray_batch == 0 {
            return Err(Error::Config("ray_batch must be positive".into()));
        }
        if (w.sdf > 0.0 || w.eikonal > 0.0) && self.sdf_batch == 0 {
            return Err(Error::Config("sdf_batch must be positive".into()));
        }
        Ok(())
    }
}

/// A posed training image and the pixels rays are drawn from.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub camera: CameraModel,
    pub image: RgbImage,
    pub foreground: Mask,
}

impl TrainView {
    pub fn new(camera: CameraModel, image: RgbImage, foreground: Mask) -> Result<Self> {
        let dims = (camera.width, camera.height);
        if (image.width, image.height) != dims || (foreground.width, foreground.height) != dims {
            return Err(Error::DimensionMismatch(format!(
                "view {}x{}, image {}x{}, mask {}x{}",
                dims.0, dims.1, image.width, image.height, foreground.width, foreground.height
            )));
        }
        Ok(Self {
            camera,
            image,
            foreground,
        })
    }

    /// Foreground taken as the pixels whose rays hit `bvh`.
    pub fn with_silhouette(camera: CameraModel, image: RgbImage, bvh: &Bvh) -> Result<Self> {
        let mask = silhouette(bvh, &camera);
        Self::new(camera, image, mask)
    }
}

/// Pixels whose centre ray hits the mesh.
pub fn silhouette(bvh: &Bvh, camera: &CameraModel) -> Mask {
    let mut mask = Mask::new(camera.width, camera.height);
    for y in 0..camera.height {
        for x in 0..camera.width {
            let (o, d) = camera.pixel_ray(x, y);
            mask.set(x, y, bvh.raycast(&o, &d).is_some());
        }
    }
    mask
}

/// Mean per-item losses of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    /// Mean squared colour error per pixel.
    pub color: f64,
    /// Mean squared SDF error per sample.
    pub sdf: f64,
    /// Mean squared Eikonal deviation per sample.
    pub eikonal: f64,
}

pub fn history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("step,l_c,l_s,l_re\n");
    for r in history {
        let _ = writeln!(out, "{},{},{},{}", r.step, r.color, r.sdf, r.eikonal);
    }
    out
}

pub fn save_history(path: &Path, history: &[LossRecord]) -> Result<()> {
    std::fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Last parameters whose losses were finite.
    pub params: NetworkParams,
    pub history: Vec<LossRecord>,
    /// Step at which a non-finite loss or gradient stopped training.
    pub diverged_at: Option<usize>,
}

impl TrainOutcome {
    /// The parameters, or a divergence error.
    pub fn into_result(self) -> Result<(NetworkParams, Vec<LossRecord>)> {
        match self.diverged_at {
            Some(step) => Err(Error::Diverged { step }),
            None => Ok((self.params, self.history)),
        }
    }
}

/// Adam moments for every trainable tensor, in [`ParamVars::ordered`] order.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &NetworkParams, lr: f64) -> Self {
        let mut sizes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
        sizes.push(1);
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Applies one update; `None` entries (frozen tensors) are left alone.
    pub fn update(&mut self, params: &mut NetworkParams, grads: &[Option<Tensor>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let mut steep = [params.log_steepness];
        let mut slots: Vec<&mut [f64]> = params
            .tensors_mut()
            .into_iter()
            .map(|t| t.data.as_mut_slice())
            .collect();
        slots.push(&mut steep);
        for (i, (slot, g)) in slots.into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            for (j, (p, &gj)) in slot.iter_mut().zip(&g.data).enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gj;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gj * gj;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        params.log_steepness = steep[0];
    }
}

/// Points for the SDF and Eikonal terms: half jittered off the surface
/// along the face normal, half uniform in the 1.1× bounding box.
pub fn sample_sdf_points(mesh: &TriangleMesh, n: usize, jitter: f64, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let areas: Vec<f64> = (0..mesh.face_count()).map(|f| mesh.face_area(f)).collect();
    let mut cdf = Vec::with_capacity(areas.len());
    let mut acc = 0.0;
    for a in &areas {
        acc += a;
        cdf.push(acc);
    }
    let diag = mesh.bbox_diagonal();
    let normal = Normal::new(0.0, (jitter * diag).max(1e-12)).unwrap();
    let bounds = mesh.bbox().scaled(1.1);
    let near = n / 2 + n % 2;
    let mut out = Vec::with_capacity(n);
    for _ in 0..near {
        let u = rng.gen::<f64>() * acc;
        let f = cdf.partition_point(|&c| c < u).min(areas.len() - 1);
        let [a, b, c] = mesh.face_vertices(f);
        let (mut r1, mut r2) = (rng.gen::<f64>(), rng.gen::<f64>());
        if r1 + r2 > 1.0 {
            r1 = 1.0 - r1;
            r2 = 1.0 - r2;
        }
        let p = a + (b - a) * r1 + (c - a) * r2;
        out.push(p + mesh.face_normal(f) * normal.sample(rng));
    }
    for _ in near..n {
        out.push(Vec3::new(
            rng.gen_range(bounds.min.x..=bounds.max.x),
            rng.gen_range(bounds.min.y..=bounds.max.y),
            rng.gen_range(bounds.min.z..=bounds.max.z),
        ));
    }
    out
}

fn random_dirs(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|_| loop {
            let v = Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
            if v.norm() > 1e-6 {
                break v.normalize();
            }
        })
        .collect()
}

/// Everything a step needs besides the parameters.
pub struct Trainer<'a> {
    scene: &'a RenderScene,
    sdf: MeshSdf,
    views: &'a [TrainView],
    foreground: Vec<Vec<u32>>,
    config: TrainConfig,
    train_geometry: bool,
    train_appearance: bool,
}

/// Summed (not averaged) losses of one step and the accumulated gradients.
struct StepResult {
    color: f64,
    sdf: f64,
    eikonal: f64,
    rays: usize,
    points: usize,
    grads: Vec<Option<Tensor>>,
}

fn accumulate(acc: &mut [Option<Tensor>], grads: &mut Gradients, vars: &[Var]) {
    for (slot, &v) in acc.iter_mut().zip(vars) {
        if let Some(g) = grads.take(v) {
            match slot {
                Some(t) => t.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
    }
}

impl<'a> Trainer<'a> {
    pub fn new(scene: &'a RenderScene, views: &'a [TrainView], config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let foreground: Vec<Vec<u32>> = views
            .iter()
            .map(|v| {
                (0..v.foreground.data.len() as u32)
                    .filter(|&i| v.foreground.data[i as usize])
                    .collect()
            })
            .collect();
        if config.loss_weights.color > 0.0 && foreground.iter().all(|f| f.is_empty()) {
            return Err(Error::Config("no foreground pixels to train on".into()));
        }
        Ok(Self {
            scene,
            sdf: MeshSdf::new(&scene.neural().mesh),
            views,
            foreground,
            config,
            train_geometry: true,
            train_appearance: true,
        })
    }

    /// Freezes the geometry network and the steepness.
    pub fn appearance_only(mut self) -> Self {
        self.train_geometry = false;
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn sample_rays(&self, rng: &mut ChaCha8Rng) -> (Vec<Ray>, Tensor) {
        let n = self.config.ray_batch;
        let mut rays = Vec::with_capacity(n);
        let mut gt = Vec::with_capacity(3 * n);
        let usable: Vec<usize> = (0..self.views.len())
            .filter(|&i| !self.foreground[i].is_empty())
            .collect();
        let vi = usable[rng.gen_range(0..usable.len())];
        let view = &self.views[vi];
        let fg = &self.foreground[vi];
        for _ in 0..n {
            let p = fg[rng.gen_range(0..fg.len())];
            let (x, y) = (p % view.camera.width, p / view.camera.width);
            let (origin, dir) = view.camera.pixel_ray(x, y);
            rays.push(Ray { origin, dir });
            gt.extend(view.image.get(x, y).iter().map(|&c| c as f64));
        }
        (rays, Tensor::from_vec(n, 3, gt))
    }

    fn step_gradients(&self, params: &NetworkParams, rng: &mut ChaCha8Rng) -> Result<StepResult> {
        let cfg = &self.config;
        let w = cfg.loss_weights;
        let ncfg = &params.config;
        let nvars = params.tensors().len() + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; nvars];
        let mut out = StepResult {
            color: 0.0,
            sdf: 0.0,
            eikonal: 0.0,
            rays: 0,
            points: 0,
            grads: Vec::new(),
        };

        if w.color > 0.0 {
            let (rays, gt) = self.sample_rays(rng);
            let chunk = cfg.render.batch_rays.max(1);
            for (c, ray_chunk) in rays.chunks(chunk).enumerate() {
                let samples = plan_samples(self.scene, params, ray_chunk, &cfg.render)?;
                let mut tape = Tape::new();
                let vars = ParamVars::on_tape(&mut tape, params, self.train_geometry, self.train_appearance);
                let Some(eval) = render_rays_on_tape(&mut tape, self.scene, &vars, ncfg, ray_chunk, &samples)? else {
                    continue;
                };
                let rows: Vec<f64> = eval
                    .ray_index
                    .iter()
                    .flat_map(|&r| gt.row(c * chunk + r).to_vec())
                    .collect();
                let target = Tensor::from_vec(eval.ray_index.len(), 3, rows);
                let lc = loss_color(&mut tape, eval.pixels, &target);
                out.color += tape.value(lc).data[0];
                out.rays += eval.ray_index.len();
                let total = tape.scale(lc, w.color);
                let mut g = tape.backward(total);
                accumulate(&mut grads, &mut g, &vars.ordered());
            }
        }

        if self.train_geometry && (w.sdf > 0.0 || w.eikonal > 0.0) {
            let points = sample_sdf_points(&self.scene.neural().mesh, cfg.sdf_batch, cfg.surface_jitter, rng);
            let dirs = random_dirs(points.len(), rng);
            let targets: Vec<f64> = points.iter().map(|p| self.sdf.signed_distance(p)).collect();
            let chunk = cfg.render.batch_rays.max(1) * 8;
            for start in (0..points.len()).step_by(chunk) {
                let end = (start + chunk).min(points.len());
                let enc = self
                    .scene
                    .encode_points(ncfg, &points[start..end], &dirs[start..end], w.eikonal > 0.0);
                let mut tape = Tape::new();
                let vars = ParamVars::on_tape(&mut tape, params, true, false);
                let eval = evaluate_on_tape(&mut tape, &vars, ncfg, &enc, false)?;
                let ls = loss_sdf(&mut tape, eval.sdf, &targets[start..end]);
                out.sdf += tape.value(ls).data[0];
                let mut total = tape.scale(ls, w.sdf);
                if let Some(grad) = eval.gradient {
                    let le = loss_eikonal(&mut tape, grad);
                    out.eikonal += tape.value(le).data[0];
                    let le = tape.scale(le, w.eikonal);
                    total = tape.add(total, le);
                }
                out.points += end - start;
                let mut g = tape.backward(total);
                accumulate(&mut grads, &mut g, &vars.ordered());
            }
        }
        out.grads = grads;
        Ok(out)
    }

    /// Runs `config.iterations` Adam steps from `params`. A non-finite loss
    /// or gradient stops training and returns the last good parameters.
    pub fn run(&self, mut params: NetworkParams) -> Result<TrainOutcome> {
        self.check_dims(&params)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut adam = Adam::new(&params, self.config.lr);
        let mut history = Vec::with_capacity(self.config.iterations);
        for step in 0..self.config.iterations {
            let result = match self.step_gradients(&params, &mut rng) {
                Ok(r) => r,
                Err(Error::NumericalFault { layer }) => {
                    log::warn!("numerical fault in {layer} at step {step}; stopping");
                    return Ok(TrainOutcome {
                        params,
                        history,
                        diverged_at: Some(step),
                    });
                }
                Err(e) => return Err(e),
            };
            let finite = [result.color, result.sdf, result.eikonal].iter().all(|v| v.is_finite())
                && result.grads.iter().flatten().all(|g| g.is_finite());
            if !finite {
                log::warn!("non-finite loss at step {step}; stopping");
                return Ok(TrainOutcome {
                    params,
                    history,
                    diverged_at: Some(step),
                });
            }
            let progress = step as f64 / self.config.iterations.saturating_sub(1).max(1) as f64;
            adam.set_lr(self.config.lr * self.config.final_lr_fraction.powf(progress));
            adam.update(&mut params, &result.grads);
            history.push(LossRecord {
                step,
                color: result.color / result.rays.max(1) as f64,
                sdf: result.sdf / result.points.max(1) as f64,
                eikonal: result.eikonal / result.points.max(1) as f64,
            });
            if step % 100 == 0 {
                log::debug!("step {step}: {:?}", history.last().unwrap());
            }
        }
        Ok(TrainOutcome {
            params,
            history,
            diverged_at: None,
        })
    }

    fn check_dims(&self, params: &NetworkParams) -> Result<()> {
        let n = self.scene.neural();
        if params.geometry_feature_dim() != n.geometry.dim || params.appearance_feature_dim() != n.appearance.dim {
            return Err(Error::DimensionMismatch(format!(
                "network expects features ({}, {}), mesh has ({}, {})",
                params.appearance_feature_dim(),
                params.geometry_feature_dim(),
                n.appearance.dim,
                n.geometry.dim
            )));
        }
        Ok(())
    }
}

/// Trains all parameters on posed views.
pub fn train(
    scene: &RenderScene,
    views: &[TrainView],
    params: NetworkParams,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    Trainer::new(scene, views, *config)?.run(params)
}

/// Colour-only training of the appearance network with geometry frozen.
pub fn fine_tune_appearance(
    scene: &RenderScene,
    views: &[TrainView],
    params: NetworkParams,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let config = TrainConfig {
        loss_weights: LossWeights {
            sdf: 0.0,
            eikonal: 0.0,
            ..config.loss_weights
        },
        ..*config
    };
    Trainer::new(scene, views, config)?.appearance_only().run(params)
}

/// Mean |‖∇s‖ − 1| over `points`.
pub fn eikonal_deviation(scene: &RenderScene, params: &NetworkParams, points: &[Vec3]) -> Result<f64> {
    if points.is_empty() {
        return Ok(0.0);
    }
    let dirs = vec![Vec3::new(0.0, 0.0, 1.0); points.len()];
    let mut total = 0.0;
    for (pts, ds) in points.chunks(1024).zip(dirs.chunks(1024)) {
        let enc = scene.encode_points(&params.config, pts, ds, true);
        let mut tape = Tape::new();
        let vars = ParamVars::on_tape(&mut tape, params, false, false);
        let eval = evaluate_on_tape(&mut tape, &vars, &params.config, &enc, false)?;
        let g = tape.value(eval.gradient.unwrap());
        total += (0..g.rows)
            .map(|r| (Vec3::from_row_slice(g.row(r)).norm() - 1.0).abs())
            .sum::<f64>();
    }
    Ok(total / points.len() as f64)
}

/// Fixed inputs for a gradient check: rays with frozen sample positions and
/// SDF samples with targets.
#[derive(Debug, Clone)]
pub struct GradientCheckCase {
    pub rays: Vec<Ray>,
    pub samples: Vec<Vec<f64>>,
    pub colors: Tensor,
    pub sdf_points: Vec<Vec3>,
    pub sdf_targets: Vec<f64>,
    pub weights: LossWeights,
}

impl GradientCheckCase {
    /// Random rays at the mesh (band samples) and random SDF points.
    pub fn random(scene: &RenderScene, params: &NetworkParams, rays: usize, points: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mesh = &scene.neural().mesh;
        let center = mesh.bbox().center();
        let radius = mesh.bbox_diagonal();
        let render = RenderConfig {
            coarse_samples: 8,
            fine_samples: 8,
            batch_rays: rays.max(1),
        };
        // Interval opacity has a kink where consecutive samples share an SDF
        // value; rays with such a pair inside the stencil are redrawn.
        let mut ray_list = Vec::with_capacity(rays);
        let mut samples = Vec::with_capacity(rays);
        for _ in 0..MAX_REDRAWS {
            if ray_list.len() == rays {
                break;
            }
            let want = rays - ray_list.len();
            let targets = sample_sdf_points(mesh, want, 0.0, &mut rng);
            let origins = random_dirs(want, &mut rng);
            let candidates: Vec<Ray> = origins
                .iter()
                .zip(&targets)
                .map(|(o, t)| {
                    let origin = center + o * radius;
                    Ray {
                        origin,
                        dir: (t - origin).normalize(),
                    }
                })
                .collect();
            for (ray, t) in candidates
                .iter()
                .zip(plan_samples(scene, params, &candidates, &render)?)
            {
                let points: Vec<Vec3> = t.iter().map(|&t| ray.origin + ray.dir * t).collect();
                let s = sdf_values(scene, params, &points, &vec![ray.dir; points.len()])?;
                if s.windows(2).all(|w| (w[0] - w[1]).abs() > KINK_MARGIN) {
                    ray_list.push(*ray);
                    samples.push(t);
                }
            }
        }
        if ray_list.len() < rays {
            return Err(Error::Config(format!(
                "found only {} of {rays} gradient-check rays away from kinks",
                ray_list.len()
            )));
        }
        let colors = Tensor::from_vec(rays, 3, (0..3 * rays).map(|_| rng.gen::<f64>()).collect());
        let sdf = MeshSdf::new(mesh);
        // Keep points where the finite-difference oracle is meaningful: the
        // neighbour set must not change within the stencil and no vertex may
        // be so close that the 1/r terms dominate the truncation error.
        let mut sdf_points = Vec::with_capacity(points);
        while sdf_points.len() < points {
            for p in sample_sdf_points(mesh, points, 0.05, &mut rng) {
                let (nearest, gap) = scene.neighbour_margins(&p);
                if sdf_points.len() < points && nearest > POINT_CLEARANCE && gap > 8.0 * FD_STEP {
                    sdf_points.push(p);
                }
            }
        }
        let sdf_targets = sdf_points.iter().map(|p| sdf.signed_distance(p)).collect();
        Ok(Self {
            rays: ray_list,
            samples,
            colors,
            sdf_points,
            sdf_targets,
            weights: LossWeights::default(),
        })
    }

    /// Weighted total loss recorded on `tape`.
    fn loss(&self, tape: &mut Tape, scene: &RenderScene, vars: &ParamVars, params: &NetworkParams) -> Result<Var> {
        let cfg = &params.config;
        let mut total = tape.constant(Tensor::scalar(0.0));
        if let Some(eval) = render_rays_on_tape(tape, scene, vars, cfg, &self.rays, &self.samples)? {
            let rows: Vec<f64> = eval
                .ray_index
                .iter()
                .flat_map(|&r| self.colors.row(r).to_vec())
                .collect();
            let gt = Tensor::from_vec(eval.ray_index.len(), 3, rows);
            let lc = loss_color(tape, eval.pixels, &gt);
            let lc = tape.scale(lc, self.weights.color);
            total = tape.add(total, lc);
        }
        if !self.sdf_points.is_empty() {
            let dirs = vec![Vec3::new(0.0, 0.0, 1.0); self.sdf_points.len()];
            let enc = scene.encode_points(cfg, &self.sdf_points, &dirs, true);
            let eval = evaluate_on_tape(tape, vars, cfg, &enc, false)?;
            let ls = loss_sdf(tape, eval.sdf, &self.sdf_targets);
            let ls = tape.scale(ls, self.weights.sdf);
            let le = loss_eikonal(tape, eval.gradient.unwrap());
            let le = tape.scale(le, self.weights.eikonal);
            total = tape.add(total, ls);
            total = tape.add(total, le);
        }
        Ok(total)
    }

    pub fn loss_value(&self, scene: &RenderScene, params: &NetworkParams) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = ParamVars::on_tape(&mut tape, params, false, false);
        let l = self.loss(&mut tape, scene, &vars, params)?;
        Ok(tape.value(l).data[0])
    }
}

/// Finite-difference step used by [`gradient_check`].
pub const FD_STEP: f64 = 1e-4;
/// Minimum vertex distance of gradient-check SDF points.
const POINT_CLEARANCE: f64 = 400.0 * FD_STEP;
/// Spatial steps are shorter: the encoded d̂ curves sharply near vertices.
const POINT_FD_STEP: f64 = 0.25 * FD_STEP;
/// Minimum SDF gap between consecutive samples of a gradient-check ray.
const KINK_MARGIN: f64 = 10.0 * FD_STEP;
const MAX_REDRAWS: usize = 100;

/// Richardson-extrapolated central difference of `f` at step `h`. The
/// high-frequency encodings make plain O(h²) truncation error visible at
/// the 1e-4 level.
pub fn richardson_difference(mut f: impl FnMut(f64) -> Result<f64>, h: f64) -> Result<f64> {
    let mut central = |step: f64| -> Result<f64> { Ok((f(step)? - f(-step)?) / (2.0 * step)) };
    let coarse = central(h)?;
    let fine = central(0.5 * h)?;
    Ok((4.0 * fine - coarse) / 3.0)
}

/// Tape-versus-finite-difference agreement for one case.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheckReport {
    /// `(block name, relative error)` for every parameter tensor.
    pub blocks: Vec<(String, f64)>,
    /// Relative error of the SDF spatial gradient at the case's SDF points.
    pub point: f64,
}

impl GradientCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.1).fold(self.point, f64::max)
    }
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares the tape gradient of the case's total loss with extrapolated
/// central differences along one random unit direction per parameter tensor
/// (step [`FD_STEP`]), and the spatial SDF gradient at every SDF point (a
/// quarter of that step).
pub fn gradient_check(
    scene: &RenderScene,
    params: &NetworkParams,
    case: &GradientCheckCase,
    seed: u64,
) -> Result<GradientCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let vars = ParamVars::on_tape(&mut tape, params, true, true);
    let loss = case.loss(&mut tape, scene, &vars, params)?;
    let grads = tape.backward(loss);
    let ordered = vars.ordered();

    let names = block_names(params);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut blocks = Vec::with_capacity(names.len());
    for (b, name) in names.into_iter().enumerate() {
        let len = if b + 1 == ordered.len() {
            1
        } else {
            params.tensors()[b].data.len()
        };
        let mut dir: Vec<f64> = (0..len).map(|_| normal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let analytic: f64 = grads
            .get(ordered[b])
            .map_or(0.0, |g| g.data.iter().zip(&dir).map(|(a, b)| a * b).sum());
        let fd = richardson_difference(
            |step| {
                let mut p = params.clone();
                if b + 1 == ordered.len() {
                    p.log_steepness += step * dir[0];
                } else {
                    let t = &mut p.tensors_mut()[b].data;
                    t.iter_mut().zip(&dir).for_each(|(x, d)| *x += step * d);
                }
                case.loss_value(scene, &p)
            },
            FD_STEP,
        )?;
        blocks.push((name, relative_error(analytic, fd, 1e-6)));
    }

    let mut point: f64 = 0.0;
    let view = Vec3::new(0.0, 0.0, 1.0);
    for p in &case.sdf_points {
        let g = sdf_spatial_gradient(scene, params, p, &view)?;
        let mut fd = Vec3::zeros();
        for axis in 0..3 {
            fd[axis] = richardson_difference(
                |step| {
                    let mut q = *p;
                    q[axis] += step;
                    geometry_forward(scene, params, &q, &view)
                },
                POINT_FD_STEP,
            )?;
        }
        point = point.max((g - fd).norm() / g.norm().max(fd.norm()).max(1e-6));
    }
    Ok(GradientCheckReport { blocks, point })
}

fn block_names(params: &NetworkParams) -> Vec<String> {
    let mut names = Vec::new();
    for (net, mlp) in [("geometry", &params.geometry), ("appearance", &params.appearance)] {
        for l in 0..mlp.weights.len() {
            names.push(format!("{net}.w{l}"));
            names.push(format!("{net}.b{l}"));
        }
    }
    names.push("log_steepness".into());
    names
}

//! Surface rendering from a neural mesh.
//!
//! A query point is described only through its nearest mesh vertices (signed
//! proximity `n_s`, view-relative normal `n_r`, mean distance `d̂` and
//! interpolated features). A geometry MLP maps that description to an SDF
//! value, an appearance MLP maps it (plus the SDF's spatial gradient) to a
//! colour, and samples along each ray are composited with logistic-CDF
//! opacities.

mod encoding;
mod network;
mod query;
mod sampling;

pub use encoding::{encoding_len, positional_encoding};
pub use network::{appearance_on_tape, geometry_on_tape, Mlp, MlpVars, NetworkConfig, NetworkParams, ParamVars};
pub use query::{QueryContext, QueryJacobian, VertexQuery};
pub use sampling::{coarse_samples, importance_samples, linspace, merge_samples, CoarseSamples};

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{composite_ray, RayOffsets, Tape, Tensor, Var};
use crate::depth_fusion::DepthMap;
use crate::error::{Error, Result};
use crate::geometry::{Aabb, Bvh, CameraModel, Vec3};
use crate::imaging::RgbImage;
use crate::neural_mesh::NeuralMesh;

/// Default band half-width in mean edge lengths.
pub const DEFAULT_BAND_SCALE: f64 = 3.0;

/// A neural mesh with the acceleration structures rendering needs.
#[derive(Debug, Clone)]
pub struct RenderScene {
    neural: NeuralMesh,
    bvh: Bvh,
    query: VertexQuery,
    bounds: Aabb,
    band: f64,
}

impl RenderScene {
    pub fn new(neural: NeuralMesh, k: usize, band_scale: f64) -> Result<Self> {
        let query = VertexQuery::new(&neural, k)?;
        let bvh = Bvh::build(&neural.mesh);
        let bounds = neural.mesh.bbox().scaled(1.1);
        let band = band_scale * neural.mesh.mean_edge_length();
        Ok(Self {
            neural,
            bvh,
            query,
            bounds,
            band,
        })
    }

    pub fn neural(&self) -> &NeuralMesh {
        &self.neural
    }

    pub fn into_neural(self) -> NeuralMesh {
        self.neural
    }

    pub fn bvh(&self) -> &Bvh {
        &self.bvh
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    /// Half-width of the sampling band around the mesh surface.
    pub fn band(&self) -> f64 {
        self.band
    }

    pub fn k(&self) -> usize {
        self.query.k()
    }

    /// See [`VertexQuery::margins`].
    pub fn neighbour_margins(&self, point: &Vec3) -> (f64, f64) {
        self.query.margins(point)
    }

    pub fn interpolate_query(&self, point: &Vec3, view_dir: &Vec3) -> QueryContext {
        self.query.interpolate(&self.neural, point, view_dir, false).0
    }

    pub fn interpolate_with_jacobian(&self, point: &Vec3, view_dir: &Vec3) -> (QueryContext, QueryJacobian) {
        let (ctx, jac) = self.query.interpolate(&self.neural, point, view_dir, true);
        (ctx, jac.unwrap())
    }

    /// Network inputs for a batch of points.
    pub fn encode_points(
        &self,
        config: &NetworkConfig,
        points: &[Vec3],
        dirs: &[Vec3],
        with_jacobian: bool,
    ) -> EncodedPoints {
        let levels = config.encoding_levels;
        let dg = self.neural.geometry.dim;
        let da = self.neural.appearance.dim;
        let g_in = config.geometry_input_dim(dg);
        let pe1 = encoding_len(1, levels);
        let pe3 = encoding_len(3, levels);
        let n = points.len();
        let mut geo = Vec::with_capacity(n * g_in);
        let mut jac = Vec::with_capacity(if with_jacobian { n * g_in * 3 } else { 0 });
        let mut prefix = Vec::with_capacity(n * (pe3 + da));
        let mut suffix = Vec::with_capacity(n * pe1);
        let mut deriv = Vec::with_capacity(pe1);
        for (p, d) in points.iter().zip(dirs) {
            let (ctx, j) = self.query.interpolate(&self.neural, p, d, with_jacobian);
            geo.extend_from_slice(&ctx.geo_feature);
            encoding::encode_into(&[ctx.n_s], levels, &mut geo);
            encoding::encode_into(&[ctx.d_hat], levels, &mut geo);
            encoding::encode_into(ctx.n_r.as_slice(), levels, &mut prefix);
            prefix.extend_from_slice(&ctx.app_feature);
            encoding::encode_into(&[ctx.d_hat], levels, &mut suffix);
            if let Some(j) = j {
                for g in &j.geo_feature {
                    jac.extend_from_slice(g.as_slice());
                }
                for (value, grad) in [(ctx.n_s, j.n_s), (ctx.d_hat, j.d_hat)] {
                    deriv.clear();
                    encoding::encoding_derivative(value, levels, &mut deriv);
                    for &s in &deriv {
                        jac.extend_from_slice((grad * s).as_slice());
                    }
                }
            }
        }
        EncodedPoints {
            geometry_input: Tensor::from_vec(n, g_in, geo),
            geometry_jacobian: with_jacobian.then(|| Arc::new(jac)),
            appearance_prefix: Tensor::from_vec(n, pe3 + da, prefix),
            appearance_suffix: Tensor::from_vec(n, pe1, suffix),
            dirs: dirs.to_vec(),
        }
    }
}

/// Per-point network inputs.
#[derive(Debug, Clone)]
pub struct EncodedPoints {
    pub geometry_input: Tensor,
    /// Per point, `in × 3` derivative of the geometry input w.r.t. position.
    pub geometry_jacobian: Option<Arc<Vec<f64>>>,
    /// `[PE(n_r) | appearance feature]`.
    pub appearance_prefix: Tensor,
    /// `PE(d̂)`.
    pub appearance_suffix: Tensor,
    pub dirs: Vec<Vec3>,
}

/// Tape handles produced by evaluating points.
#[derive(Debug, Clone, Copy)]
pub struct PointEval {
    pub sdf: Var,
    pub gradient: Option<Var>,
    pub color: Option<Var>,
}

/// Evaluates SDF, spatial gradient (if the encoding carries a Jacobian) and
/// colour (if asked) on a tape.
pub fn evaluate_on_tape(
    tape: &mut Tape,
    vars: &ParamVars,
    config: &NetworkConfig,
    encoded: &EncodedPoints,
    with_color: bool,
) -> Result<PointEval> {
    let x = tape.constant(encoded.geometry_input.clone());
    let want_grad = encoded.geometry_jacobian.is_some();
    let (sdf, gx) = geometry_on_tape(tape, &vars.geometry, config, x, want_grad)?;
    let gradient = match (&encoded.geometry_jacobian, gx) {
        (Some(jac), Some(gx)) => Some(tape.row_jacobian(gx, jac.clone(), 3)),
        _ => None,
    };
    let color = if with_color {
        let grad = gradient.ok_or_else(|| Error::Config("colour needs the SDF gradient".into()))?;
        let grad = if config.gradient_along_ray {
            let proj: Vec<f64> = encoded
                .dirs
                .iter()
                .flat_map(|d| {
                    let d = d.normalize();
                    (d * d.transpose()).as_slice().to_vec()
                })
                .collect();
            tape.row_jacobian(grad, Arc::new(proj), 3)
        } else {
            grad
        };
        let pre = tape.constant(encoded.appearance_prefix.clone());
        let suf = tape.constant(encoded.appearance_suffix.clone());
        let input = tape.concat_cols(&[pre, grad, suf]);
        Some(appearance_on_tape(tape, &vars.appearance, config, input)?)
    } else {
        None
    };
    Ok(PointEval { sdf, gradient, color })
}

/// SDF values of the geometry network (no gradient).
pub fn sdf_values(scene: &RenderScene, params: &NetworkParams, points: &[Vec3], dirs: &[Vec3]) -> Result<Vec<f64>> {
    let enc = scene.encode_points(&params.config, points, dirs, false);
    let mut tape = Tape::new();
    let vars = ParamVars::on_tape(&mut tape, params, false, false);
    let eval = evaluate_on_tape(&mut tape, &vars, &params.config, &enc, false)?;
    Ok(tape.value(eval.sdf).data.clone())
}

/// Full context at one point, including the SDF gradient.
pub fn query_context(
    scene: &RenderScene,
    params: &NetworkParams,
    point: &Vec3,
    view_dir: &Vec3,
) -> Result<QueryContext> {
    let mut ctx = scene.interpolate_query(point, view_dir);
    ctx.sdf_gradient = sdf_spatial_gradient(scene, params, point, view_dir)?;
    Ok(ctx)
}

/// SDF at one point.
pub fn geometry_forward(scene: &RenderScene, params: &NetworkParams, point: &Vec3, view_dir: &Vec3) -> Result<f64> {
    Ok(sdf_values(scene, params, &[*point], &[*view_dir])?[0])
}

/// Colour at one point.
pub fn appearance_forward(
    scene: &RenderScene,
    params: &NetworkParams,
    point: &Vec3,
    view_dir: &Vec3,
) -> Result<[f64; 3]> {
    let enc = scene.encode_points(&params.config, &[*point], &[*view_dir], true);
    let mut tape = Tape::new();
    let vars = ParamVars::on_tape(&mut tape, params, false, false);
    let eval = evaluate_on_tape(&mut tape, &vars, &params.config, &enc, true)?;
    let c = &tape.value(eval.color.unwrap()).data;
    Ok([c[0], c[1], c[2]])
}

/// Gradient of the SDF with respect to the query position, through the
/// neighbourhood interpolation and the geometry network.
pub fn sdf_spatial_gradient(
    scene: &RenderScene,
    params: &NetworkParams,
    point: &Vec3,
    view_dir: &Vec3,
) -> Result<Vec3> {
    let enc = scene.encode_points(&params.config, &[*point], &[*view_dir], true);
    let mut tape = Tape::new();
    let vars = ParamVars::on_tape(&mut tape, params, false, false);
    let eval = evaluate_on_tape(&mut tape, &vars, &params.config, &enc, false)?;
    let g = &tape.value(eval.gradient.unwrap()).data;
    Ok(Vec3::new(g[0], g[1], g[2]))
}

/// Sampling settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub coarse_samples: usize,
    pub fine_samples: usize,
    /// Rays evaluated per network batch.
    pub batch_rays: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            coarse_samples: 32,
            fine_samples: 32,
            batch_rays: 128,
        }
    }
}

/// A world-space ray with unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

/// Final sample positions for each ray: coarse band (or bounds) samples,
/// refined with importance samples drawn from the coarse weights when the
/// ray hits the mesh. Empty for background rays.
pub fn plan_samples(
    scene: &RenderScene,
    params: &NetworkParams,
    rays: &[Ray],
    config: &RenderConfig,
) -> Result<Vec<Vec<f64>>> {
    let coarse: Vec<CoarseSamples> = rays
        .iter()
        .map(|r| {
            coarse_samples(
                &scene.bvh,
                &scene.bounds,
                &r.origin,
                &r.dir,
                scene.band,
                config.coarse_samples,
            )
        })
        .collect();
    let refine: Vec<usize> = (0..rays.len())
        .filter(|&i| config.fine_samples > 0 && matches!(coarse[i], CoarseSamples::Band(_)))
        .collect();
    let mut points = Vec::new();
    let mut dirs = Vec::new();
    for &i in &refine {
        for &t in coarse[i].t_values() {
            points.push(rays[i].origin + rays[i].dir * t);
            dirs.push(rays[i].dir);
        }
    }
    let sdf = if points.is_empty() {
        Vec::new()
    } else {
        sdf_values(scene, params, &points, &dirs)?
    };
    let steep = params.steepness();
    let mut out: Vec<Vec<f64>> = coarse.iter().map(|c| c.t_values().to_vec()).collect();
    let mut offset = 0;
    for &i in &refine {
        let t = coarse[i].t_values();
        let s = &sdf[offset..offset + t.len()];
        offset += t.len();
        let (_, w) = composite_ray(s, &vec![0.0; 3 * t.len()], steep);
        let fine = importance_samples(t, &w, config.fine_samples);
        out[i] = merge_samples(t, &fine);
    }
    Ok(out)
}

/// Tape handles for a batch of composited rays.
pub struct RayBatchEval {
    /// `rays_with_samples × 3`.
    pub pixels: Var,
    /// Indices (into the input rays) of the rows of `pixels`.
    pub ray_index: Vec<usize>,
    pub weights: Vec<f64>,
    pub offsets: RayOffsets,
    pub t_values: Vec<f64>,
}

/// Records the full render of `rays` with precomputed samples on `tape`.
pub fn render_rays_on_tape(
    tape: &mut Tape,
    scene: &RenderScene,
    vars: &ParamVars,
    config: &NetworkConfig,
    rays: &[Ray],
    samples: &[Vec<f64>],
) -> Result<Option<RayBatchEval>> {
    let mut points = Vec::new();
    let mut dirs = Vec::new();
    let mut offsets = vec![0];
    let mut ray_index = Vec::new();
    let mut t_values = Vec::new();
    for (i, (ray, ts)) in rays.iter().zip(samples).enumerate() {
        if ts.len() < 2 {
            continue;
        }
        for &t in ts {
            points.push(ray.origin + ray.dir * t);
            dirs.push(ray.dir);
            t_values.push(t);
        }
        offsets.push(points.len());
        ray_index.push(i);
    }
    if ray_index.is_empty() {
        return Ok(None);
    }
    let enc = scene.encode_points(config, &points, &dirs, true);
    let eval = evaluate_on_tape(tape, vars, config, &enc, true)?;
    let offsets = RayOffsets(Arc::new(offsets));
    let (pixels, weights) = tape.composite(eval.sdf, vars.log_steepness, eval.color.unwrap(), offsets.clone());
    Ok(Some(RayBatchEval {
        pixels,
        ray_index,
        weights,
        offsets,
        t_values,
    }))
}

/// Colour, expected ray distance and accumulated weight for each ray.
pub fn render_rays(
    scene: &RenderScene,
    params: &NetworkParams,
    rays: &[Ray],
    config: &RenderConfig,
) -> Result<Vec<([f64; 3], f64, f64)>> {
    let mut out = vec![([0.0; 3], f64::NAN, 0.0); rays.len()];
    for (chunk_no, chunk) in rays.chunks(config.batch_rays.max(1)).enumerate() {
        let base = chunk_no * config.batch_rays.max(1);
        let samples = plan_samples(scene, params, chunk, config)?;
        let mut tape = Tape::new();
        let vars = ParamVars::on_tape(&mut tape, params, false, false);
        let Some(eval) = render_rays_on_tape(&mut tape, scene, &vars, &params.config, chunk, &samples)? else {
            continue;
        };
        let px = tape.value(eval.pixels);
        for (row, &ri) in eval.ray_index.iter().enumerate() {
            let (lo, hi) = (eval.offsets.0[row], eval.offsets.0[row + 1]);
            let w = &eval.weights[lo..hi];
            let total: f64 = w.iter().sum();
            let dist = if total > 0.0 {
                w.iter().zip(&eval.t_values[lo..hi]).map(|(w, t)| w * t).sum::<f64>() / total
            } else {
                f64::NAN
            };
            let c = px.row(row);
            out[base + ri] = ([c[0], c[1], c[2]], dist, total);
        }
    }
    Ok(out)
}

/// Rendered frame with expected depth and accumulated opacity.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: RgbImage,
    pub depth: DepthMap,
    pub opacity: Vec<f32>,
}

pub fn camera_rays(camera: &CameraModel) -> Vec<Ray> {
    let mut rays = Vec::with_capacity((camera.width * camera.height) as usize);
    for y in 0..camera.height {
        for x in 0..camera.width {
            let (origin, dir) = camera.pixel_ray(x, y);
            rays.push(Ray { origin, dir });
        }
    }
    rays
}

/// Renders every pixel of `camera` over a black background.
pub fn render_image(
    scene: &RenderScene,
    params: &NetworkParams,
    camera: &CameraModel,
    config: &RenderConfig,
) -> Result<RenderOutput> {
    let rays = camera_rays(camera);
    let results = render_rays(scene, params, &rays, config)?;
    let mut image = RgbImage::new(camera.width, camera.height);
    let mut depth = DepthMap::missing(camera.width, camera.height);
    let mut opacity = vec![0.0f32; rays.len()];
    for (i, (c, dist, total)) in results.into_iter().enumerate() {
        let (x, y) = (i as u32 % camera.width, i as u32 / camera.width);
        image.set(x, y, [c[0] as f32, c[1] as f32, c[2] as f32]);
        if dist.is_finite() {
            depth.set(x, y, Some(dist * camera.depth_per_unit_t(&rays[i].dir)));
        }
        opacity[i] = total as f32;
    }
    Ok(RenderOutput { image, depth, opacity })
}

/// Colour of a single pixel.
pub fn render_pixel(
    scene: &RenderScene,
    params: &NetworkParams,
    camera: &CameraModel,
    x: u32,
    y: u32,
    config: &RenderConfig,
) -> Result<[f64; 3]> {
    let (origin, dir) = camera.pixel_ray(x, y);
    Ok(render_rays(scene, params, &[Ray { origin, dir }], config)?[0].0)
}

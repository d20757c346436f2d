//! The `serf` command line.
//!
//! `--scene` accepts a `scene.json` manifest, or a `.snmb` neural mesh that
//! has a `scene.json` beside it (the mesh then replaces the manifest's).

use std::io::Read;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use serf_core::depth_fusion::{build_camera_graph, default_epsilon, fuse_points, DepthMap};
use serf_core::editing::{
    deform_scene, detect_edit_region, load_handles, paint_texture, StaticPolicy, DEFAULT_FINE_TUNE_ITERATIONS,
    DEFAULT_ITERATIONS, DEFAULT_TAU,
};
use serf_core::geometry::io::{load_mesh, parse_ply_mesh, read_ply_cloud};
use serf_core::geometry::{load_cameras, Bvh, CameraModel, Vec3};
use serf_core::imaging::{Mask, RgbImage};
use serf_core::metrics::{chamfer, miou, psnr, ssim, MetricReport};
use serf_core::neural_mesh::{
    build_neural_mesh, rgb_feature_map, FeatureMap, NeuralMesh, DEFAULT_K, RGB_FEATURE_CHANNELS,
};
use serf_core::renderer::{render_image, NetworkConfig, NetworkParams, RenderConfig, RenderScene};
use serf_core::scene_assets::{
    generate_synthetic_scene, load_scene, save_scene, SceneBundle, SceneConfig, SyntheticSceneSpec,
};
use serf_core::segmentation::{load_prompts, run_interactive_loop};
use serf_core::training::{fine_tune_appearance, save_history, silhouette, train, TrainConfig, TrainView};

use crate::backend::SegmenterSpec;
use crate::service::{serve, ServiceConfig, DATA_DIR_ENV, DEFAULT_PREVIEW_RES, PREVIEW_RES_ENV};

#[derive(Debug, Parser)]
#[command(name = "serf", version, about = "Neural-mesh scene segmentation and editing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic scene with features, depth, masks and labels.
    Synth(SynthArgs),
    /// Fuse depth maps into a point cloud.
    Fuse(FuseArgs),
    /// Aggregate per-view features onto mesh vertices.
    Build(BuildArgs),
    /// Train the geometry and appearance networks.
    Train(TrainArgs),
    /// Render one view.
    Render(RenderArgs),
    /// Run the interactive segmentation loop from a prompt file.
    Segment(SegmentArgs),
    /// Deform the segmented object with handles.
    Deform(DeformArgs),
    /// Apply a painted frame to the vertex appearance features.
    Paint(PaintArgs),
    /// Compare outputs with references; prints CSV.
    Eval(EvalArgs),
    /// Run the session service.
    Serve(ServeArgs),
    /// Talk to a running service.
    Client(ClientArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ShapeArg {
    Icosphere,
    TwoPart,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "icosphere")]
    pub shape: ShapeArg,
    /// Subdivision level.
    #[arg(long, default_value_t = 3)]
    pub level: u32,
    #[arg(long, default_value_t = 20)]
    pub views: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 128)]
    pub res: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip writing the aggregated neural mesh.
    #[arg(long)]
    pub no_neural: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub cameras: PathBuf,
    /// Directory of `.sdpt` files, one per camera in name order.
    #[arg(long)]
    pub depths: PathBuf,
    /// Consistency threshold; derived from camera spacing when omitted.
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long)]
    pub cameras: PathBuf,
    /// Directory holding `NNN_app.sfmb` and `NNN_geo.sfmb` per camera.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long = "K", alias = "k", default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long)]
    pub support_radius: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Manifest whose views to train on; defaults to the scene's own.
    #[arg(long)]
    pub views: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Start from this checkpoint instead of a fresh network.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 4)]
    pub hidden_layers: usize,
    #[arg(long, default_value_t = 1024)]
    pub ray_batch: usize,
    #[arg(long, default_value_t = 1024)]
    pub sdf_batch: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    /// Loss history CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub view: usize,
    /// Cameras for a `.snmb` scene without a manifest.
    #[arg(long)]
    pub cameras: Option<PathBuf>,
    /// Longer image side; full resolution when omitted.
    #[arg(long)]
    pub size: Option<u32>,
    #[arg(long)]
    pub depth_out: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub prompts: PathBuf,
    /// `oracle`, `oracle:<labels.svmk>` or `remote:<url>`; defaults to the
    /// remote in SERF_SEGMENTER_URL, else the scene's labels.
    #[arg(long)]
    pub segmenter: Option<String>,
    /// Maximum rounds; one per frame when omitted.
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Round log as JSON.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DeformArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub handles: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    pub iters: usize,
    /// Pin only "other" vertices within this many rings of the object.
    #[arg(long)]
    pub ring: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PaintArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub frame: usize,
    #[arg(long)]
    pub edited: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    /// Appearance features of the edited frame; computed from its colours
    /// when the scene uses 7-channel RGB features.
    #[arg(long)]
    pub edited_features: Option<PathBuf>,
    /// Checkpoint to fine-tune after painting.
    #[arg(long, requires = "fine_tune_out")]
    pub params: Option<PathBuf>,
    #[arg(long, requires = "params")]
    pub fine_tune_out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_FINE_TUNE_ITERATIONS)]
    pub fine_tune_iters: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Metric {
    Psnr,
    Ssim,
    Miou,
    Chamfer,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(value_enum)]
    pub metric: Metric,
    /// File, or directory of files paired with `--gt` by sorted name.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7860")]
    pub addr: SocketAddr,
    #[arg(long, env = DATA_DIR_ENV, default_value = "serf-data")]
    pub data_dir: PathBuf,
    #[arg(long, env = PREVIEW_RES_ENV, default_value_t = DEFAULT_PREVIEW_RES)]
    pub preview_res: u32,
}

#[derive(Debug, Args)]
pub struct ClientArgs {
    #[arg(long, env = "SERF_URL", default_value = "http://127.0.0.1:7860")]
    pub url: String,
    #[command(subcommand)]
    pub command: ClientCommand,
}

#[derive(Debug, Subcommand)]
pub enum ClientCommand {
    Create {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        segmenter: Option<String>,
    },
    Status {
        id: String,
    },
    Prompt {
        id: String,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        x: u32,
        #[arg(long)]
        y: u32,
        #[arg(long, default_value = "object")]
        label: String,
        #[arg(long, default_value_t = 0)]
        auto_rounds: usize,
        #[arg(long)]
        key: Option<String>,
    },
    Mask {
        id: String,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
    },
    VertexMask {
        id: String,
        #[arg(long)]
        out: PathBuf,
    },
    Render {
        id: String,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        full_res: bool,
        #[arg(long)]
        out: PathBuf,
    },
    Deform {
        id: String,
        #[arg(long)]
        handles: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        key: Option<String>,
    },
    Paint {
        id: String,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        edited: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        #[arg(long, default_value_t = DEFAULT_FINE_TUNE_ITERATIONS)]
        fine_tune_iters: usize,
        #[arg(long)]
        key: Option<String>,
    },
    Job {
        id: String,
        job: u64,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Fuse(a) => fuse(a),
        Command::Build(a) => build(a),
        Command::Train(a) => train_cmd(a),
        Command::Render(a) => render(a),
        Command::Segment(a) => segment(a),
        Command::Deform(a) => deform(a),
        Command::Paint(a) => paint(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => {
            let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
            let config = ServiceConfig {
                data_dir: a.data_dir,
                preview_res: a.preview_res,
            };
            runtime.block_on(serve(config, a.addr))?;
            Ok(())
        }
        Command::Client(a) => client(a),
    }
}

fn is_neural_mesh(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("snmb"))
}

/// Resolves `--scene` to a full bundle.
pub fn load_scene_arg(path: &Path) -> Result<SceneBundle> {
    if !is_neural_mesh(path) {
        return load_scene(path).with_context(|| format!("loading scene {}", path.display()));
    }
    let manifest = path.with_file_name("scene.json");
    if !manifest.is_file() {
        bail!(
            "{} has no scene.json beside it; pass the manifest of the scene it belongs to",
            path.display()
        );
    }
    let mut bundle = load_scene(&manifest).with_context(|| format!("loading scene {}", manifest.display()))?;
    let neural = NeuralMesh::load(path)?;
    if neural.mesh.vertex_count() != bundle.mesh.vertex_count() {
        bail!(
            "{} has {} vertices, its scene mesh {}",
            path.display(),
            neural.mesh.vertex_count(),
            bundle.mesh.vertex_count()
        );
    }
    bundle.neural = Some(neural);
    Ok(bundle)
}

/// Just the neural mesh behind `--scene`.
pub fn load_neural_arg(path: &Path) -> Result<NeuralMesh> {
    if is_neural_mesh(path) {
        Ok(NeuralMesh::load(path)?)
    } else {
        Ok(load_scene(path)?.neural_mesh()?)
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = match a.shape {
        ShapeArg::Icosphere => SyntheticSceneSpec::icosphere(a.level, a.views, a.res, a.seed),
        ShapeArg::TwoPart => SyntheticSceneSpec::two_part(a.level, a.views, a.res, a.seed),
    };
    let mut bundle = generate_synthetic_scene(&spec)?;
    if !a.no_neural {
        bundle.neural = Some(bundle.neural_mesh()?);
    }
    let manifest = save_scene(&bundle, &a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext)))
        .collect();
    files.sort();
    Ok(files)
}

fn fuse(a: FuseArgs) -> Result<()> {
    let cameras = load_cameras(&a.cameras)?;
    let files = sorted_files(&a.depths, "sdpt")?;
    if files.len() != cameras.len() {
        bail!(
            "{} cameras but {} depth maps in {}",
            cameras.len(),
            files.len(),
            a.depths.display()
        );
    }
    let depths = files
        .iter()
        .map(|f| DepthMap::load(f))
        .collect::<serf_core::Result<Vec<_>>>()?;
    let centers: Vec<Vec3> = cameras.iter().map(CameraModel::center).collect();
    let triplets = build_camera_graph(&centers);
    let eps = a.eps.unwrap_or_else(|| default_epsilon(&cameras));
    let cloud = fuse_points(&cameras, &depths, &triplets, eps)?;
    std::fs::write(&a.out, cloud.to_ply()).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{} points from {} triplets (eps {eps})", cloud.len(), triplets.len());
    Ok(())
}

fn build(a: BuildArgs) -> Result<()> {
    let mesh = load_mesh(&a.mesh)?;
    let cameras = load_cameras(&a.cameras)?;
    let load = |i: usize, kind: &str| FeatureMap::load(&a.features.join(format!("{i:03}_{kind}.sfmb")));
    let app = (0..cameras.len())
        .map(|i| load(i, "app"))
        .collect::<serf_core::Result<Vec<_>>>()?;
    let geo = (0..cameras.len())
        .map(|i| load(i, "geo"))
        .collect::<serf_core::Result<Vec<_>>>()?;
    let neural = build_neural_mesh(mesh, &cameras, &app, &geo, a.k, a.support_radius)?;
    let uncovered = neural.uncovered_vertices().len();
    if uncovered > 0 {
        log::warn!("{uncovered} vertices have no neural point within the support radius");
    }
    neural.save(&a.out)?;
    Ok(())
}

fn train_views(bundle: &SceneBundle, bvh: &Bvh) -> Result<Vec<TrainView>> {
    bundle
        .cameras
        .iter()
        .zip(&bundle.views)
        .map(|(camera, view)| {
            let fg = view.mask.clone().unwrap_or_else(|| silhouette(bvh, camera));
            Ok(TrainView::new(camera.clone(), view.image.clone(), fg)?)
        })
        .collect()
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let bundle = load_scene_arg(&a.scene)?;
    let scene = bundle.render_scene()?;
    let view_bundle = match &a.views {
        Some(p) => load_scene(p)?,
        None => bundle.clone(),
    };
    let views = train_views(&view_bundle, scene.bvh())?;
    let params = match &a.init {
        Some(p) => NetworkParams::load(p)?,
        None => {
            let config = NetworkConfig {
                width: a.width,
                hidden_layers: a.hidden_layers,
                skip_layer: NetworkConfig::default().skip_layer.min(a.hidden_layers),
                encoding_levels: bundle.config.encoding_levels,
                ..NetworkConfig::default()
            };
            let n = scene.neural();
            NetworkParams::init(config, n.appearance.dim, n.geometry.dim, a.seed)?
        }
    };
    let config = TrainConfig {
        ray_batch: a.ray_batch,
        sdf_batch: a.sdf_batch,
        lr: a.lr,
        iterations: a.iters,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let outcome = train(&scene, &views, params, &config)?;
    if let Some(h) = &a.history {
        save_history(h, &outcome.history)?;
    }
    let (params, history) = outcome.into_result()?;
    params.save(&a.out)?;
    if let Some(last) = history.last() {
        println!(
            "step {}: l_c {} l_s {} l_re {}",
            last.step, last.color, last.sdf, last.eikonal
        );
    }
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let (neural, cameras, config) = match (&a.cameras, is_neural_mesh(&a.scene)) {
        (Some(c), true) => (NeuralMesh::load(&a.scene)?, load_cameras(c)?, SceneConfig::default()),
        _ => {
            let b = load_scene_arg(&a.scene)?;
            (b.neural_mesh()?, b.cameras, b.config)
        }
    };
    let camera = cameras
        .get(a.view)
        .with_context(|| format!("view {} of {}", a.view, cameras.len()))?;
    let camera = crate::session::preview_camera(camera, a.size.is_none(), a.size.unwrap_or(0));
    let params = NetworkParams::load(&a.params)?;
    let scene = RenderScene::new(neural, config.k, config.band_scale)?;
    let out = render_image(&scene, &params, &camera, &RenderConfig::default())?;
    out.image.save(&a.out)?;
    if let Some(d) = &a.depth_out {
        out.depth.save(d)?;
    }
    Ok(())
}

fn segment(a: SegmentArgs) -> Result<()> {
    let bundle = load_scene_arg(&a.scene)?;
    let segmenter = SegmenterSpec::resolve(a.segmenter.as_deref())?.build(&bundle)?;
    let prompts = load_prompts(&a.prompts)?;
    let scene = bundle.segmentation_scene()?;
    let rounds = a.rounds.unwrap_or(scene.frame_count());
    let session = run_interactive_loop(&scene, &prompts, segmenter.as_ref(), rounds)?;
    session.fused().save(&a.out)?;
    if let Some(p) = &a.log {
        std::fs::write(p, serde_json::to_string_pretty(session.log())?)?;
    }
    let skipped = session.log().iter().filter(|r| r.skipped.is_some()).count();
    println!(
        "{} rounds ({skipped} skipped), {} object vertices",
        session.log().len(),
        session.fused().count(serf_core::segmentation::OBJECT)
    );
    Ok(())
}

fn deform(a: DeformArgs) -> Result<()> {
    let neural = load_neural_arg(&a.scene)?;
    let mask = serf_core::segmentation::VertexMask::load(&a.mask)?;
    let handles = load_handles(&a.handles)?;
    let policy = a.ring.map_or(StaticPolicy::AllOther, StaticPolicy::Ring);
    let (deformed, result) = deform_scene(&neural, &mask, &handles, a.iters, policy)?;
    deformed.save(&a.out)?;
    println!(
        "ARAP energy {:e} -> {:e}",
        result.energies.first().unwrap_or(&0.0),
        result.energies.last().unwrap_or(&0.0)
    );
    Ok(())
}

fn paint(a: PaintArgs) -> Result<()> {
    let bundle = load_scene_arg(&a.scene)?;
    let neural = bundle.neural_mesh()?;
    let camera = bundle
        .cameras
        .get(a.frame)
        .with_context(|| format!("frame {} of {}", a.frame, bundle.cameras.len()))?;
    let edited = RgbImage::load(&a.edited)?;
    let region = detect_edit_region(a.frame, &bundle.views[a.frame].image, &edited, a.tau)?;
    let features = match &a.edited_features {
        Some(p) => FeatureMap::load(p)?,
        None if neural.appearance.dim == RGB_FEATURE_CHANNELS as usize => {
            let bvh = Bvh::build(&neural.mesh);
            rgb_feature_map(&edited, &neural.mesh, &bvh, camera)?
        }
        None => bail!(
            "the scene has {}-channel appearance features; pass --edited-features from the exporter",
            neural.appearance.dim
        ),
    };
    let result = paint_texture(&neural, &region, &features, camera, None, bundle.config.k)?;
    result.neural.save(&a.out)?;
    println!(
        "{} edited pixels, {} painted vertices",
        region.mask.count(),
        result.vertices.len()
    );
    if let (Some(params), Some(out), Some(_)) = (&a.params, &a.fine_tune_out, &result.job) {
        let scene = RenderScene::new(result.neural.clone(), bundle.config.k, bundle.config.band_scale)?;
        let mut edited_bundle = bundle.clone();
        edited_bundle.views[a.frame].image = edited;
        let views = train_views(&edited_bundle, scene.bvh())?;
        let config = TrainConfig {
            iterations: a.fine_tune_iters,
            ray_batch: 256,
            ..TrainConfig::default()
        };
        let (tuned, _) = fine_tune_appearance(&scene, &views, NetworkParams::load(params)?, &config)?.into_result()?;
        tuned.save(out)?;
    }
    Ok(())
}

fn pairs(pred: &Path, gt: &Path, ext: &str) -> Result<Vec<(PathBuf, PathBuf)>> {
    if pred.is_dir() != gt.is_dir() {
        bail!("--pred and --gt must both be files or both be directories");
    }
    if !pred.is_dir() {
        return Ok(vec![(pred.to_path_buf(), gt.to_path_buf())]);
    }
    let (p, g) = (sorted_files(pred, ext)?, sorted_files(gt, ext)?);
    if p.len() != g.len() || p.is_empty() {
        bail!("{} vs {} .{ext} files", p.len(), g.len());
    }
    Ok(p.into_iter().zip(g).collect())
}

fn load_points(path: &Path) -> Result<Vec<Vec3>> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let asset = path.display().to_string();
    match read_ply_cloud(&bytes, &asset) {
        Ok((points, _)) => Ok(points),
        Err(_) => Ok(parse_ply_mesh(&bytes, &asset)?.vertices().to_vec()),
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let (name, ext) = match a.metric {
        Metric::Psnr => ("psnr", "png"),
        Metric::Ssim => ("ssim", "png"),
        Metric::Miou => ("miou", "png"),
        Metric::Chamfer => ("chamfer", "ply"),
    };
    let mut values = Vec::new();
    for (p, g) in pairs(&a.pred, &a.gt, ext)? {
        let v = match a.metric {
            Metric::Psnr => psnr(&RgbImage::load(&p)?, &RgbImage::load(&g)?, 1.0)?,
            Metric::Ssim => ssim(&RgbImage::load(&p)?, &RgbImage::load(&g)?)?,
            Metric::Miou => miou(&Mask::load(&p)?, &Mask::load(&g)?)?,
            Metric::Chamfer => chamfer(&load_points(&p)?, &load_points(&g)?)?,
        };
        values.push(v);
    }
    let csv = MetricReport::from_items(name, values).to_csv();
    match &a.out {
        Some(out) => std::fs::write(out, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn client(a: ClientArgs) -> Result<()> {
    let base = a.url.trim_end_matches('/').to_string();
    let agent = ureq::AgentBuilder::new().build();
    let url = |path: String| format!("{base}{path}");
    let send = |req: ureq::Request, body: Option<Value>, key: &Option<String>| -> Result<ureq::Response> {
        let req = match key {
            Some(k) => req.set("Idempotency-Key", k),
            None => req,
        };
        let out = match body {
            Some(b) => req.set("Content-Type", "application/json").send_string(&b.to_string()),
            None => req.call(),
        };
        match out {
            Ok(r) => Ok(r),
            Err(ureq::Error::Status(code, r)) => bail!("{code}: {}", r.into_string().unwrap_or_default()),
            Err(e) => Err(e.into()),
        }
    };
    let print_json = |r: ureq::Response| -> Result<()> {
        let v: Value = serde_json::from_str(&r.into_string()?)?;
        println!("{}", serde_json::to_string_pretty(&v)?);
        Ok(())
    };
    let save_body = |r: ureq::Response, out: &Path| -> Result<()> {
        let mut bytes = Vec::new();
        r.into_reader().read_to_end(&mut bytes)?;
        std::fs::write(out, bytes).with_context(|| format!("writing {}", out.display()))
    };
    match a.command {
        ClientCommand::Create {
            manifest,
            params,
            segmenter,
        } => {
            let body = json!({ "manifest": manifest, "params": params, "segmenter": segmenter });
            print_json(send(agent.post(&url("/sessions".into())), Some(body), &None)?)
        }
        ClientCommand::Status { id } => print_json(send(agent.get(&url(format!("/sessions/{id}"))), None, &None)?),
        ClientCommand::Prompt {
            id,
            frame,
            x,
            y,
            label,
            auto_rounds,
            key,
        } => {
            let body = json!({ "frame": frame, "x": x, "y": y, "label": label, "auto_rounds": auto_rounds });
            print_json(send(
                agent.post(&url(format!("/sessions/{id}/prompts"))),
                Some(body),
                &key,
            )?)
        }
        ClientCommand::Mask { id, frame, out } => save_body(
            send(
                agent.get(&url(format!("/sessions/{id}/frames/{frame}/mask.png"))),
                None,
                &None,
            )?,
            &out,
        ),
        ClientCommand::VertexMask { id, out } => save_body(
            send(agent.get(&url(format!("/sessions/{id}/vertex-mask.svmk"))), None, &None)?,
            &out,
        ),
        ClientCommand::Render {
            id,
            frame,
            full_res,
            out,
        } => {
            let body = json!({ "frame": frame, "full_res": full_res });
            save_body(
                send(agent.post(&url(format!("/sessions/{id}/render"))), Some(body), &None)?,
                &out,
            )
        }
        ClientCommand::Deform {
            id,
            handles,
            iters,
            key,
        } => {
            let handles: Value = serde_json::from_str(&std::fs::read_to_string(&handles)?)?;
            let body = json!({ "handles": handles, "iterations": iters });
            print_json(send(
                agent.post(&url(format!("/sessions/{id}/deform"))),
                Some(body),
                &key,
            )?)
        }
        ClientCommand::Paint {
            id,
            frame,
            edited,
            tau,
            fine_tune_iters,
            key,
        } => {
            let bytes = std::fs::read(&edited).with_context(|| format!("reading {}", edited.display()))?;
            let path = format!("/sessions/{id}/paint?frame={frame}&tau={tau}&fine_tune_iterations={fine_tune_iters}");
            let mut req = agent.post(&url(path)).set("Content-Type", "image/png");
            if let Some(k) = &key {
                req = req.set("Idempotency-Key", k);
            }
            match req.send_bytes(&bytes) {
                Ok(r) => print_json(r),
                Err(ureq::Error::Status(code, r)) => bail!("{code}: {}", r.into_string().unwrap_or_default()),
                Err(e) => Err(e.into()),
            }
        }
        ClientCommand::Job { id, job } => print_json(send(
            agent.get(&url(format!("/sessions/{id}/jobs/{job}"))),
            None,
            &None,
        )?),
    }
}

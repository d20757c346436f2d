//! Train the geometry and appearance networks on a small scene and render a
//! held-out view.
//!
//! `cargo run --release --example train_render -- 2000`

use serf_core::geometry::Bvh;
use serf_core::metrics::{psnr, ssim};
use serf_core::renderer::{render_image, NetworkConfig, NetworkParams, RenderConfig};
use serf_core::scene_assets::{generate_synthetic_scene, SyntheticSceneSpec};
use serf_core::training::{train, TrainConfig, TrainView};

fn main() -> serf_core::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(1000);
    let mut full = generate_synthetic_scene(&SyntheticSceneSpec::icosphere(3, 12, 64, 0))?;
    full.config.encoding_levels = 2;
    let held_out = 5;
    let train_ids: Vec<usize> = (0..12).filter(|&i| i != held_out).collect();
    let bundle = full.subset(&train_ids);

    let scene = bundle.render_scene()?;
    let bvh = Bvh::build(&bundle.mesh);
    let views = bundle
        .cameras
        .iter()
        .zip(&bundle.views)
        .map(|(c, v)| TrainView::with_silhouette(c.clone(), v.image.clone(), &bvh))
        .collect::<serf_core::Result<Vec<_>>>()?;

    let n = scene.neural();
    let net = NetworkConfig {
        width: 32,
        encoding_levels: 2,
        ..NetworkConfig::default()
    };
    let params = NetworkParams::init(net, n.appearance.dim, n.geometry.dim, 0)?;
    let render = RenderConfig {
        coarse_samples: 16,
        fine_samples: 16,
        batch_rays: 128,
    };
    let config = TrainConfig {
        ray_batch: 64,
        sdf_batch: 64,
        lr: 5e-3,
        final_lr_fraction: 0.1,
        iterations,
        render,
        ..TrainConfig::default()
    };
    let outcome = train(&scene, &views, params, &config)?;
    if let Some(last) = outcome.history.last() {
        println!(
            "step {}: colour {:.4}, sdf {:.4}, eikonal {:.4}",
            last.step, last.color, last.sdf, last.eikonal
        );
    }

    let image = render_image(&scene, &outcome.params, &full.cameras[held_out], &render)?.image;
    let truth = &full.views[held_out].image;
    println!(
        "held-out view: PSNR {:.2} dB, SSIM {:.3}",
        psnr(&image, truth, 1.0)?,
        ssim(&image, truth)?
    );
    let out = std::env::temp_dir().join("serf-render.png");
    image.save(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}

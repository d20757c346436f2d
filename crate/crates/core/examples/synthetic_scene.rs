//! Generate a labelled two-part scene and write it to disk.
//!
//! `cargo run --release --example synthetic_scene -- /tmp/scene`

use std::path::PathBuf;

use serf_core::scene_assets::{generate_synthetic_scene, load_scene, save_scene, SyntheticSceneSpec};
use serf_core::segmentation::OBJECT;

fn main() -> serf_core::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("serf-scene"));
    let bundle = generate_synthetic_scene(&SyntheticSceneSpec::two_part(3, 12, 64, 7))?;
    let manifest = save_scene(&bundle, &out)?;

    let loaded = load_scene(&manifest)?;
    let labels = loaded.labels.as_ref().expect("synthetic scenes are labelled");
    println!(
        "{} vertices ({} object), {} views at {}x{}, written to {}",
        loaded.mesh.vertex_count(),
        labels.count(OBJECT),
        loaded.views.len(),
        loaded.cameras[0].width,
        loaded.cameras[0].height,
        manifest.display()
    );
    Ok(())
}

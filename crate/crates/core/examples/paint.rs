//! Paint on one frame and write the change into the vertex appearance
//! features. Geometry features are left alone.

use serf_core::editing::{detect_edit_region, paint_texture, DEFAULT_TAU};
use serf_core::geometry::Bvh;
use serf_core::neural_mesh::rgb_feature_map;
use serf_core::scene_assets::{generate_synthetic_scene, SyntheticSceneSpec};

fn main() -> serf_core::Result<()> {
    let bundle = generate_synthetic_scene(&SyntheticSceneSpec::icosphere(3, 6, 64, 0))?;
    let neural = bundle.neural_mesh()?;
    let frame = 0;
    let cam = &bundle.cameras[frame];
    let original = &bundle.views[frame].image;

    let mut edited = original.clone();
    for y in 24..40 {
        for x in 20..44 {
            edited.set(x, y, [0.1, 0.3, 0.9]);
        }
    }
    let region = detect_edit_region(frame, original, &edited, DEFAULT_TAU)?;
    let features = rgb_feature_map(&edited, &neural.mesh, &Bvh::build(&neural.mesh), cam)?;
    let painted = paint_texture(&neural, &region, &features, cam, None, bundle.config.k)?;
    println!(
        "{} painted vertices; geometry features unchanged: {}",
        painted.vertices.len(),
        painted.neural.geometry == neural.geometry
    );
    Ok(())
}

//! Drag the segmented object with ARAP handles. Vertex features ride along
//! unchanged, so the edited scene renders without retraining.

use serf_core::editing::{deform_scene, StaticPolicy};
use serf_core::geometry::Vec3;
use serf_core::scene_assets::{generate_synthetic_scene, SyntheticSceneSpec};

fn main() -> serf_core::Result<()> {
    let bundle = generate_synthetic_scene(&SyntheticSceneSpec::two_part(3, 8, 48, 0))?;
    let labels = bundle.labels.clone().expect("synthetic scenes are labelled");
    let neural = bundle.neural_mesh()?;

    // Pin the bottom of the object and lift its top.
    let object = labels.object_vertices();
    let height = |&v: &usize| neural.mesh.vertices()[v].y;
    let top = *object
        .iter()
        .max_by(|a, b| height(a).total_cmp(&height(b)))
        .expect("the object has vertices");
    let bottom = *object
        .iter()
        .min_by(|a, b| height(a).total_cmp(&height(b)))
        .expect("the object has vertices");
    let handles = [
        (top, neural.mesh.vertices()[top] + Vec3::new(0.0, 0.3, 0.0)),
        (bottom, neural.mesh.vertices()[bottom]),
    ];

    let (deformed, arap) = deform_scene(&neural, &labels, &handles, 10, StaticPolicy::AllOther)?;
    println!(
        "ARAP energy per iteration: {:?}",
        arap.energies.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>()
    );
    let moved = (0..neural.mesh.vertex_count())
        .filter(|&v| (deformed.mesh.vertices()[v] - neural.mesh.vertices()[v]).norm() > 1e-9)
        .count();
    println!("{moved} of {} object vertices moved", object.len());
    Ok(())
}

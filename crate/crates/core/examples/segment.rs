//! Interactive segmentation: two clicks on one frame, then prompts are
//! propagated to the next most useful view until every frame is visited.

use serf_core::scene_assets::{generate_synthetic_scene, SyntheticSceneSpec};
use serf_core::segmentation::{run_interactive_loop, OracleSegmenter, Prompt, PromptLabel, OBJECT, OTHER};

fn main() -> serf_core::Result<()> {
    let bundle = generate_synthetic_scene(&SyntheticSceneSpec::two_part(3, 12, 96, 0))?;
    let labels = bundle.labels.clone().expect("synthetic scenes are labelled");
    let seg = bundle.segmentation_scene()?;
    // Stands in for a 2D promptable model: it answers with ground-truth masks.
    let segmenter = OracleSegmenter::new(bundle.mesh.clone(), labels.clone(), bundle.cameras.clone())?;

    let cam = &seg.cameras[0];
    let mut prompts = Vec::new();
    for (want, label) in [(OBJECT, PromptLabel::Object), (OTHER, PromptLabel::Other)] {
        let v = (0..labels.len())
            .find(|&v| seg.visibility[0][v] == 1 && labels.labels()[v] == want)
            .expect("both parts are visible in frame 0");
        let (px, _) = cam.project(&seg.mesh.vertices()[v])?;
        let (x, y) = cam.pixel_index(&px).expect("visible vertices project inside the frame");
        prompts.push(Prompt { frame: 0, x, y, label });
    }

    let session = run_interactive_loop(&seg, &prompts, &segmenter, seg.frame_count())?;
    for round in session.log() {
        println!(
            "round {:>2} frame {:>2}: {:>5} mask pixels, {:>4} object vertices",
            round.round, round.frame, round.mask_pixels, round.fused_object
        );
    }
    let fused = session.fused();
    let agree = (0..labels.len())
        .filter(|&v| fused.labels()[v] == labels.labels()[v])
        .count();
    println!("{agree} of {} vertex labels match ground truth", labels.len());
    Ok(())
}

//! Run the session service on a local port and drive it over HTTP: create a
//! session, click once on each part, and fetch the fused vertex mask.

use std::net::SocketAddr;

use serde_json::{json, Value};
use serf::service::{router, AppState, ServiceConfig};
use serf_core::scene_assets::{generate_synthetic_scene, save_scene, SyntheticSceneSpec};
use serf_core::segmentation::{Prompt, PromptLabel, VertexMask, OBJECT, OTHER};

fn main() -> anyhow::Result<()> {
    let work = tempfile::tempdir()?;
    let bundle = generate_synthetic_scene(&SyntheticSceneSpec::two_part(3, 8, 64, 0))?;
    let manifest = save_scene(&bundle, &work.path().join("scene"))?;

    let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    let listener = runtime.block_on(tokio::net::TcpListener::bind(SocketAddr::from(([127, 0, 0, 1], 0))))?;
    let base = format!("http://{}", listener.local_addr()?);
    let config = ServiceConfig {
        data_dir: work.path().join("sessions"),
        preview_res: 32,
    };
    std::thread::spawn(move || runtime.block_on(async { axum::serve(listener, router(AppState::new(config))).await }));

    let post = |path: &str, body: Value| -> anyhow::Result<Value> {
        let text = ureq::post(&format!("{base}{path}"))
            .set("content-type", "application/json")
            .send_string(&body.to_string())?
            .into_string()?;
        Ok(serde_json::from_str(&text)?)
    };

    let created = post("/sessions", json!({ "manifest": manifest, "segmenter": "oracle" }))?;
    let id = created["id"].as_str().unwrap_or_default().to_string();
    println!("session {id}");

    let labels = bundle.labels.as_ref().expect("synthetic scenes are labelled");
    let seg = bundle.segmentation_scene()?;
    let mut prompts = Vec::new();
    for (want, label) in [(OBJECT, PromptLabel::Object), (OTHER, PromptLabel::Other)] {
        let v = (0..labels.len())
            .find(|&v| seg.visibility[0][v] == 1 && labels.labels()[v] == want)
            .expect("both parts are visible in frame 0");
        let (px, _) = seg.cameras[0].project(&seg.mesh.vertices()[v])?;
        let (x, y) = seg.cameras[0]
            .pixel_index(&px)
            .expect("visible vertices project inside the frame");
        prompts.push(Prompt { frame: 0, x, y, label });
    }
    let state = post(
        &format!("/sessions/{id}/prompts"),
        json!({ "prompts": prompts, "auto_rounds": 7 }),
    )?;
    println!("revision {}", state["revision"]);

    let mut bytes = Vec::new();
    std::io::Read::read_to_end(
        &mut ureq::get(&format!("{base}/sessions/{id}/vertex-mask.svmk"))
            .call()?
            .into_reader(),
        &mut bytes,
    )?;
    let path = work.path().join("mask.svmk");
    std::fs::write(&path, &bytes)?;
    let mask = VertexMask::load(&path)?;
    println!("{} of {} vertices labelled object", mask.count(OBJECT), mask.len());
    Ok(())
}

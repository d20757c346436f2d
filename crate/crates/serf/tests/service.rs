use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use serf::service::{router, AppState, ServiceConfig};
use serf::session::{CreateRequest, PromptRequest, Session};
use serf_core::imaging::{Mask, RgbImage};
use serf_core::scene_assets::{generate_synthetic_scene, save_scene, SceneBundle, SyntheticSceneSpec};
use serf_core::segmentation::{
    run_interactive_loop, OracleSegmenter, Prompt, PromptLabel, SegmentRequest, Segmenter2D, VertexMask, OBJECT, OTHER,
};

struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    manifest: PathBuf,
    bundle: SceneBundle,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let bundle = generate_synthetic_scene(&SyntheticSceneSpec::two_part(2, 6, 40, 0)).unwrap();
    let manifest = save_scene(&bundle, &dir.path().join("scene")).unwrap();
    Fixture {
        data: dir.path().join("data"),
        _dir: dir,
        manifest,
        bundle,
    }
}

fn app(data: &Path) -> Router {
    router(AppState::new(ServiceConfig {
        data_dir: data.to_path_buf(),
        preview_res: 16,
    }))
}

/// First visible object and other vertex on frame 0, as clicks.
fn initial_prompts(bundle: &SceneBundle) -> Vec<Prompt> {
    let scene = bundle.segmentation_scene().unwrap();
    let labels = bundle.labels.as_ref().unwrap();
    let cam = &scene.cameras[0];
    [(OBJECT, PromptLabel::Object), (OTHER, PromptLabel::Other)]
        .into_iter()
        .map(|(want, label)| {
            let v = (0..scene.mesh.vertex_count())
                .find(|&i| scene.visibility[0][i] == 1 && labels.labels()[i] == want)
                .unwrap();
            let (px, _) = cam.project(&scene.mesh.vertices()[v]).unwrap();
            let (x, y) = cam.pixel_index(&px).unwrap();
            Prompt { frame: 0, x, y, label }
        })
        .collect()
}

async fn call(app: &Router, request: Request<Body>) -> (StatusCode, Bytes) {
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    (status, response.into_body().collect().await.unwrap().to_bytes())
}

fn post_json(uri: &str, body: Value) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn json_of(bytes: &Bytes) -> Value {
    serde_json::from_slice(bytes).unwrap_or_else(|_| panic!("not json: {}", String::from_utf8_lossy(bytes)))
}

async fn create(app: &Router, manifest: &Path, segmenter: Option<&str>) -> String {
    let (status, body) = call(
        app,
        post_json("/sessions", json!({ "manifest": manifest, "segmenter": segmenter })),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&body));
    json_of(&body)["id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn prompt_then_mask_has_object_pixels() {
    let f = fixture();
    let app = app(&f.data);
    let id = create(&app, &f.manifest, Some("oracle")).await;
    let p = initial_prompts(&f.bundle)[0];
    let (status, body) = call(
        &app,
        post_json(
            &format!("/sessions/{id}/prompts"),
            json!({ "frame": 0, "x": p.x, "y": p.y, "label": "object" }),
        ),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    assert_eq!(json_of(&body)["revision"], 1);

    let (status, png) = call(&app, get(&format!("/sessions/{id}/frames/0/mask.png"))).await;
    assert_eq!(status, StatusCode::OK);
    assert!(Mask::from_png_bytes(&png, "mask").unwrap().count() >= 1);

    let (status, svmk) = call(&app, get(&format!("/sessions/{id}/vertex-mask.svmk"))).await;
    assert_eq!(status, StatusCode::OK);
    let fused = VertexMask::from_bytes(&svmk, "svmk").unwrap();
    assert!(fused.count(OBJECT) > 0);

    let (_, summary) = call(&app, get(&format!("/sessions/{id}"))).await;
    let summary = json_of(&summary);
    assert_eq!(summary["rounds"], 1);
    assert_eq!(
        summary["fused"]["object"].as_u64().unwrap() as usize,
        fused.count(OBJECT)
    );
}

#[tokio::test]
async fn repeated_idempotency_key_logs_one_round() {
    let f = fixture();
    let app = app(&f.data);
    let id = create(&app, &f.manifest, None).await;
    let p = initial_prompts(&f.bundle)[0];
    let request = || {
        Request::post(format!("/sessions/{id}/prompts"))
            .header("content-type", "application/json")
            .header("idempotency-key", "click-1")
            .body(Body::from(json!({ "prompts": [p] }).to_string()))
            .unwrap()
    };
    let (s1, b1) = call(&app, request()).await;
    let (s2, b2) = call(&app, request()).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(b1, b2);
    let (_, summary) = call(&app, get(&format!("/sessions/{id}"))).await;
    assert_eq!(json_of(&summary)["rounds"], 1);
    assert_eq!(json_of(&summary)["revision"], 1);
}

#[tokio::test]
async fn unknown_sessions_and_stale_revisions_are_rejected() {
    let f = fixture();
    let app = app(&f.data);
    let (status, body) = call(&app, get("/sessions/s999999")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(json_of(&body)["error"], "not_found");
    assert_eq!(call(&app, get("/sessions/..%2F..")).await.0, StatusCode::NOT_FOUND);

    let id = create(&app, &f.manifest, None).await;
    let p = initial_prompts(&f.bundle)[0];
    let stale = Request::post(format!("/sessions/{id}/prompts"))
        .header("content-type", "application/json")
        .header("if-match", "7")
        .body(Body::from(json!({ "prompts": [p] }).to_string()))
        .unwrap();
    let (status, body) = call(&app, stale).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(json_of(&body)["detail"].as_str().unwrap().contains("revision 0"));

    let outside = json!({ "frame": 0, "x": 4000, "y": 0, "label": "object" });
    assert_eq!(
        call(&app, post_json(&format!("/sessions/{id}/prompts"), outside))
            .await
            .0,
        StatusCode::BAD_REQUEST
    );
    let missing = json!({ "manifest": f.manifest.with_file_name("nope.json") });
    assert_eq!(
        call(&app, post_json("/sessions", missing)).await.0,
        StatusCode::BAD_REQUEST
    );
}

#[tokio::test]
async fn service_and_cli_loop_agree_and_replay_is_exact() {
    let f = fixture();
    let app = app(&f.data);
    let id = create(&app, &f.manifest, None).await;
    let prompts = initial_prompts(&f.bundle);
    let rounds = 6;
    let body = json!({ "prompts": prompts, "auto_rounds": rounds - 1 });
    let (status, _) = call(&app, post_json(&format!("/sessions/{id}/prompts"), body)).await;
    assert_eq!(status, StatusCode::OK);
    let (_, served) = call(&app, get(&format!("/sessions/{id}/vertex-mask.svmk"))).await;

    let scene = f.bundle.segmentation_scene().unwrap();
    let oracle = OracleSegmenter::new(
        f.bundle.mesh.clone(),
        f.bundle.labels.clone().unwrap(),
        f.bundle.cameras.clone(),
    )
    .unwrap();
    let cli = run_interactive_loop(&scene, &prompts, &oracle, rounds).unwrap();
    assert_eq!(served.as_ref(), cli.fused().to_bytes().as_slice());

    let replayed = Session::open(&f.data, &id).unwrap();
    assert_eq!(replayed.vertex_mask_bytes(), served.as_ref());
    assert_eq!(replayed.revision(), 1);
    assert_eq!(replayed.rounds(), cli.log());
}

#[tokio::test]
async fn deform_paint_render_and_job() {
    let f = fixture();
    let app = app(&f.data);
    let id = create(&app, &f.manifest, None).await;
    let prompts = initial_prompts(&f.bundle);
    let body = json!({ "prompts": prompts, "auto_rounds": 5 });
    call(&app, post_json(&format!("/sessions/{id}/prompts"), body)).await;
    let (_, svmk) = call(&app, get(&format!("/sessions/{id}/vertex-mask.svmk"))).await;
    let fused = VertexMask::from_bytes(&svmk, "svmk").unwrap();

    let v = fused.object_vertices()[0];
    let target: Vec<f64> = f.bundle.mesh.vertices()[v].iter().map(|c| c + 0.05).collect();
    let deform = json!({ "handles": [{ "vertex": v, "target": target }], "iterations": 3 });
    let (status, body) = call(&app, post_json(&format!("/sessions/{id}/deform"), deform)).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    assert_eq!(json_of(&body)["revision"], 2);

    let other = (0..fused.len()).find(|&i| fused.labels()[i] == OTHER).unwrap();
    let bad = json!({ "handles": [{ "vertex": other, "target": [0.0, 0.0, 0.0] }] });
    assert_eq!(
        call(&app, post_json(&format!("/sessions/{id}/deform"), bad)).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );

    let mut edited = f.bundle.views[0].image.clone();
    for y in 14..26 {
        for x in 14..26 {
            edited.set(x, y, [1.0, 0.0, 0.0]);
        }
    }
    let paint = Request::post(format!("/sessions/{id}/paint?frame=0&tau=0.05&fine_tune_iterations=0"))
        .header("content-type", "image/png")
        .body(Body::from(edited.to_png_bytes()))
        .unwrap();
    let (status, body) = call(&app, paint).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let painted = json_of(&body);
    assert!(painted["painted_vertices"].as_u64().unwrap() > 0);
    let job = painted["job"].as_u64().unwrap();

    let mut state = Value::Null;
    for _ in 0..500 {
        let (_, body) = call(&app, get(&format!("/sessions/{id}/jobs/{job}"))).await;
        state = json_of(&body);
        if state["state"] == "done" || state["state"] == "failed" {
            break;
        }
        tokio::task::spawn_blocking(|| std::thread::sleep(std::time::Duration::from_millis(20)))
            .await
            .unwrap();
    }
    assert_eq!(state["state"], "done", "{state}");
    assert_eq!(state["revision"], 4);
    assert_eq!(
        call(&app, get(&format!("/sessions/{id}/jobs/99"))).await.0,
        StatusCode::NOT_FOUND
    );

    let (status, png) = call(
        &app,
        post_json(&format!("/sessions/{id}/render"), json!({ "frame": 1 })),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let preview = RgbImage::from_png_bytes(&png, "render").unwrap();
    assert_eq!((preview.width, preview.height), (16, 16));

    let replayed = Session::open(&f.data, &id).unwrap();
    let live = Session::open(&f.data, &id).unwrap();
    assert_eq!(replayed.revision(), 4);
    assert_eq!(replayed.snapshot().neural.to_bytes(), live.snapshot().neural.to_bytes());
    assert_eq!(replayed.job(job).unwrap().revision, Some(4));
}

/// Serves `POST /segment` from an oracle, the way the exporter's segmenter
/// endpoint would.
async fn spawn_remote_segmenter(bundle: &SceneBundle) -> String {
    let oracle = Arc::new(
        OracleSegmenter::new(
            bundle.mesh.clone(),
            bundle.labels.clone().unwrap(),
            bundle.cameras.clone(),
        )
        .unwrap(),
    );
    let blank = RgbImage::new(1, 1);
    let app = Router::new().route(
        "/segment",
        axum::routing::post(move |axum::Json(req): axum::Json<SegmentRequest>| {
            let (oracle, blank) = (oracle.clone(), blank.clone());
            async move { oracle.segment(&req, &blank).unwrap().to_png_bytes() }
        }),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}")
}

#[tokio::test]
async fn remote_segmenter_matches_oracle_and_outages_surface_as_502() {
    let f = fixture();
    let app = app(&f.data);
    let url = spawn_remote_segmenter(&f.bundle).await;
    let prompts = initial_prompts(&f.bundle);
    let body = json!({ "prompts": prompts, "auto_rounds": 2 });

    let remote = create(&app, &f.manifest, Some(&format!("remote:{url}"))).await;
    let oracle = create(&app, &f.manifest, Some("oracle")).await;
    for id in [&remote, &oracle] {
        let (status, b) = call(&app, post_json(&format!("/sessions/{id}/prompts"), body.clone())).await;
        assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&b));
    }
    let (_, a) = call(&app, get(&format!("/sessions/{remote}/vertex-mask.svmk"))).await;
    let (_, b) = call(&app, get(&format!("/sessions/{oracle}/vertex-mask.svmk"))).await;
    assert_eq!(a, b);

    let dead = create(&app, &f.manifest, Some("remote:http://127.0.0.1:9")).await;
    let (status, b) = call(&app, post_json(&format!("/sessions/{dead}/prompts"), body)).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    assert!(json_of(&b)["detail"].as_str().unwrap().contains("127.0.0.1:9"));
    let (_, summary) = call(&app, get(&format!("/sessions/{dead}"))).await;
    assert_eq!(json_of(&summary)["revision"], 0);
    assert_eq!(json_of(&summary)["rounds"], 0);
}

#[test]
fn sessions_work_without_the_http_layer() {
    let f = fixture();
    let session = Session::create(
        &f.data,
        &CreateRequest {
            manifest: f.manifest.clone(),
            params: None,
            segmenter: None,
        },
    )
    .unwrap();
    let request = PromptRequest {
        prompts: initial_prompts(&f.bundle),
        ..Default::default()
    };
    session.submit_prompts(&request, Some("k"), Some(0)).unwrap();
    session.submit_prompts(&request, Some("k"), Some(0)).unwrap();
    assert_eq!(session.events().unwrap().len(), 2);
    assert!(matches!(
        session.submit_prompts(&request, None, Some(0)),
        Err(serf::SessionError::Conflict(_))
    ));
}

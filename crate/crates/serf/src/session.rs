//! Event-sourced editing sessions.
//!
//! Every successful mutation is appended to `events.jsonl` in the session
//! directory before it becomes visible, and [`Session::open`] rebuilds a
//! session by replaying that log from the initial scene.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use serf_core::editing::{
    deform_scene, detect_edit_region, paint_texture, Handle, StaticPolicy, DEFAULT_ITERATIONS, DEFAULT_TAU,
};
use serf_core::geometry::{Bvh, CameraModel};
use serf_core::imaging::RgbImage;
use serf_core::neural_mesh::{rgb_feature_map, NeuralMesh, RGB_FEATURE_CHANNELS};
use serf_core::renderer::{render_image, NetworkConfig, NetworkParams, RenderConfig, RenderScene};
use serf_core::scene_assets::{load_scene, SceneBundle};
use serf_core::segmentation::{
    project_mask, Prompt, PromptLabel, RoundLog, SegmentationScene, SegmentationSession, Segmenter2D, VertexMask,
    OBJECT, OTHER, UNOBSERVED,
};
use serf_core::training::{fine_tune_appearance, TrainConfig, TrainView};

use crate::backend::SegmenterSpec;

const EVENTS_FILE: &str = "events.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Unprocessable(String),
    /// The segmenter backend failed; carries its detail.
    #[error("{0}")]
    Dependency(String),
    #[error("{0}")]
    Internal(String),
}

impl From<serf_core::Error> for SessionError {
    fn from(e: serf_core::Error) -> Self {
        use serf_core::Error as E;
        match e {
            E::Segmenter(_) => SessionError::Dependency(e.to_string()),
            E::Io { .. } => SessionError::Internal(e.to_string()),
            E::Deformation(_) | E::NumericalFault { .. } | E::Diverged { .. } => {
                SessionError::Unprocessable(e.to_string())
            }
            _ => SessionError::BadRequest(e.to_string()),
        }
    }
}

pub type SessionResult<T> = std::result::Result<T, SessionError>;

fn internal(e: impl std::fmt::Display) -> SessionError {
    SessionError::Internal(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateRequest {
    /// Path of the scene manifest (`scene.json`).
    pub manifest: PathBuf,
    /// Network checkpoint; a seeded default network is used when absent.
    #[serde(default)]
    pub params: Option<PathBuf>,
    /// Segmenter spec; see [`SegmenterSpec`].
    #[serde(default)]
    pub segmenter: Option<String>,
}

/// One click, or a list of clicks on a single frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompts: Vec<Prompt>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PromptLabel>,
    /// Automatic rounds to run after the user's round.
    #[serde(default)]
    pub auto_rounds: usize,
}

impl PromptRequest {
    pub fn prompts(&self) -> SessionResult<Vec<Prompt>> {
        let mut out = self.prompts.clone();
        match (self.frame, self.x, self.y, self.label) {
            (Some(frame), Some(x), Some(y), Some(label)) => out.push(Prompt { frame, x, y, label }),
            (None, None, None, None) => {}
            _ => {
                return Err(SessionError::BadRequest(
                    "a single prompt needs frame, x, y and label".into(),
                ))
            }
        }
        let Some(first) = out.first() else {
            return Err(SessionError::BadRequest("no prompts given".into()));
        };
        if out.iter().any(|p| p.frame != first.frame) {
            return Err(SessionError::BadRequest(
                "all prompts of a request must be on one frame".into(),
            ));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformRequest {
    pub handles: Vec<Handle>,
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default)]
    pub policy: Option<StaticPolicy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaintRequest {
    pub frame: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_fine_tune")]
    pub fine_tune_iterations: usize,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

fn default_fine_tune() -> usize {
    serf_core::editing::DEFAULT_FINE_TUNE_ITERATIONS
}

/// Log entry kinds. `Created` is always first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Created {
        manifest: PathBuf,
        params: Option<PathBuf>,
        segmenter: String,
    },
    Prompts {
        prompts: Vec<Prompt>,
        auto_rounds: usize,
    },
    Deform {
        handles: Vec<Handle>,
        iterations: usize,
        policy: StaticPolicy,
    },
    Paint {
        frame: usize,
        tau: f64,
        /// Edited image, relative to the session directory.
        edited: String,
        fine_tune_iterations: usize,
        job: Option<u64>,
    },
    FineTuned {
        job: u64,
        /// Resulting checkpoint, relative to the session directory.
        params: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub revision: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    pub event: Event,
    pub response: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobInfo {
    pub id: u64,
    pub kind: String,
    pub state: JobState,
    pub frames: Vec<usize>,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Revision that committed the job's result.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revision: Option<u64>,
}

/// Appearance fine-tuning left to run after a paint edit.
#[derive(Debug, Clone)]
pub struct PendingJob {
    pub id: u64,
    frame: usize,
    edited: RgbImage,
    iterations: usize,
}

/// Immutable per-session inputs.
pub struct SessionAssets {
    pub bundle: SceneBundle,
    pub segmentation: SegmentationScene,
    pub segmenter: Arc<dyn Segmenter2D + Send + Sync>,
    pub segmenter_spec: String,
}

/// State as of one committed revision; reads never wait on mutations.
pub struct Snapshot {
    pub revision: u64,
    pub fused: VertexMask,
    pub neural: Arc<NeuralMesh>,
    pub params: Arc<NetworkParams>,
    pub summary: Value,
    render: OnceLock<Arc<RenderScene>>,
}

impl Snapshot {
    fn render_scene(&self, bundle: &SceneBundle) -> SessionResult<Arc<RenderScene>> {
        if let Some(r) = self.render.get() {
            return Ok(r.clone());
        }
        let scene = Arc::new(RenderScene::new(
            (*self.neural).clone(),
            bundle.config.k,
            bundle.config.band_scale,
        )?);
        Ok(self.render.get_or_init(|| scene).clone())
    }
}

#[derive(Clone)]
struct State {
    revision: u64,
    neural: Arc<NeuralMesh>,
    params: Arc<NetworkParams>,
    segmentation: SegmentationSession,
    user_prompts: BTreeMap<usize, Vec<Prompt>>,
    idempotency: HashMap<String, Value>,
    next_job: u64,
}

enum Change {
    Segmentation {
        session: SegmentationSession,
        user_prompts: BTreeMap<usize, Vec<Prompt>>,
    },
    Neural(NeuralMesh),
    Painted {
        neural: NeuralMesh,
        job: Option<JobInfo>,
    },
    Params {
        job: u64,
        params: NetworkParams,
    },
}

pub struct Session {
    pub id: String,
    dir: PathBuf,
    pub assets: Arc<SessionAssets>,
    state: Mutex<State>,
    committed: RwLock<Arc<Snapshot>>,
    jobs: Mutex<BTreeMap<u64, JobInfo>>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

pub fn session_dir(data_dir: &Path, id: &str) -> PathBuf {
    data_dir.join("sessions").join(id)
}

fn default_params(neural: &NeuralMesh, bundle: &SceneBundle) -> SessionResult<NetworkParams> {
    let config = NetworkConfig {
        encoding_levels: bundle.config.encoding_levels,
        ..NetworkConfig::default()
    };
    Ok(NetworkParams::init(
        config,
        neural.appearance.dim,
        neural.geometry.dim,
        0,
    )?)
}

impl Session {
    /// Creates a session directory under `data_dir/sessions` and writes the
    /// initial event.
    pub fn create(data_dir: &Path, request: &CreateRequest) -> SessionResult<Arc<Session>> {
        let manifest = request
            .manifest
            .canonicalize()
            .map_err(|e| SessionError::BadRequest(format!("manifest {}: {e}", request.manifest.display())))?;
        let params = match &request.params {
            Some(p) => Some(
                p.canonicalize()
                    .map_err(|e| SessionError::BadRequest(format!("params {}: {e}", p.display())))?,
            ),
            None => None,
        };
        let spec = SegmenterSpec::resolve(request.segmenter.as_deref())?;
        let segmenter = match spec {
            SegmenterSpec::Oracle(p) => SegmenterSpec::Oracle(
                p.canonicalize()
                    .map_err(|e| SessionError::BadRequest(format!("oracle labels {}: {e}", p.display())))?,
            ),
            other => other,
        };
        let created = Event::Created {
            manifest,
            params,
            segmenter: segmenter.to_spec_string(),
        };
        let sessions = data_dir.join("sessions");
        fs::create_dir_all(&sessions).map_err(internal)?;
        let (assets, state) = Self::initial(&created)?;
        let (id, dir) = (1u64..)
            .map(|n| format!("s{n:06}"))
            .find_map(|id| {
                let dir = sessions.join(&id);
                fs::create_dir(&dir).ok().map(|_| (id, dir))
            })
            .expect("an unused session id");
        let session = Session::assemble(id, dir, assets, state);
        let response = json!({ "id": session.id, "revision": 0 });
        session.append(&EventRecord {
            revision: 0,
            key: None,
            event: created,
            response,
        })?;
        Ok(Arc::new(session))
    }

    /// Rebuilds a session from its event log.
    pub fn open(data_dir: &Path, id: &str) -> SessionResult<Arc<Session>> {
        if !valid_id(id) {
            return Err(SessionError::NotFound(format!("no session {id:?}")));
        }
        let dir = session_dir(data_dir, id);
        let records = read_log(&dir.join(EVENTS_FILE)).map_err(|e| match e {
            SessionError::NotFound(_) => SessionError::NotFound(format!("no session {id}")),
            other => other,
        })?;
        let Some((first, rest)) = records.split_first() else {
            return Err(SessionError::Internal(format!("session {id} has an empty log")));
        };
        let (assets, state) = Self::initial(&first.event)?;
        let session = Session::assemble(id.to_string(), dir, assets, state);
        {
            let mut state = session.state.lock().unwrap();
            for record in rest {
                let (change, _) = session.compute(&state, &record.event, None)?;
                session.commit(&mut state, change);
                if state.revision != record.revision {
                    return Err(SessionError::Internal(format!(
                        "replay reached revision {} where the log says {}",
                        state.revision, record.revision
                    )));
                }
                if let Some(k) = &record.key {
                    state.idempotency.insert(k.clone(), record.response.clone());
                }
            }
            let mut jobs = session.jobs.lock().unwrap();
            for job in jobs.values_mut() {
                if matches!(job.state, JobState::Queued | JobState::Running) {
                    job.state = JobState::Failed;
                    job.error = Some("service stopped before the job finished".into());
                }
            }
            drop(jobs);
            session.publish(&state);
        }
        Ok(Arc::new(session))
    }

    fn initial(created: &Event) -> SessionResult<(SessionAssets, State)> {
        let Event::Created {
            manifest,
            params,
            segmenter,
        } = created
        else {
            return Err(SessionError::Internal("log does not start with a created event".into()));
        };
        let bundle = load_scene(manifest)?;
        let neural = bundle.neural_mesh()?;
        let params = match params {
            Some(p) => NetworkParams::load(p)?,
            None => default_params(&neural, &bundle)?,
        };
        let spec = SegmenterSpec::parse(segmenter)?;
        let segmentation = bundle.segmentation_scene()?;
        let seg_session = SegmentationSession::new(&segmentation);
        let assets = SessionAssets {
            segmenter: spec.build(&bundle)?,
            segmenter_spec: segmenter.clone(),
            bundle,
            segmentation,
        };
        let state = State {
            revision: 0,
            neural: Arc::new(neural),
            params: Arc::new(params),
            segmentation: seg_session,
            user_prompts: BTreeMap::new(),
            idempotency: HashMap::new(),
            next_job: 1,
        };
        Ok((assets, state))
    }

    fn assemble(id: String, dir: PathBuf, assets: SessionAssets, state: State) -> Session {
        let session = Session {
            id,
            dir,
            assets: Arc::new(assets),
            committed: RwLock::new(Arc::new(Snapshot {
                revision: 0,
                fused: state.segmentation.fused().clone(),
                neural: state.neural.clone(),
                params: state.params.clone(),
                summary: Value::Null,
                render: OnceLock::new(),
            })),
            state: Mutex::new(state),
            jobs: Mutex::new(BTreeMap::new()),
        };
        session.publish(&session.state.lock().unwrap());
        session
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.committed.read().unwrap().clone()
    }

    pub fn revision(&self) -> u64 {
        self.snapshot().revision
    }

    pub fn job(&self, id: u64) -> Option<JobInfo> {
        self.jobs.lock().unwrap().get(&id).cloned()
    }

    /// Log records as written.
    pub fn events(&self) -> SessionResult<Vec<EventRecord>> {
        read_log(&self.dir.join(EVENTS_FILE))
    }

    fn summary(&self, state: &State) -> Value {
        let fused = state.segmentation.fused();
        let jobs: Vec<JobInfo> = self.jobs.lock().unwrap().values().cloned().collect();
        json!({
            "id": self.id,
            "revision": state.revision,
            "frames": self.assets.bundle.cameras.len(),
            "vertices": fused.len(),
            "segmenter": self.assets.segmenter_spec,
            "fused": {
                "object": fused.count(OBJECT),
                "other": fused.count(OTHER),
                "unobserved": fused.count(UNOBSERVED),
            },
            "rounds": state.segmentation.log().len(),
            "used_frames": state.segmentation.used().iter().enumerate().filter(|(_, u)| **u).map(|(i, _)| i).collect::<Vec<_>>(),
            "pending_frame": state.segmentation.pending().map(|(f, _)| f),
            "complete": state.segmentation.is_complete(),
            "jobs": jobs,
        })
    }

    fn publish(&self, state: &State) {
        let snapshot = Snapshot {
            revision: state.revision,
            fused: state.segmentation.fused().clone(),
            neural: state.neural.clone(),
            params: state.params.clone(),
            summary: self.summary(state),
            render: OnceLock::new(),
        };
        *self.committed.write().unwrap() = Arc::new(snapshot);
    }

    fn append(&self, record: &EventRecord) -> SessionResult<()> {
        let path = self.dir.join(EVENTS_FILE);
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(internal)?;
        let mut line = serde_json::to_string(record).map_err(internal)?;
        line.push('\n');
        file.write_all(line.as_bytes()).map_err(internal)?;
        file.sync_data().map_err(internal)
    }

    /// Runs `event` against `state` without changing it. `edited` carries
    /// the paint image when it is not yet on disk.
    fn compute(&self, state: &State, event: &Event, edited: Option<&RgbImage>) -> SessionResult<(Change, Value)> {
        let assets = &self.assets;
        match event {
            Event::Created { .. } => Err(SessionError::Internal("created event after the first".into())),
            Event::Prompts { prompts, auto_rounds } => {
                let frame = prompts[0].frame;
                let mut user_prompts = state.user_prompts.clone();
                let list = user_prompts.entry(frame).or_default();
                for p in prompts {
                    if !list.contains(p) {
                        list.push(*p);
                    }
                }
                let round_prompts = list.clone();
                let mut session = state.segmentation.clone();
                let first = session
                    .run_round(&assets.segmentation, assets.segmenter.as_ref(), frame, &round_prompts)?
                    .clone();
                if let Some(reason) = &first.skipped {
                    return Err(SessionError::Dependency(reason.clone()));
                }
                let mut rounds = vec![first];
                for _ in 0..*auto_rounds {
                    match session.run_pending(&assets.segmentation, assets.segmenter.as_ref())? {
                        Some(log) => rounds.push(log.clone()),
                        None => break,
                    }
                }
                let response = json!({
                    "revision": state.revision + 1,
                    "rounds": rounds,
                    "fused_object": session.fused().count(OBJECT),
                    "pending_frame": session.pending().map(|(f, _)| f),
                    "complete": session.is_complete(),
                });
                Ok((Change::Segmentation { session, user_prompts }, response))
            }
            Event::Deform {
                handles,
                iterations,
                policy,
            } => {
                let handles: Vec<_> = handles.iter().map(|h| (h.vertex, h.target.into())).collect();
                let (neural, result) = deform_scene(
                    &state.neural,
                    state.segmentation.fused(),
                    &handles,
                    *iterations,
                    *policy,
                )?;
                let response = json!({
                    "revision": state.revision + 1,
                    "iterations": iterations,
                    "energy_initial": result.energies.first(),
                    "energy_final": result.energies.last(),
                });
                Ok((Change::Neural(neural), response))
            }
            Event::Paint {
                frame,
                tau,
                edited: rel,
                fine_tune_iterations,
                job,
            } => {
                let loaded;
                let edited = match edited {
                    Some(e) => e,
                    None => {
                        loaded = RgbImage::load(&self.dir.join(rel))?;
                        &loaded
                    }
                };
                let camera = self.camera(*frame)?;
                let original = &assets.bundle.views[*frame].image;
                let region = detect_edit_region(*frame, original, edited, *tau)?;
                let neural = &state.neural;
                if neural.appearance.dim != RGB_FEATURE_CHANNELS as usize {
                    return Err(SessionError::Unprocessable(format!(
                        "edited frames need {}-channel appearance features from the exporter; only the {}-channel RGB fallback is computed here",
                        neural.appearance.dim, RGB_FEATURE_CHANNELS
                    )));
                }
                let bvh = Bvh::build(&neural.mesh);
                let features = rgb_feature_map(edited, &neural.mesh, &bvh, camera)?;
                let result = paint_texture(neural, &region, &features, camera, None, assets.bundle.config.k)?;
                let job = match (job, &result.job) {
                    (Some(id), Some(j)) => Some(JobInfo {
                        id: *id,
                        kind: "fine_tune_appearance".into(),
                        state: JobState::Queued,
                        frames: j.frames.clone(),
                        iterations: *fine_tune_iterations,
                        error: None,
                        revision: None,
                    }),
                    _ => None,
                };
                let response = json!({
                    "revision": state.revision + 1,
                    "edited_pixels": region.mask.count(),
                    "painted_vertices": result.vertices.len(),
                    "job": job.as_ref().map(|j| j.id),
                });
                Ok((
                    Change::Painted {
                        neural: result.neural,
                        job,
                    },
                    response,
                ))
            }
            Event::FineTuned { job, params } => {
                let params = NetworkParams::load(&self.dir.join(params))?;
                let response = json!({ "revision": state.revision + 1, "job": job });
                Ok((Change::Params { job: *job, params }, response))
            }
        }
    }

    fn commit(&self, state: &mut State, change: Change) {
        state.revision += 1;
        match change {
            Change::Segmentation { session, user_prompts } => {
                state.segmentation = session;
                state.user_prompts = user_prompts;
            }
            Change::Neural(n) => state.neural = Arc::new(n),
            Change::Painted { neural, job } => {
                state.neural = Arc::new(neural);
                if let Some(job) = job {
                    state.next_job = state.next_job.max(job.id + 1);
                    self.jobs.lock().unwrap().insert(job.id, job);
                }
            }
            Change::Params { job, params } => {
                state.params = Arc::new(params);
                if let Some(info) = self.jobs.lock().unwrap().get_mut(&job) {
                    info.state = JobState::Done;
                    info.error = None;
                    info.revision = Some(state.revision);
                }
            }
        }
    }

    fn camera(&self, frame: usize) -> SessionResult<&CameraModel> {
        self.assets
            .bundle
            .cameras
            .get(frame)
            .ok_or_else(|| SessionError::BadRequest(format!("frame {frame} of {}", self.assets.bundle.cameras.len())))
    }

    /// Shared path of every mutating call: idempotency, the revision
    /// precondition, compute, log, commit.
    fn mutate(
        &self,
        key: Option<&str>,
        expected_revision: Option<u64>,
        build: impl FnOnce(&State) -> SessionResult<(Event, Option<RgbImage>)>,
    ) -> SessionResult<Value> {
        let mut state = self.state.lock().unwrap();
        if let Some(k) = key {
            if let Some(previous) = state.idempotency.get(k) {
                return Ok(previous.clone());
            }
        }
        if let Some(rev) = expected_revision {
            if rev != state.revision {
                return Err(SessionError::Conflict(format!(
                    "session is at revision {}, request expected {rev}",
                    state.revision
                )));
            }
        }
        let (event, edited) = build(&state)?;
        let (change, response) = self.compute(&state, &event, edited.as_ref())?;
        if let (Event::Paint { edited: rel, .. }, Some(image)) = (&event, &edited) {
            let path = self.dir.join(rel);
            fs::create_dir_all(path.parent().unwrap()).map_err(internal)?;
            image.save(&path)?;
        }
        self.append(&EventRecord {
            revision: state.revision + 1,
            key: key.map(str::to_string),
            event,
            response: response.clone(),
        })?;
        self.commit(&mut state, change);
        if let Some(k) = key {
            state.idempotency.insert(k.to_string(), response.clone());
        }
        self.publish(&state);
        Ok(response)
    }

    /// Runs one round on the prompts' frame with every prompt the user has
    /// placed there, then up to `auto_rounds` propagated rounds.
    pub fn submit_prompts(
        &self,
        request: &PromptRequest,
        key: Option<&str>,
        expected_revision: Option<u64>,
    ) -> SessionResult<Value> {
        let prompts = request.prompts()?;
        let camera = self.camera(prompts[0].frame)?;
        if let Some(p) = prompts.iter().find(|p| p.x >= camera.width || p.y >= camera.height) {
            return Err(SessionError::BadRequest(format!(
                "prompt ({}, {}) outside frame {}",
                p.x, p.y, p.frame
            )));
        }
        self.mutate(key, expected_revision, |_| {
            Ok((
                Event::Prompts {
                    prompts,
                    auto_rounds: request.auto_rounds,
                },
                None,
            ))
        })
    }

    /// ARAP deformation of the object under the current fused mask.
    pub fn deform(
        &self,
        request: &DeformRequest,
        key: Option<&str>,
        expected_revision: Option<u64>,
    ) -> SessionResult<Value> {
        self.mutate(key, expected_revision, |_| {
            Ok((
                Event::Deform {
                    handles: request.handles.clone(),
                    iterations: request.iterations.unwrap_or(DEFAULT_ITERATIONS),
                    policy: request.policy.unwrap_or_default(),
                },
                None,
            ))
        })
    }

    /// Applies a painted frame. The returned job, if any, must be handed to
    /// [`Session::run_job`].
    pub fn paint(
        &self,
        request: &PaintRequest,
        png: &[u8],
        key: Option<&str>,
        expected_revision: Option<u64>,
    ) -> SessionResult<(Value, Option<PendingJob>)> {
        let camera = self.camera(request.frame)?;
        if !(request.tau.is_finite() && request.tau >= 0.0) {
            return Err(SessionError::BadRequest(format!(
                "tau must be a non-negative number, got {}",
                request.tau
            )));
        }
        let edited = RgbImage::from_png_bytes(png, "edited frame")?;
        if (edited.width, edited.height) != (camera.width, camera.height) {
            return Err(SessionError::BadRequest(format!(
                "edited frame is {}x{}, frame {} is {}x{}",
                edited.width, edited.height, request.frame, camera.width, camera.height
            )));
        }
        let response = self.mutate(key, expected_revision, |state| {
            let edited_rel = format!("edits/rev-{:06}.png", state.revision + 1);
            Ok((
                Event::Paint {
                    frame: request.frame,
                    tau: request.tau,
                    edited: edited_rel,
                    fine_tune_iterations: request.fine_tune_iterations,
                    job: Some(state.next_job),
                },
                Some(edited.clone()),
            ))
        })?;
        let pending = response["job"].as_u64().and_then(|id| {
            let queued = self.job(id).is_some_and(|j| j.state == JobState::Queued);
            queued.then(|| PendingJob {
                id,
                frame: request.frame,
                edited: edited.clone(),
                iterations: request.fine_tune_iterations,
            })
        });
        Ok((response, pending))
    }

    /// Fine-tunes the appearance network on every frame, with the painted
    /// frame replaced, and commits the new checkpoint. Blocking.
    pub fn run_job(&self, job: PendingJob) {
        let set_state = |s: JobState, error: Option<String>| {
            if let Some(info) = self.jobs.lock().unwrap().get_mut(&job.id) {
                info.state = s;
                info.error = error;
            }
        };
        set_state(JobState::Running, None);
        self.publish(&self.state.lock().unwrap());
        match self.fine_tune(&job) {
            Ok(()) => {}
            Err(e) => {
                log::warn!("session {}: job {} failed: {e}", self.id, job.id);
                set_state(JobState::Failed, Some(e.to_string()));
                self.publish(&self.state.lock().unwrap());
            }
        }
    }

    fn fine_tune(&self, job: &PendingJob) -> SessionResult<()> {
        let (neural, params) = {
            let state = self.state.lock().unwrap();
            (state.neural.clone(), state.params.clone())
        };
        let bundle = &self.assets.bundle;
        let scene = RenderScene::new((*neural).clone(), bundle.config.k, bundle.config.band_scale)?;
        let views = bundle
            .cameras
            .iter()
            .zip(&bundle.views)
            .enumerate()
            .map(|(i, (camera, view))| {
                let image = if i == job.frame {
                    job.edited.clone()
                } else {
                    view.image.clone()
                };
                TrainView::with_silhouette(camera.clone(), image, scene.bvh())
            })
            .collect::<serf_core::Result<Vec<_>>>()?;
        let config = TrainConfig {
            iterations: job.iterations,
            ray_batch: 256,
            seed: job.id,
            ..TrainConfig::default()
        };
        let (tuned, _) = fine_tune_appearance(&scene, &views, (*params).clone(), &config)?.into_result()?;
        let rel = format!("params/job-{:06}.smlp", job.id);
        let path = self.dir.join(&rel);
        fs::create_dir_all(path.parent().unwrap()).map_err(internal)?;
        tuned.save(&path)?;
        let mut state = self.state.lock().unwrap();
        let event = Event::FineTuned {
            job: job.id,
            params: rel,
        };
        let (change, response) = self.compute(&state, &event, None)?;
        self.append(&EventRecord {
            revision: state.revision + 1,
            key: None,
            event,
            response,
        })?;
        self.commit(&mut state, change);
        self.publish(&state);
        Ok(())
    }

    /// Projection of the fused mask onto `frame`, as a PNG.
    pub fn mask_png(&self, frame: usize) -> SessionResult<Vec<u8>> {
        let camera = self.camera(frame)?;
        let snapshot = self.snapshot();
        let seg = &self.assets.segmentation;
        Ok(project_mask(&snapshot.fused, camera, &seg.mesh, &seg.bvh).to_png_bytes())
    }

    pub fn vertex_mask_bytes(&self) -> Vec<u8> {
        self.snapshot().fused.to_bytes()
    }

    /// Renders `frame` at full resolution or scaled so its longer side is
    /// `preview_size`.
    pub fn render(&self, frame: usize, full_res: bool, preview_size: u32) -> SessionResult<Vec<u8>> {
        let camera = preview_camera(self.camera(frame)?, full_res, preview_size);
        let snapshot = self.snapshot();
        let scene = snapshot.render_scene(&self.assets.bundle)?;
        let out = render_image(&scene, &snapshot.params, &camera, &RenderConfig::default())?;
        Ok(out.image.to_png_bytes())
    }

    /// Log of every segmentation round so far.
    pub fn rounds(&self) -> Vec<RoundLog> {
        self.state.lock().unwrap().segmentation.log().to_vec()
    }
}

/// `camera` itself, or a copy whose longer side is at most `preview_size`.
pub fn preview_camera(camera: &CameraModel, full_res: bool, preview_size: u32) -> CameraModel {
    let longest = camera.width.max(camera.height);
    if full_res || preview_size == 0 || longest <= preview_size {
        return camera.clone();
    }
    let scale = preview_size as f64 / longest as f64;
    let w = ((camera.width as f64 * scale).round() as u32).max(1);
    let h = ((camera.height as f64 * scale).round() as u32).max(1);
    camera.resized(w, h)
}

fn read_log(path: &Path) -> SessionResult<Vec<EventRecord>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(SessionError::NotFound(format!("{} not found", path.display())))
        }
        Err(e) => return Err(internal(e)),
    };
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(internal)?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EventRecord = serde_json::from_str(&line)
            .map_err(|e| SessionError::Internal(format!("{} line {}: {e}", path.display(), n + 1)))?;
        out.push(record);
    }
    Ok(out)
}

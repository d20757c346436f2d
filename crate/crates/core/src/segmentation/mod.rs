//! Interactive 3D segmentation on mesh vertices.
//!
//! 2D masks from a promptable segmenter are lifted onto visible vertices,
//! fused by majority vote across frames, and the next frame is chosen by how
//! many object vertices it sees. Prompts are carried to the new frame by
//! picking the labelled vertex closest to all earlier prompt vertices.

mod session;

pub use session::{
    run_interactive_loop, OracleSegmenter, RoundLog, SegmentRequest, SegmentationScene, SegmentationSession,
    Segmenter2D,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::geometry::{Bvh, CameraModel, TriangleMesh, Vec3};
use crate::imaging::Mask;

pub const UNOBSERVED: i8 = -1;
pub const OTHER: i8 = 0;
pub const OBJECT: i8 = 1;

const MAGIC: &[u8; 4] = b"SVMK";

/// Per-vertex labels: -1 unobserved, 0 other, 1 object.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VertexMask {
    labels: Vec<i8>,
}

impl VertexMask {
    pub fn new(labels: Vec<i8>) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|l| !(-1..=1).contains(*l)) {
            return Err(Error::Config(format!("vertex label {bad} outside {{-1, 0, 1}}")));
        }
        Ok(Self { labels })
    }

    pub fn unobserved(n: usize) -> Self {
        Self {
            labels: vec![UNOBSERVED; n],
        }
    }

    pub fn labels(&self) -> &[i8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn count(&self, label: i8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Vertices labelled object.
    pub fn object_vertices(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == OBJECT).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC);
        w.u32(self.labels.len() as u32).i8s(&self.labels);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], asset: &str) -> Result<Self> {
        let mut r = Reader::new(bytes, asset);
        r.magic(MAGIC)?;
        let n = r.u32()? as usize;
        let labels = r.i8s(n)?;
        r.finish()?;
        Self::new(labels).map_err(|e| r.error(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptLabel {
    Object,
    Other,
}

/// A labelled click on a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub frame: usize,
    pub x: u32,
    pub y: u32,
    pub label: PromptLabel,
}

pub fn prompts_from_json(text: &str, asset: &str) -> Result<Vec<Prompt>> {
    serde_json::from_str(text).map_err(|source| Error::Json {
        asset: asset.into(),
        source,
    })
}

pub fn prompts_to_json(prompts: &[Prompt]) -> String {
    serde_json::to_string_pretty(prompts).expect("prompts serialise")
}

pub fn load_prompts(path: &Path) -> Result<Vec<Prompt>> {
    let bytes = read_file(path)?;
    prompts_from_json(&String::from_utf8_lossy(&bytes), &path.display().to_string())
}

/// Checks frame ids and pixel bounds, and that there is an object prompt.
pub fn validate_prompts(prompts: &[Prompt], cameras: &[CameraModel]) -> Result<()> {
    for p in prompts {
        let cam = cameras
            .get(p.frame)
            .ok_or_else(|| Error::Config(format!("prompt refers to frame {} of {}", p.frame, cameras.len())))?;
        if p.x >= cam.width || p.y >= cam.height {
            return Err(Error::Config(format!(
                "prompt ({}, {}) outside {}x{} frame {}",
                p.x, p.y, cam.width, cam.height, p.frame
            )));
        }
    }
    if !prompts.iter().any(|p| p.label == PromptLabel::Object) {
        return Err(Error::Config("at least one object prompt is required".into()));
    }
    Ok(())
}

/// 1 for vertices the camera sees: inside the image, in front of the
/// camera, and not occluded (the first hit toward the vertex lies within
/// 1e-3 of the bounding-box diagonal of it).
pub fn compute_visibility(mesh: &TriangleMesh, bvh: &Bvh, camera: &CameraModel) -> Vec<u8> {
    let tol = 1e-3 * mesh.bbox_diagonal();
    let center = camera.center();
    mesh.vertices()
        .iter()
        .map(|v| {
            let Ok((px, _)) = camera.project(v) else { return 0 };
            if camera.pixel_index(&px).is_none() {
                return 0;
            }
            let offset = v - center;
            let dist = offset.norm();
            if dist == 0.0 {
                return 0;
            }
            let dir = offset / dist;
            match bvh.raycast(&center, &dir) {
                Some(hit) if hit.t < dist - tol => 0,
                _ => 1,
            }
        })
        .collect()
}

/// Visible vertices take the label of the pixel they project to; the rest
/// are unobserved.
pub fn backproject_mask(
    mask: &Mask,
    camera: &CameraModel,
    mesh: &TriangleMesh,
    visibility: &[u8],
) -> Result<VertexMask> {
    if (mask.width, mask.height) != (camera.width, camera.height) {
        return Err(Error::DimensionMismatch(format!(
            "mask {}x{} for a {}x{} camera",
            mask.width, mask.height, camera.width, camera.height
        )));
    }
    if visibility.len() != mesh.vertex_count() {
        return Err(Error::DimensionMismatch(
            "visibility length differs from vertex count".into(),
        ));
    }
    let labels = mesh
        .vertices()
        .iter()
        .zip(visibility)
        .map(|(v, &vis)| {
            if vis == 0 {
                return UNOBSERVED;
            }
            let pixel = camera.project(v).ok().and_then(|(px, _)| camera.pixel_index(&px));
            match pixel {
                Some((x, y)) if mask.get(x, y) => OBJECT,
                Some(_) => OTHER,
                None => UNOBSERVED,
            }
        })
        .collect();
    Ok(VertexMask { labels })
}

/// Majority vote over the frames that observed each vertex; a tie is other.
pub fn fuse_masks<'a>(history: impl IntoIterator<Item = &'a VertexMask>) -> Result<VertexMask> {
    let mut iter = history.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::Config("cannot fuse an empty mask history".into()))?;
    let n = first.len();
    let mut seen = vec![0u32; n];
    let mut object = vec![0u32; n];
    for m in std::iter::once(first).chain(iter) {
        if m.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "mask of {} vertices among {n}",
                m.len()
            )));
        }
        for (i, &l) in m.labels.iter().enumerate() {
            if l != UNOBSERVED {
                seen[i] += 1;
                object[i] += (l == OBJECT) as u32;
            }
        }
    }
    let labels = seen
        .iter()
        .zip(&object)
        .map(|(&s, &o)| match s {
            0 => UNOBSERVED,
            _ if 2 * o > s => OBJECT,
            _ => OTHER,
        })
        .collect();
    Ok(VertexMask { labels })
}

/// Number of object vertices a frame sees (unobserved counts as zero).
pub fn view_score(visibility: &[u8], fused: &VertexMask) -> u64 {
    visibility
        .iter()
        .zip(&fused.labels)
        .filter(|(&v, &l)| v != 0 && l == OBJECT)
        .count() as u64
}

/// Unused frame with the highest score, lowest id on ties; `None` once
/// every frame is used.
pub fn select_next_view(visibilities: &[Vec<u8>], fused: &VertexMask, used: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, u64)> = None;
    for (f, vis) in visibilities.iter().enumerate() {
        if used.get(f).copied().unwrap_or(false) {
            continue;
        }
        let s = view_score(vis, fused);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((f, s));
        }
    }
    best.map(|b| b.0)
}

/// Visible vertex with `label` minimising the summed distance to `previous`.
/// Ties go to the lower vertex index.
pub fn closest_labelled_vertex(
    mesh: &TriangleMesh,
    fused: &VertexMask,
    visibility: &[u8],
    label: i8,
    previous: &[usize],
) -> Option<usize> {
    let verts = mesh.vertices();
    let mut best: Option<(usize, f64)> = None;
    for i in 0..verts.len() {
        if visibility[i] == 0 || fused.labels[i] != label {
            continue;
        }
        let cost: f64 = previous.iter().map(|&p| (verts[i] - verts[p]).norm()).sum();
        if best.is_none_or(|(_, c)| cost < c) {
            best = Some((i, cost));
        }
    }
    best.map(|b| b.0)
}

/// New prompts on `frame`: one object and one other vertex chosen by
/// [`closest_labelled_vertex`], projected to pixels. A label with no
/// visible candidate is omitted. Returns the prompts and their vertices.
pub fn propagate_prompts(
    mesh: &TriangleMesh,
    fused: &VertexMask,
    visibility: &[u8],
    camera: &CameraModel,
    frame: usize,
    previous_object: &[usize],
    previous_other: &[usize],
) -> Vec<(Prompt, usize)> {
    let mut out = Vec::new();
    for (label, prompt_label, previous) in [
        (OBJECT, PromptLabel::Object, previous_object),
        (OTHER, PromptLabel::Other, previous_other),
    ] {
        let Some(v) = closest_labelled_vertex(mesh, fused, visibility, label, previous) else {
            log::warn!("no visible {prompt_label:?} vertex in frame {frame}; prompt omitted");
            continue;
        };
        let pixel = camera
            .project(&mesh.vertices()[v])
            .ok()
            .and_then(|(px, _)| camera.pixel_index(&px));
        if let Some((x, y)) = pixel {
            out.push((
                Prompt {
                    frame,
                    x,
                    y,
                    label: prompt_label,
                },
                v,
            ));
        }
    }
    out
}

/// Vertex a prompt pixel refers to: the vertex of the hit face closest to
/// the hit point.
pub fn lift_prompt(mesh: &TriangleMesh, bvh: &Bvh, camera: &CameraModel, x: u32, y: u32) -> Option<usize> {
    let (origin, dir) = camera.pixel_ray(x, y);
    let hit = bvh.raycast(&origin, &dir)?;
    let point: Vec3 = origin + dir * hit.t;
    let face = mesh.faces()[hit.face as usize];
    face.iter().map(|&v| v as usize).min_by(|&a, &b| {
        let da = (mesh.vertices()[a] - point).norm();
        let db = (mesh.vertices()[b] - point).norm();
        da.total_cmp(&db).then(a.cmp(&b))
    })
}

/// 2D mask of a vertex labelling: a pixel is object when at least two of
/// the hit face's vertices are object.
pub fn project_mask(fused: &VertexMask, camera: &CameraModel, mesh: &TriangleMesh, bvh: &Bvh) -> Mask {
    let mut mask = Mask::new(camera.width, camera.height);
    for y in 0..camera.height {
        for x in 0..camera.width {
            let (o, d) = camera.pixel_ray(x, y);
            if let Some(hit) = bvh.raycast(&o, &d) {
                let face = mesh.faces()[hit.face as usize];
                let votes = face.iter().filter(|&&v| fused.labels[v as usize] == OBJECT).count();
                mask.set(x, y, votes >= 2);
            }
        }
    }
    mask
}

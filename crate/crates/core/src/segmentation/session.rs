use serde::{Deserialize, Serialize};

use super::{
    backproject_mask, compute_visibility, fuse_masks, lift_prompt, project_mask, propagate_prompts, select_next_view,
    Prompt, PromptLabel, VertexMask,
};
use crate::error::{Error, Result};
use crate::geometry::{Bvh, CameraModel, TriangleMesh};
use crate::imaging::{Mask, RgbImage};

/// What a 2D segmenter is asked for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub image_id: String,
    pub frame: usize,
    pub width: u32,
    pub height: u32,
    pub prompts: Vec<Prompt>,
}

/// A promptable 2D segmenter. Must return a mask of the image's size and be
/// deterministic for identical requests.
pub trait Segmenter2D {
    fn segment(&self, request: &SegmentRequest, image: &RgbImage) -> Result<Mask>;
}

/// Answers every request with the projection of known vertex labels.
#[derive(Debug, Clone)]
pub struct OracleSegmenter {
    mesh: TriangleMesh,
    bvh: Bvh,
    labels: VertexMask,
    cameras: Vec<CameraModel>,
}

impl OracleSegmenter {
    pub fn new(mesh: TriangleMesh, labels: VertexMask, cameras: Vec<CameraModel>) -> Result<Self> {
        if labels.len() != mesh.vertex_count() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} vertices",
                labels.len(),
                mesh.vertex_count()
            )));
        }
        Ok(Self {
            bvh: Bvh::build(&mesh),
            mesh,
            labels,
            cameras,
        })
    }
}

impl Segmenter2D for OracleSegmenter {
    fn segment(&self, request: &SegmentRequest, _image: &RgbImage) -> Result<Mask> {
        let cam = self
            .cameras
            .get(request.frame)
            .ok_or_else(|| Error::Segmenter(format!("oracle has no camera for frame {}", request.frame)))?;
        Ok(project_mask(&self.labels, cam, &self.mesh, &self.bvh))
    }
}

/// Mesh, frames and per-frame visibility.
#[derive(Debug, Clone)]
pub struct SegmentationScene {
    pub mesh: TriangleMesh,
    pub bvh: Bvh,
    pub cameras: Vec<CameraModel>,
    pub images: Vec<RgbImage>,
    pub image_ids: Vec<String>,
    pub visibility: Vec<Vec<u8>>,
}

impl SegmentationScene {
    pub fn new(mesh: TriangleMesh, cameras: Vec<CameraModel>, images: Vec<RgbImage>) -> Result<Self> {
        let ids = (0..cameras.len()).map(|i| format!("frame-{i:03}")).collect();
        Self::with_image_ids(mesh, cameras, images, ids)
    }

    pub fn with_image_ids(
        mesh: TriangleMesh,
        cameras: Vec<CameraModel>,
        images: Vec<RgbImage>,
        image_ids: Vec<String>,
    ) -> Result<Self> {
        if cameras.len() != images.len() || cameras.len() != image_ids.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} cameras, {} images, {} image ids",
                cameras.len(),
                images.len(),
                image_ids.len()
            )));
        }
        for (i, (c, im)) in cameras.iter().zip(&images).enumerate() {
            if (c.width, c.height) != (im.width, im.height) {
                return Err(Error::DimensionMismatch(format!(
                    "frame {i}: image size differs from camera"
                )));
            }
        }
        let bvh = Bvh::build(&mesh);
        let visibility = cameras.iter().map(|c| compute_visibility(&mesh, &bvh, c)).collect();
        Ok(Self {
            mesh,
            bvh,
            cameras,
            images,
            image_ids,
            visibility,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.cameras.len()
    }
}

/// One pass of segment, lift, fuse, select and propagate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub frame: usize,
    pub prompts: Vec<Prompt>,
    /// Object pixels in the segmenter's mask.
    pub mask_pixels: usize,
    /// Object vertices in the fused mask after this round.
    pub fused_object: usize,
    pub next_frame: Option<usize>,
    /// Set when the segmenter failed and the frame was skipped.
    pub skipped: Option<String>,
}

/// State of the interactive loop; rounds run strictly in order.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSession {
    history: Vec<(usize, VertexMask)>,
    fused: VertexMask,
    used: Vec<bool>,
    object_vertices: Vec<usize>,
    other_vertices: Vec<usize>,
    pending: Option<(usize, Vec<Prompt>)>,
    log: Vec<RoundLog>,
}

impl SegmentationSession {
    pub fn new(scene: &SegmentationScene) -> Self {
        Self {
            history: Vec::new(),
            fused: VertexMask::unobserved(scene.mesh.vertex_count()),
            used: vec![false; scene.frame_count()],
            object_vertices: Vec::new(),
            other_vertices: Vec::new(),
            pending: None,
            log: Vec::new(),
        }
    }

    pub fn fused(&self) -> &VertexMask {
        &self.fused
    }

    pub fn history(&self) -> &[(usize, VertexMask)] {
        &self.history
    }

    pub fn log(&self) -> &[RoundLog] {
        &self.log
    }

    pub fn used(&self) -> &[bool] {
        &self.used
    }

    pub fn is_complete(&self) -> bool {
        self.used.iter().all(|&u| u)
    }

    /// Frame and propagated prompts for the next automatic round.
    pub fn pending(&self) -> Option<(usize, &[Prompt])> {
        self.pending.as_ref().map(|(f, p)| (*f, p.as_slice()))
    }

    /// Runs one round on `frame` with `prompts` (all on that frame). User
    /// prompts are lifted to vertices and join the propagation anchors.
    pub fn run_round(
        &mut self,
        scene: &SegmentationScene,
        segmenter: &dyn Segmenter2D,
        frame: usize,
        prompts: &[Prompt],
    ) -> Result<&RoundLog> {
        let camera = scene
            .cameras
            .get(frame)
            .ok_or_else(|| Error::Config(format!("frame {frame} of {}", scene.frame_count())))?;
        if let Some(p) = prompts.iter().find(|p| p.frame != frame) {
            return Err(Error::Config(format!(
                "prompt for frame {} in a round on frame {frame}",
                p.frame
            )));
        }
        for p in prompts {
            if p.x >= camera.width || p.y >= camera.height {
                return Err(Error::Config(format!(
                    "prompt ({}, {}) outside frame {frame}",
                    p.x, p.y
                )));
            }
            let propagated = self
                .pending
                .as_ref()
                .is_some_and(|(f, pp)| *f == frame && pp.contains(p));
            if propagated {
                continue;
            }
            match lift_prompt(&scene.mesh, &scene.bvh, camera, p.x, p.y) {
                Some(v) => match p.label {
                    PromptLabel::Object => self.object_vertices.push(v),
                    PromptLabel::Other => self.other_vertices.push(v),
                },
                None => log::warn!("prompt ({}, {}) on frame {frame} misses the mesh", p.x, p.y),
            }
        }

        let request = SegmentRequest {
            image_id: scene.image_ids[frame].clone(),
            frame,
            width: camera.width,
            height: camera.height,
            prompts: prompts.to_vec(),
        };
        let outcome = segmenter.segment(&request, &scene.images[frame]).and_then(|mask| {
            if (mask.width, mask.height) != (camera.width, camera.height) {
                return Err(Error::Segmenter(format!(
                    "mask is {}x{}, frame is {}x{}",
                    mask.width, mask.height, camera.width, camera.height
                )));
            }
            Ok(mask)
        });
        self.used[frame] = true;
        let (mask_pixels, skipped) = match outcome {
            Ok(mask) => {
                let m = backproject_mask(&mask, camera, &scene.mesh, &scene.visibility[frame])?;
                self.history.retain(|(f, _)| *f != frame);
                self.history.push((frame, m));
                self.fused = fuse_masks(self.history.iter().map(|(_, m)| m))?;
                (mask.count(), None)
            }
            Err(e) => {
                log::warn!("segmenter failed on frame {frame}: {e}; skipping");
                (0, Some(e.to_string()))
            }
        };

        let next = select_next_view(&scene.visibility, &self.fused, &self.used);
        self.pending = next.map(|f| {
            let picked = propagate_prompts(
                &scene.mesh,
                &self.fused,
                &scene.visibility[f],
                &scene.cameras[f],
                f,
                &self.object_vertices,
                &self.other_vertices,
            );
            for (p, v) in &picked {
                match p.label {
                    PromptLabel::Object => self.object_vertices.push(*v),
                    PromptLabel::Other => self.other_vertices.push(*v),
                }
            }
            (f, picked.into_iter().map(|(p, _)| p).collect())
        });
        self.log.push(RoundLog {
            round: self.log.len(),
            frame,
            prompts: prompts.to_vec(),
            mask_pixels,
            fused_object: self.fused.count(super::OBJECT),
            next_frame: next,
            skipped,
        });
        Ok(self.log.last().unwrap())
    }

    /// Runs the pending automatic round, if any.
    pub fn run_pending(&mut self, scene: &SegmentationScene, segmenter: &dyn Segmenter2D) -> Result<Option<&RoundLog>> {
        let Some((frame, prompts)) = self.pending.clone() else {
            return Ok(None);
        };
        self.run_round(scene, segmenter, frame, &prompts).map(Some)
    }
}

/// Runs rounds from the initial prompts (all on one frame) until every frame
/// is used or `max_rounds` rounds have run.
pub fn run_interactive_loop(
    scene: &SegmentationScene,
    initial: &[Prompt],
    segmenter: &dyn Segmenter2D,
    max_rounds: usize,
) -> Result<SegmentationSession> {
    let first = initial
        .first()
        .ok_or_else(|| Error::Config("at least one initial prompt is required".into()))?
        .frame;
    super::validate_prompts(initial, &scene.cameras)?;
    let mut session = SegmentationSession::new(scene);
    if max_rounds == 0 {
        return Ok(session);
    }
    session.run_round(scene, segmenter, first, initial)?;
    while session.log.len() < max_rounds {
        if session.run_pending(scene, segmenter)?.is_none() {
            break;
        }
    }
    Ok(session)
}

//! Mask-constrained geometry deformation and texture painting.

mod arap;
pub mod sparse;

pub use arap::{arap_deform, cotangent_weights, ArapResult, DEFAULT_ITERATIONS};

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::read_file;
use crate::depth_fusion::DepthMap;
use crate::error::{Error, Result};
use crate::geometry::{Bvh, CameraModel, Vec3};
use crate::imaging::{Mask, RgbImage};
use crate::neural_mesh::{aggregate_features, backproject_features, render_depth, FeatureMap, NeuralMesh};
use crate::segmentation::{backproject_mask, compute_visibility, VertexMask, OBJECT, OTHER};

/// Moved vertices with their targets and vertices pinned in place.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HandleConstraints {
    pub handles: Vec<(usize, Vec3)>,
    pub static_set: Vec<usize>,
}

impl HandleConstraints {
    pub fn validate(&self, vertex_count: usize) -> Result<()> {
        let mut seen = HashSet::new();
        for &(v, t) in &self.handles {
            if v >= vertex_count {
                return Err(Error::Deformation(format!("handle vertex {v} of {vertex_count}")));
            }
            if !t.iter().all(|c| c.is_finite()) {
                return Err(Error::Deformation(format!("handle {v} has a non-finite target")));
            }
            if !seen.insert(v) {
                return Err(Error::Deformation(format!("vertex {v} has two handles")));
            }
        }
        for &v in &self.static_set {
            if v >= vertex_count {
                return Err(Error::Deformation(format!("static vertex {v} of {vertex_count}")));
            }
            if seen.contains(&v) {
                return Err(Error::Deformation(format!("vertex {v} is both a handle and static")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Handle {
    pub vertex: usize,
    pub target: [f64; 3],
}

pub fn handles_from_json(text: &str, asset: &str) -> Result<Vec<(usize, Vec3)>> {
    let raw: Vec<Handle> = serde_json::from_str(text).map_err(|source| Error::Json {
        asset: asset.into(),
        source,
    })?;
    Ok(raw.into_iter().map(|h| (h.vertex, Vec3::from(h.target))).collect())
}

pub fn handles_to_json(handles: &[(usize, Vec3)]) -> String {
    let raw: Vec<Handle> = handles
        .iter()
        .map(|(v, t)| Handle {
            vertex: *v,
            target: [t.x, t.y, t.z],
        })
        .collect();
    serde_json::to_string_pretty(&raw).expect("handles serialise")
}

pub fn load_handles(path: &Path) -> Result<Vec<(usize, Vec3)>> {
    let bytes = read_file(path)?;
    handles_from_json(&String::from_utf8_lossy(&bytes), &path.display().to_string())
}

/// Which non-object vertices [`deform_scene`] pins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(Default)]
pub enum StaticPolicy {
    /// Every vertex labelled other.
    #[default]
    AllOther,
    /// Other-labelled vertices within this many rings of the object.
    Ring(usize),
}


/// Static set for a labelled mesh. Unobserved vertices stay free so hidden
/// parts of the object follow it; components holding no object vertex are
/// pinned entirely so they stay put.
pub fn static_vertices(neural: &NeuralMesh, mask: &VertexMask, policy: StaticPolicy) -> Vec<usize> {
    let mesh = &neural.mesh;
    let labels = mask.labels();
    let (count, comp) = mesh.connected_components();
    let mut has_object = vec![false; count];
    for (v, &l) in labels.iter().enumerate() {
        if l == OBJECT {
            has_object[comp[v]] = true;
        }
    }
    let near: Option<Vec<bool>> = match policy {
        StaticPolicy::AllOther => None,
        StaticPolicy::Ring(k) => {
            let rings = mesh.vertex_neighbors();
            let mut reached: Vec<bool> = labels.iter().map(|&l| l == OBJECT).collect();
            let mut frontier: Vec<usize> = (0..labels.len()).filter(|&v| reached[v]).collect();
            for _ in 0..k {
                let mut next = Vec::new();
                for v in frontier {
                    for &u in &rings[v] {
                        if !reached[u as usize] {
                            reached[u as usize] = true;
                            next.push(u as usize);
                        }
                    }
                }
                frontier = next;
            }
            Some(reached)
        }
    };
    (0..labels.len())
        .filter(|&v| {
            if !has_object[comp[v]] {
                return true;
            }
            labels[v] == OTHER && near.as_ref().is_none_or(|n| n[v])
        })
        .collect()
}

/// Deforms the object region with ARAP. Features ride with their vertices
/// unchanged; only positions move.
pub fn deform_scene(
    neural: &NeuralMesh,
    mask: &VertexMask,
    handles: &[(usize, Vec3)],
    iterations: usize,
    policy: StaticPolicy,
) -> Result<(NeuralMesh, ArapResult)> {
    if mask.len() != neural.mesh.vertex_count() {
        return Err(Error::DimensionMismatch(format!(
            "mask has {} labels, mesh {} vertices",
            mask.len(),
            neural.mesh.vertex_count()
        )));
    }
    if handles.is_empty() {
        return Err(Error::Deformation("no handles given".into()));
    }
    if let Some(&(v, _)) = handles.iter().find(|(v, _)| mask.labels().get(*v) != Some(&OBJECT)) {
        return Err(Error::Deformation(format!("handle vertex {v} is not labelled object")));
    }
    let constraints = HandleConstraints {
        handles: handles.to_vec(),
        static_set: static_vertices(neural, mask, policy),
    };
    let result = arap_deform(&neural.mesh, &constraints, iterations)?;
    let deformed = NeuralMesh {
        mesh: result.mesh.clone(),
        ..neural.clone()
    };
    Ok((deformed, result))
}

pub const DEFAULT_TAU: f64 = 0.05;

/// Pixels a user edit changed on one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EditRegion {
    pub frame: usize,
    pub mask: Mask,
    pub tau: f64,
}

/// Pixel is in the region when the RGB difference, as a Euclidean norm
/// scaled to [0, 1], exceeds `tau`.
pub fn detect_edit_region(frame: usize, original: &RgbImage, edited: &RgbImage, tau: f64) -> Result<EditRegion> {
    if (original.width, original.height) != (edited.width, edited.height) {
        return Err(Error::DimensionMismatch(format!(
            "original is {}x{}, edited is {}x{}",
            original.width, original.height, edited.width, edited.height
        )));
    }
    let mut mask = Mask::new(original.width, original.height);
    for y in 0..original.height {
        for x in 0..original.width {
            let (a, b) = (original.get(x, y), edited.get(x, y));
            let d2: f64 = (0..3).map(|c| (a[c] as f64 - b[c] as f64).powi(2)).sum();
            mask.set(x, y, (d2 / 3.0).sqrt() > tau);
        }
    }
    Ok(EditRegion { frame, mask, tau })
}

/// Appearance fine-tuning requested after a paint edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneJob {
    pub frames: Vec<usize>,
    pub iterations: usize,
}

pub const DEFAULT_FINE_TUNE_ITERATIONS: usize = 500;

#[derive(Debug, Clone)]
pub struct PaintResult {
    pub neural: NeuralMesh,
    /// Vertices whose appearance features were replaced.
    pub vertices: Vec<usize>,
    pub job: Option<FineTuneJob>,
}

/// Replaces the appearance features of vertices under the edit region with
/// features aggregated from the edited frame's neural points alone.
/// `depth` defaults to the mesh depth seen by `camera`.
pub fn paint_texture(
    neural: &NeuralMesh,
    region: &EditRegion,
    edited_features: &FeatureMap,
    camera: &CameraModel,
    depth: Option<&DepthMap>,
    k: usize,
) -> Result<PaintResult> {
    if edited_features.channels as usize != neural.appearance.dim {
        return Err(Error::DimensionMismatch(format!(
            "edited features have {} channels, mesh appearance {}",
            edited_features.channels, neural.appearance.dim
        )));
    }
    let mesh = &neural.mesh;
    let bvh = Bvh::build(mesh);
    let visibility = compute_visibility(mesh, &bvh, camera);
    let masked = backproject_mask(&region.mask, camera, mesh, &visibility)?.object_vertices();
    if masked.is_empty() {
        log::warn!(
            "edit region on frame {} covers no visible vertex; nothing painted",
            region.frame
        );
        return Ok(PaintResult {
            neural: neural.clone(),
            vertices: Vec::new(),
            job: None,
        });
    }
    let rendered;
    let depth = match depth {
        Some(d) => d,
        None => {
            rendered = render_depth(&bvh, camera);
            &rendered
        }
    };
    let points = backproject_features(edited_features, depth, camera, region.frame as u32)?;
    if points.is_empty() {
        return Err(Error::Config("edited frame has no valid depth".into()));
    }
    let targets: Vec<Vec3> = masked.iter().map(|&v| mesh.vertices()[v]).collect();
    let (mut outs, _) = aggregate_features(
        &points.positions,
        &[&points.features],
        &targets,
        k,
        neural.delta(),
        None,
    )?;
    let fresh = outs.pop().unwrap();
    let mut out = neural.clone();
    for (row, &v) in masked.iter().enumerate() {
        out.appearance.row_mut(v).copy_from_slice(fresh.row(row));
    }
    Ok(PaintResult {
        neural: out,
        vertices: masked,
        job: Some(FineTuneJob {
            frames: vec![region.frame],
            iterations: DEFAULT_FINE_TUNE_ITERATIONS,
        }),
    })
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SceneBundle, SceneConfig, ViewAssets};
use crate::error::{Error, Result};
use crate::geometry::{shapes, Bvh, CameraModel, TriangleMesh, Vec3};
use crate::imaging::RgbImage;
use crate::neural_mesh::{render_depth, rgb_feature_map};
use crate::segmentation::{project_mask, VertexMask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticShape {
    Icosphere {
        level: u32,
        radius: f64,
    },
    Box {
        subdivisions: usize,
        size: f64,
    },
    /// Large sphere with a small attached sphere labelled object.
    TwoPart {
        level: u32,
    },
}

/// Albedo as a function of surface position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    /// Low-frequency colour waves.
    Smooth,
    /// Latitude bands.
    Bands,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRing {
    pub count: usize,
    pub radius: f64,
    /// Elevations in radians, cycled over the cameras.
    pub elevations: Vec<f64>,
    /// Focal length as a multiple of the image width.
    pub focal_scale: f64,
}

impl Default for CameraRing {
    fn default() -> Self {
        Self {
            count: 20,
            radius: 3.0,
            elevations: vec![0.35, -0.35, 0.0],
            focal_scale: 1.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub shape: SyntheticShape,
    pub texture: Texture,
    pub ring: CameraRing,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    pub fn icosphere(level: u32, cameras: usize, resolution: u32, seed: u64) -> Self {
        Self {
            shape: SyntheticShape::Icosphere { level, radius: 1.0 },
            texture: Texture::Smooth,
            ring: CameraRing {
                count: cameras,
                ..CameraRing::default()
            },
            width: resolution,
            height: resolution,
            seed,
        }
    }

    pub fn two_part(level: u32, cameras: usize, resolution: u32, seed: u64) -> Self {
        Self {
            shape: SyntheticShape::TwoPart { level },
            texture: Texture::Bands,
            ring: CameraRing {
                count: cameras,
                ..CameraRing::default()
            },
            width: resolution,
            height: resolution,
            seed,
        }
    }
}

const LIGHT: [f64; 3] = [0.4, 0.8, 0.45];

fn albedo(texture: Texture, p: &Vec3, phase: f64) -> [f64; 3] {
    match texture {
        Texture::Smooth => [
            0.55 + 0.35 * (2.0 * p.x + phase).sin(),
            0.5 + 0.3 * (2.5 * p.y - phase).cos(),
            0.5 + 0.35 * (1.5 * (p.z + p.x) + 0.5 * phase).sin(),
        ],
        Texture::Bands => {
            if ((4.0 * p.y + phase).sin()) > 0.0 {
                [0.85, 0.55, 0.25]
            } else {
                [0.25, 0.45, 0.8]
            }
        }
        Texture::Uniform => [0.7, 0.7, 0.7],
    }
}

/// Quantises to the 8-bit grid so PNG round trips are exact.
fn quantise(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

/// Snaps vertices to f32 so PLY round trips are exact.
fn snap(mesh: TriangleMesh) -> Result<TriangleMesh> {
    let v = mesh.vertices().iter().map(|p| p.map(|c| c as f32 as f64)).collect();
    mesh.with_vertices(v)
}

/// Lambertian render with smooth shading normals; background is black.
fn shade(mesh: &TriangleMesh, bvh: &Bvh, camera: &CameraModel, texture: Texture, phase: f64) -> RgbImage {
    let light = Vec3::from(LIGHT).normalize();
    let normals = mesh.vertex_normals();
    let mut img = RgbImage::new(camera.width, camera.height);
    for y in 0..camera.height {
        for x in 0..camera.width {
            let (o, d) = camera.pixel_ray(x, y);
            let Some(hit) = bvh.raycast(&o, &d) else { continue };
            let f = mesh.faces()[hit.face as usize];
            let n: Vec3 = (0..3)
                .map(|k| normals[f[k] as usize] * hit.barycentric[k])
                .sum::<Vec3>()
                .normalize();
            let p = o + d * hit.t;
            let a = albedo(texture, &p, phase);
            let s = 0.35 + 0.65 * n.dot(&light).max(0.0);
            img.set(x, y, [quantise(a[0] * s), quantise(a[1] * s), quantise(a[2] * s)]);
        }
    }
    img
}

fn ring_cameras(ring: &CameraRing, width: u32, height: u32, center: Vec3, offset: f64) -> Result<Vec<CameraModel>> {
    if ring.elevations.is_empty() {
        return Err(Error::Config("camera ring needs at least one elevation".into()));
    }
    (0..ring.count)
        .map(|i| {
            let az = offset + std::f64::consts::TAU * i as f64 / ring.count as f64;
            let el = ring.elevations[i % ring.elevations.len()];
            let eye = center + Vec3::new(el.cos() * az.cos(), el.sin(), el.cos() * az.sin()) * ring.radius;
            CameraModel::look_at(eye, center, Vec3::y(), ring.focal_scale * width as f64, width, height)
        })
        .collect()
}

/// Builds a fully consistent scene: snapped mesh, ring cameras, shaded
/// images, exact depths, 7-channel RGB/normal features, and for the
/// two-part shape ground-truth labels and per-view object masks.
pub fn generate_synthetic_scene(spec: &SyntheticSceneSpec) -> Result<SceneBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let offset = rng.gen_range(0.0..std::f64::consts::TAU / spec.ring.count.max(1) as f64);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let (mesh, labels) = match spec.shape {
        SyntheticShape::Icosphere { level, radius } => (shapes::icosphere(level, radius), None),
        SyntheticShape::Box { subdivisions, size } => (shapes::cube(subdivisions, size), None),
        SyntheticShape::TwoPart { level } => {
            let (m, l) = shapes::two_part_compound(level);
            (m, Some(VertexMask::new(l)?))
        }
    };
    let mesh = snap(mesh)?;
    let bvh = Bvh::build(&mesh);
    let cameras = ring_cameras(&spec.ring, spec.width, spec.height, mesh.bbox().center(), offset)?;
    let mut views = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        let image = shade(&mesh, &bvh, cam, spec.texture, phase);
        let features = rgb_feature_map(&image, &mesh, &bvh, cam)?;
        let mask = labels.as_ref().map(|l| project_mask(l, cam, &mesh, &bvh));
        views.push(ViewAssets {
            image,
            appearance: Some(features.clone()),
            geometry: Some(features),
            depth: Some(render_depth(&bvh, cam)),
            mask,
        });
    }
    Ok(SceneBundle {
        mesh,
        cameras,
        views,
        config: SceneConfig::default(),
        labels,
        neural: None,
    })
}

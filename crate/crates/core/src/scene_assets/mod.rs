//! Scene bundles on disk: a JSON manifest indexing the mesh, cameras and
//! per-view images, features, depths and masks by relative path.

mod synthetic;

pub use synthetic::{generate_synthetic_scene, CameraRing, SyntheticSceneSpec, SyntheticShape, Texture};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::depth_fusion::DepthMap;
use crate::error::{Error, Result};
use crate::geometry::io::{load_mesh, save_mesh};
use crate::geometry::{load_cameras, save_cameras, CameraModel, TriangleMesh};
use crate::imaging::{Mask, RgbImage};
use crate::neural_mesh::{build_neural_mesh, FeatureMap, NeuralMesh};
use crate::renderer::{RenderScene, DEFAULT_BAND_SCALE};
use crate::segmentation::{SegmentationScene, VertexMask};

pub const MANIFEST_FORMAT: &str = "serf-scene";
pub const MANIFEST_VERSION: u32 = 1;

/// Per-scene settings for neural-mesh building and rendering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub k: usize,
    pub encoding_levels: usize,
    /// Band half-width in mean edge lengths.
    pub band_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support_radius: Option<f64>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            k: crate::neural_mesh::DEFAULT_K,
            encoding_levels: 6,
            band_scale: DEFAULT_BAND_SCALE,
            support_radius: None,
        }
    }
}

/// Everything known about one posed frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewAssets {
    pub image: RgbImage,
    pub appearance: Option<FeatureMap>,
    pub geometry: Option<FeatureMap>,
    pub depth: Option<DepthMap>,
    pub mask: Option<Mask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub mesh: TriangleMesh,
    pub cameras: Vec<CameraModel>,
    pub views: Vec<ViewAssets>,
    pub config: SceneConfig,
    /// Ground-truth or saved vertex labels.
    pub labels: Option<VertexMask>,
    /// Prebuilt neural mesh.
    pub neural: Option<NeuralMesh>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub appearance: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

/// On-disk index; every path is relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub mesh: String,
    pub cameras: String,
    #[serde(default)]
    pub config: SceneConfig,
    pub views: Vec<ViewEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neural_mesh: Option<String>,
}

impl Manifest {
    pub fn from_json(text: &str, asset: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).map_err(|source| Error::Json {
            asset: asset.into(),
            source,
        })?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(Error::format(
                asset,
                format!("unsupported manifest {} v{}", m.format, m.version),
            ));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }
}

fn require(base: &Path, rel: &str) -> Result<PathBuf> {
    let path = base.join(rel);
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingAsset { path })
    }
}

fn check_dims(asset: &Path, what: &str, got: (u32, u32), camera: &CameraModel) -> Result<()> {
    if got != (camera.width, camera.height) {
        return Err(Error::DimensionMismatch(format!(
            "{} ({what}) is {}x{}, camera is {}x{}",
            asset.display(),
            got.0,
            got.1,
            camera.width,
            camera.height
        )));
    }
    Ok(())
}

/// Loads and validates a scene from its manifest.
pub fn load_scene(manifest_path: &Path) -> Result<SceneBundle> {
    if !manifest_path.is_file() {
        return Err(Error::MissingAsset {
            path: manifest_path.into(),
        });
    }
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest = Manifest::from_json(&text, &manifest_path.display().to_string())?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let mesh = load_mesh(&require(base, &manifest.mesh)?)?;
    let cameras = load_cameras(&require(base, &manifest.cameras)?)?;
    if cameras.len() != manifest.views.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} cameras but {} views in {}",
            cameras.len(),
            manifest.views.len(),
            manifest_path.display()
        )));
    }

    let mut views = Vec::with_capacity(cameras.len());
    for (entry, cam) in manifest.views.iter().zip(&cameras) {
        let image_path = require(base, &entry.image)?;
        let image = RgbImage::load(&image_path)?;
        check_dims(&image_path, "image", (image.width, image.height), cam)?;
        let load_features = |rel: &Option<String>, what: &str| -> Result<Option<FeatureMap>> {
            rel.as_ref()
                .map(|r| {
                    let p = require(base, r)?;
                    let fm = FeatureMap::load(&p)?;
                    check_dims(&p, what, (fm.width, fm.height), cam)?;
                    Ok(fm)
                })
                .transpose()
        };
        let appearance = load_features(&entry.appearance, "appearance features")?;
        let geometry = load_features(&entry.geometry, "geometry features")?;
        let depth = entry
            .depth
            .as_ref()
            .map(|r| {
                let p = require(base, r)?;
                let d = DepthMap::load(&p)?;
                check_dims(&p, "depth", (d.width, d.height), cam)?;
                Ok::<_, Error>(d)
            })
            .transpose()?;
        let mask = entry
            .mask
            .as_ref()
            .map(|r| {
                let p = require(base, r)?;
                let m = Mask::load(&p)?;
                check_dims(&p, "mask", (m.width, m.height), cam)?;
                Ok::<_, Error>(m)
            })
            .transpose()?;
        views.push(ViewAssets {
            image,
            appearance,
            geometry,
            depth,
            mask,
        });
    }

    for (kind, get) in [
        (
            "appearance",
            (|v: &ViewAssets| v.appearance.as_ref().map(|f| f.channels)) as fn(&ViewAssets) -> Option<u32>,
        ),
        ("geometry", |v: &ViewAssets| v.geometry.as_ref().map(|f| f.channels)),
    ] {
        let counts: Vec<Option<u32>> = views.iter().map(get).collect();
        if counts.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::DimensionMismatch(format!(
                "{kind} feature channel counts differ across views (or are missing for some) in {}",
                manifest_path.display()
            )));
        }
    }

    let labels = manifest
        .labels
        .as_ref()
        .map(|r| VertexMask::load(&require(base, r)?))
        .transpose()?;
    if let Some(l) = &labels {
        if l.len() != mesh.vertex_count() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} vertices",
                l.len(),
                mesh.vertex_count()
            )));
        }
    }
    let neural = manifest
        .neural_mesh
        .as_ref()
        .map(|r| NeuralMesh::load(&require(base, r)?))
        .transpose()?;
    if let Some(n) = &neural {
        if n.mesh.vertex_count() != mesh.vertex_count() {
            return Err(Error::DimensionMismatch(
                "neural mesh and mesh vertex counts differ".into(),
            ));
        }
    }
    Ok(SceneBundle {
        mesh,
        cameras,
        views,
        config: manifest.config,
        labels,
        neural,
    })
}

/// Writes every asset under `dir` with conventional names and returns the
/// manifest path.
pub fn save_scene(bundle: &SceneBundle, dir: &Path) -> Result<PathBuf> {
    for sub in ["images", "features", "depth", "masks"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    save_mesh(&dir.join("mesh.ply"), &bundle.mesh)?;
    save_cameras(&dir.join("cameras.json"), &bundle.cameras)?;
    let mut entries = Vec::with_capacity(bundle.views.len());
    for (i, v) in bundle.views.iter().enumerate() {
        let image = format!("images/{i:03}.png");
        v.image.save(&dir.join(&image))?;
        let mut entry = ViewEntry {
            image,
            appearance: None,
            geometry: None,
            depth: None,
            mask: None,
        };
        if let Some(f) = &v.appearance {
            let rel = format!("features/{i:03}_app.sfmb");
            f.save(&dir.join(&rel))?;
            entry.appearance = Some(rel);
        }
        if let Some(f) = &v.geometry {
            let rel = format!("features/{i:03}_geo.sfmb");
            f.save(&dir.join(&rel))?;
            entry.geometry = Some(rel);
        }
        if let Some(d) = &v.depth {
            let rel = format!("depth/{i:03}.sdpt");
            d.save(&dir.join(&rel))?;
            entry.depth = Some(rel);
        }
        if let Some(m) = &v.mask {
            let rel = format!("masks/{i:03}.png");
            m.save(&dir.join(&rel))?;
            entry.mask = Some(rel);
        }
        entries.push(entry);
    }
    let labels = bundle
        .labels
        .as_ref()
        .map(|l| {
            l.save(&dir.join("labels.svmk"))?;
            Ok::<_, Error>("labels.svmk".to_string())
        })
        .transpose()?;
    let neural_mesh = bundle
        .neural
        .as_ref()
        .map(|n| {
            n.save(&dir.join("scene.snmb"))?;
            Ok::<_, Error>("scene.snmb".to_string())
        })
        .transpose()?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        mesh: "mesh.ply".into(),
        cameras: "cameras.json".into(),
        config: bundle.config,
        views: entries,
        labels,
        neural_mesh,
    };
    let path = dir.join("scene.json");
    std::fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

impl SceneBundle {
    /// The stored neural mesh, or one aggregated from the view features.
    pub fn neural_mesh(&self) -> Result<NeuralMesh> {
        if let Some(n) = &self.neural {
            return Ok(n.clone());
        }
        let app: Option<Vec<FeatureMap>> = self.views.iter().map(|v| v.appearance.clone()).collect();
        let geo: Option<Vec<FeatureMap>> = self.views.iter().map(|v| v.geometry.clone()).collect();
        let (Some(app), Some(geo)) = (app, geo) else {
            return Err(Error::Config(
                "scene has neither a neural mesh nor features for every view".into(),
            ));
        };
        build_neural_mesh(
            self.mesh.clone(),
            &self.cameras,
            &app,
            &geo,
            self.config.k,
            self.config.support_radius,
        )
    }

    /// Neural mesh plus acceleration structures for rendering.
    pub fn render_scene(&self) -> Result<RenderScene> {
        RenderScene::new(self.neural_mesh()?, self.config.k, self.config.band_scale)
    }

    pub fn segmentation_scene(&self) -> Result<SegmentationScene> {
        SegmentationScene::new(
            self.mesh.clone(),
            self.cameras.clone(),
            self.views.iter().map(|v| v.image.clone()).collect(),
        )
    }

    /// Views restricted to `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> SceneBundle {
        SceneBundle {
            mesh: self.mesh.clone(),
            cameras: indices.iter().map(|&i| self.cameras[i].clone()).collect(),
            views: indices.iter().map(|&i| self.views[i].clone()).collect(),
            config: self.config,
            labels: self.labels.clone(),
            neural: None,
        }
    }
}

//! Per-vertex features lifted from 2D feature maps.
//!
//! Each view's features are back-projected through the mesh depth into a
//! cloud of neural points; every mesh vertex then takes the inverse-distance
//! weighted mean of its K nearest neural points.

mod feature_map;

pub use feature_map::{rgb_feature_map, FeatureMap, RGB_FEATURE_CHANNELS};

use std::path::Path;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::depth_fusion::DepthMap;
use crate::error::{Error, Result};
use crate::geometry::{Bvh, CameraModel, KnnIndex, TriangleMesh, Vec3};

/// Default neighbour count for aggregation and rendering queries.
pub const DEFAULT_K: usize = 8;

/// Distance floor relative to the bounding-box diagonal.
pub const DELTA_SCALE: f64 = 1e-6;

/// Inverse-distance weight with the distance clamped at `delta`.
#[inline]
pub fn inverse_distance_weight(distance: f64, delta: f64) -> f64 {
    1.0 / distance.max(delta)
}

/// Row-major `rows × dim` matrix of `f32` features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_data(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {rows}x{dim} features",
                data.len()
            )));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Back-projected pixels carrying their features.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralPointSet {
    pub positions: Vec<Vec3>,
    pub features: FeatureMatrix,
    pub source_views: Vec<u32>,
}

impl NeuralPointSet {
    pub fn empty(dim: usize) -> Self {
        Self {
            positions: Vec::new(),
            features: FeatureMatrix::zeros(0, dim),
            source_views: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn extend(&mut self, other: NeuralPointSet) -> Result<()> {
        if other.features.dim != self.features.dim {
            return Err(Error::DimensionMismatch(format!(
                "feature dim {} vs {}",
                other.features.dim, self.features.dim
            )));
        }
        self.positions.extend(other.positions);
        self.features.data.extend(other.features.data);
        self.features.rows += other.features.rows;
        self.source_views.extend(other.source_views);
        Ok(())
    }
}

/// Mesh depth along the camera z axis; `NaN` where the pixel ray misses.
pub fn render_depth(bvh: &Bvh, camera: &CameraModel) -> DepthMap {
    let mut depth = DepthMap::missing(camera.width, camera.height);
    for y in 0..camera.height {
        for x in 0..camera.width {
            let (o, d) = camera.pixel_ray(x, y);
            if let Some(hit) = bvh.raycast(&o, &d) {
                depth.set(x, y, Some(hit.t * camera.depth_per_unit_t(&d)));
            }
        }
    }
    depth
}

/// One neural point per pixel with finite depth, carrying that pixel's
/// feature vector.
pub fn backproject_features(
    features: &FeatureMap,
    depth: &DepthMap,
    camera: &CameraModel,
    view: u32,
) -> Result<NeuralPointSet> {
    if features.width != depth.width
        || features.height != depth.height
        || camera.width != depth.width
        || camera.height != depth.height
    {
        return Err(Error::Config(format!(
            "feature map {}x{}, depth {}x{} and camera {}x{} must agree",
            features.width, features.height, depth.width, depth.height, camera.width, camera.height
        )));
    }
    let dim = features.channels as usize;
    let mut out = NeuralPointSet::empty(dim);
    for y in 0..depth.height {
        for x in 0..depth.width {
            let Some(d) = depth.get(x, y) else { continue };
            out.positions
                .push(camera.backproject(&CameraModel::pixel_center(x, y), d)?);
            out.features.data.extend_from_slice(features.pixel(x, y));
            out.features.rows += 1;
            out.source_views.push(view);
        }
    }
    Ok(out)
}

/// Inverse-distance weighted mean of the K nearest neural points' features.
///
/// When `support_radius` is set, neighbours farther than it are dropped and
/// vertices left without any contributor get zero features and coverage 0.
pub fn aggregate_features(
    points: &[Vec3],
    features: &[&FeatureMatrix],
    targets: &[Vec3],
    k: usize,
    delta: f64,
    support_radius: Option<f64>,
) -> Result<(Vec<FeatureMatrix>, Vec<u32>)> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let index = KnnIndex::new(points.to_vec())?;
    let mut outs: Vec<FeatureMatrix> = features
        .iter()
        .map(|f| FeatureMatrix::zeros(targets.len(), f.dim))
        .collect();
    let mut coverage = vec![0u32; targets.len()];
    let mut acc: Vec<Vec<f64>> = features.iter().map(|f| vec![0.0; f.dim]).collect();
    for (v, target) in targets.iter().enumerate() {
        let neighbors = index.query(target, k);
        let mut total = 0.0;
        acc.iter_mut().for_each(|a| a.fill(0.0));
        let mut count = 0;
        for n in &neighbors {
            if support_radius.is_some_and(|r| n.distance > r) {
                continue;
            }
            let w = inverse_distance_weight(n.distance, delta);
            total += w;
            count += 1;
            for (a, f) in acc.iter_mut().zip(features) {
                for (s, &x) in a.iter_mut().zip(f.row(n.index)) {
                    *s += w * x as f64;
                }
            }
        }
        coverage[v] = count;
        if count == 0 {
            continue;
        }
        for (out, a) in outs.iter_mut().zip(&acc) {
            for (o, s) in out.row_mut(v).iter_mut().zip(a) {
                *o = (s / total) as f32;
            }
        }
    }
    Ok((outs, coverage))
}

/// Mesh with per-vertex appearance and geometry features.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralMesh {
    pub mesh: TriangleMesh,
    pub appearance: FeatureMatrix,
    pub geometry: FeatureMatrix,
    pub coverage: Vec<u32>,
}

const MAGIC: &[u8; 4] = b"SNMB";
const VERSION: u32 = 1;

impl NeuralMesh {
    pub fn new(
        mesh: TriangleMesh,
        appearance: FeatureMatrix,
        geometry: FeatureMatrix,
        coverage: Vec<u32>,
    ) -> Result<Self> {
        let n = mesh.vertex_count();
        if appearance.rows != n || geometry.rows != n || coverage.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{n} vertices but {} appearance rows, {} geometry rows, {} coverage entries",
                appearance.rows,
                geometry.rows,
                coverage.len()
            )));
        }
        Ok(Self {
            mesh,
            appearance,
            geometry,
            coverage,
        })
    }

    /// Aggregates neural points for appearance and geometry onto the mesh
    /// with shared neighbours and weights.
    pub fn build(
        mesh: TriangleMesh,
        appearance_points: &NeuralPointSet,
        geometry_points: &NeuralPointSet,
        k: usize,
        support_radius: Option<f64>,
    ) -> Result<Self> {
        if appearance_points.positions != geometry_points.positions {
            return Err(Error::Config(
                "appearance and geometry neural points must share positions".into(),
            ));
        }
        let delta = DELTA_SCALE * mesh.bbox_diagonal();
        let (mut outs, coverage) = aggregate_features(
            &appearance_points.positions,
            &[&appearance_points.features, &geometry_points.features],
            mesh.vertices(),
            k,
            delta,
            support_radius,
        )?;
        let geometry = outs.pop().unwrap();
        let appearance = outs.pop().unwrap();
        let uncovered = coverage.iter().filter(|&&c| c == 0).count();
        if uncovered > 0 {
            log::warn!("{uncovered} vertices have no contributing neural points");
        }
        Self::new(mesh, appearance, geometry, coverage)
    }

    pub fn delta(&self) -> f64 {
        DELTA_SCALE * self.mesh.bbox_diagonal()
    }

    pub fn uncovered_vertices(&self) -> Vec<usize> {
        (0..self.coverage.len()).filter(|&v| self.coverage[v] == 0).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.mesh.vertex_count();
        let positions: Vec<f32> = self
            .mesh
            .vertices()
            .iter()
            .flat_map(|v| [v.x as f32, v.y as f32, v.z as f32])
            .collect();
        let faces: Vec<u32> = self.mesh.faces().iter().flatten().copied().collect();
        let mut w = Writer::new(MAGIC);
        w.u32(VERSION)
            .u32(n as u32)
            .u32(self.mesh.face_count() as u32)
            .u32(self.appearance.dim as u32)
            .u32(self.geometry.dim as u32)
            .f32s(&positions)
            .u32s(&faces)
            .f32s(&self.appearance.data)
            .f32s(&self.geometry.data)
            .u32s(&self.coverage);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], asset: &str) -> Result<Self> {
        let mut r = Reader::new(bytes, asset);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let n = r.u32()? as usize;
        let f = r.u32()? as usize;
        let da = r.u32()? as usize;
        let dg = r.u32()? as usize;
        let positions = r.f32s(n * 3)?;
        let faces = r.u32s(f * 3)?;
        let app = r.f32s(n * da)?;
        let geo = r.f32s(n * dg)?;
        let coverage = r.u32s(n)?;
        r.finish()?;
        let vertices = positions
            .chunks_exact(3)
            .map(|p| Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64))
            .collect();
        let faces = faces.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let mesh = TriangleMesh::new(vertices, faces).map_err(|e| r.error(e.to_string()))?;
        Self::new(
            mesh,
            FeatureMatrix::from_data(n, da, app)?,
            FeatureMatrix::from_data(n, dg, geo)?,
            coverage,
        )
        .map_err(|e| r.error(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }
}

/// Builds a neural mesh from posed feature maps: mesh depth per view,
/// back-projection of both feature kinds, then K-nearest aggregation.
pub fn build_neural_mesh(
    mesh: TriangleMesh,
    cameras: &[CameraModel],
    appearance_maps: &[FeatureMap],
    geometry_maps: &[FeatureMap],
    k: usize,
    support_radius: Option<f64>,
) -> Result<NeuralMesh> {
    if cameras.len() != appearance_maps.len() || cameras.len() != geometry_maps.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} cameras, {} appearance maps, {} geometry maps",
            cameras.len(),
            appearance_maps.len(),
            geometry_maps.len()
        )));
    }
    let da = appearance_maps.first().map_or(0, |m| m.channels as usize);
    let dg = geometry_maps.first().map_or(0, |m| m.channels as usize);
    let bvh = Bvh::build(&mesh);
    let mut app = NeuralPointSet::empty(da);
    let mut geo = NeuralPointSet::empty(dg);
    for (i, cam) in cameras.iter().enumerate() {
        let depth = render_depth(&bvh, cam);
        app.extend(backproject_features(&appearance_maps[i], &depth, cam, i as u32)?)?;
        geo.extend(backproject_features(&geometry_maps[i], &depth, cam, i as u32)?)?;
    }
    NeuralMesh::build(mesh, &app, &geo, k, support_radius)
}

//! OBJ and binary little-endian PLY mesh I/O, plus the fused point-cloud PLY
//! writer.

use std::io::Write;
use std::path::Path;

use super::{TriangleMesh, Vec3};
use crate::error::{Error, Result};

pub fn load_mesh(path: &Path) -> Result<TriangleMesh> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let asset = path.display().to_string();
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
        Some(ext) if ext == "obj" => {
            let text = String::from_utf8(bytes).map_err(|_| Error::format(&asset, "OBJ is not UTF-8"))?;
            parse_obj(&text, &asset)
        }
        Some(ext) if ext == "ply" => parse_ply_mesh(&bytes, &asset),
        _ => Err(Error::format(asset, "unknown mesh extension (expected .obj or .ply)")),
    }
}

pub fn save_mesh(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("obj") => write_obj(mesh).into_bytes(),
        _ => write_ply_mesh(mesh),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses `v` and `f` records; other records are ignored. Polygons are fan
/// triangulated. Face tokens may carry `/vt/vn` suffixes and negative
/// (relative) indices.
pub fn parse_obj(text: &str, asset: &str) -> Result<TriangleMesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let coords: Vec<f64> = parts
                    .take(3)
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::format(asset, format!("line {}: bad vertex", lineno + 1)))?;
                if coords.len() != 3 {
                    return Err(Error::format(
                        asset,
                        format!("line {}: vertex needs 3 coordinates", lineno + 1),
                    ));
                }
                vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in parts {
                    let head = tok.split('/').next().unwrap_or("");
                    let i: i64 = head
                        .parse()
                        .map_err(|_| Error::format(asset, format!("line {}: bad face index", lineno + 1)))?;
                    let resolved = if i > 0 { i - 1 } else { vertices.len() as i64 + i };
                    if resolved < 0 {
                        return Err(Error::format(
                            asset,
                            format!("line {}: face index out of range", lineno + 1),
                        ));
                    }
                    idx.push(resolved as u32);
                }
                if idx.len() < 3 {
                    return Err(Error::format(
                        asset,
                        format!("line {}: face needs 3 vertices", lineno + 1),
                    ));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    TriangleMesh::new(vertices, faces).map_err(|e| Error::format(asset, e.to_string()))
}

pub fn write_obj(mesh: &TriangleMesh) -> String {
    let mut out = String::new();
    for v in mesh.vertices() {
        out.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    for f in mesh.faces() {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    out
}

#[derive(Debug, Clone, Copy)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { name: String, count: Scalar, item: Scalar },
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    asset: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::format(self.asset, "unexpected end of PLY data"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn scalar(&mut self, ty: Scalar) -> Result<f64> {
        Ok(ty.read(self.take(ty.size())?))
    }
}

fn parse_ply_header(bytes: &[u8], asset: &str) -> Result<(Vec<Element>, usize)> {
    let marker = b"end_header\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| Error::format(asset, "PLY header has no end_header"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::format(asset, "PLY header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::format(asset, "missing ply magic"));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut format_ok = false;
    for line in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "binary_little_endian", _] => format_ok = true,
            ["format", other, ..] => return Err(Error::format(asset, format!("unsupported PLY format {other}"))),
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| Error::format(asset, "bad element count"))?,
                properties: Vec::new(),
            }),
            ["property", "list", count, item, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::format(asset, "property before element"))?;
                el.properties.push(Property::List {
                    name: name.to_string(),
                    count: Scalar::parse(count).ok_or_else(|| Error::format(asset, "bad list count type"))?,
                    item: Scalar::parse(item).ok_or_else(|| Error::format(asset, "bad list item type"))?,
                });
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::format(asset, "property before element"))?;
                el.properties.push(Property::Scalar {
                    name: name.to_string(),
                    ty: Scalar::parse(ty).ok_or_else(|| Error::format(asset, format!("bad property type {ty}")))?,
                });
            }
            _ => {}
        }
    }
    if !format_ok {
        return Err(Error::format(asset, "PLY must be binary_little_endian"));
    }
    Ok((elements, end + marker.len()))
}

pub fn parse_ply_mesh(bytes: &[u8], asset: &str) -> Result<TriangleMesh> {
    let (elements, body) = parse_ply_header(bytes, asset)?;
    let mut cur = Cursor {
        data: bytes,
        pos: body,
        asset,
    };
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for el in &elements {
        for _ in 0..el.count {
            let mut xyz = [0.0f64; 3];
            for prop in &el.properties {
                match prop {
                    Property::Scalar { name, ty } => {
                        let v = cur.scalar(*ty)?;
                        match name.as_str() {
                            "x" => xyz[0] = v,
                            "y" => xyz[1] = v,
                            "z" => xyz[2] = v,
                            _ => {}
                        }
                    }
                    Property::List { name, count, item } => {
                        let n = cur.scalar(*count)? as usize;
                        let mut idx = Vec::with_capacity(n);
                        for _ in 0..n {
                            idx.push(cur.scalar(*item)? as u32);
                        }
                        if el.name == "face" && (name == "vertex_indices" || name == "vertex_index") {
                            if n < 3 {
                                return Err(Error::format(asset, "face with fewer than 3 vertices"));
                            }
                            for k in 1..n - 1 {
                                faces.push([idx[0], idx[k], idx[k + 1]]);
                            }
                        }
                    }
                }
            }
            if el.name == "vertex" {
                vertices.push(Vec3::new(xyz[0], xyz[1], xyz[2]));
            }
        }
    }
    TriangleMesh::new(vertices, faces).map_err(|e| Error::format(asset, e.to_string()))
}

pub fn write_ply_mesh(mesh: &TriangleMesh) -> Vec<u8> {
    let mut out = Vec::new();
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertex_count(),
        mesh.face_count()
    )
    .expect("write to vec");
    for v in mesh.vertices() {
        for c in v.iter() {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    for f in mesh.faces() {
        out.push(3u8);
        for &i in f {
            out.extend_from_slice(&(i as i32).to_le_bytes());
        }
    }
    out
}

/// Point cloud with `x, y, z` (float) and `source_view` (uint) properties.
pub fn write_ply_cloud(points: &[Vec3], source_views: &[u32]) -> Vec<u8> {
    let mut out = Vec::new();
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty uint source_view\nend_header\n",
        points.len()
    )
    .expect("write to vec");
    for (p, &view) in points.iter().zip(source_views) {
        for c in p.iter() {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
        out.extend_from_slice(&view.to_le_bytes());
    }
    out
}

/// Reads a cloud written by [`write_ply_cloud`].
pub fn read_ply_cloud(bytes: &[u8], asset: &str) -> Result<(Vec<Vec3>, Vec<u32>)> {
    let (elements, body) = parse_ply_header(bytes, asset)?;
    let mut cur = Cursor {
        data: bytes,
        pos: body,
        asset,
    };
    let mut points = Vec::new();
    let mut views = Vec::new();
    for el in &elements {
        for _ in 0..el.count {
            let mut xyz = [0.0; 3];
            let mut view = 0u32;
            for prop in &el.properties {
                match prop {
                    Property::Scalar { name, ty } => {
                        let v = cur.scalar(*ty)?;
                        match name.as_str() {
                            "x" => xyz[0] = v,
                            "y" => xyz[1] = v,
                            "z" => xyz[2] = v,
                            "source_view" => view = v as u32,
                            _ => {}
                        }
                    }
                    Property::List { count, item, .. } => {
                        let n = cur.scalar(*count)? as usize;
                        cur.take(n * item.size())?;
                    }
                }
            }
            if el.name == "vertex" {
                points.push(Vec3::new(xyz[0], xyz[1], xyz[2]));
                views.push(view);
            }
        }
    }
    Ok((points, views))
}

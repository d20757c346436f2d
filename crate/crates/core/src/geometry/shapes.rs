//! Procedural meshes used by the synthetic scenes, examples and tests.

use std::collections::HashMap;

use super::{TriangleMesh, Vec3};

/// Subdivided icosahedron projected onto a sphere centred at the origin.
/// Level 0 has 12 vertices, each level roughly quadruples the face count.
pub fn icosphere(level: u32, radius: f64) -> TriangleMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut midpoints: HashMap<(u32, u32), u32> = HashMap::new();
        let mut midpoint = |a: u32, b: u32, vertices: &mut Vec<Vec3>| -> u32 {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                let m = ((vertices[a as usize] + vertices[b as usize]) * 0.5).normalize();
                vertices.push(m);
                (vertices.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    for v in &mut vertices {
        *v *= radius;
    }
    TriangleMesh::new(vertices, faces).expect("icosphere is valid")
}

/// Regular grid in the plane `z = height`, centred on the z axis, with
/// `nx × ny` cells of size `spacing`. Faces wind counter-clockwise seen from +z.
pub fn grid_plane(nx: usize, ny: usize, spacing: f64, height: f64) -> TriangleMesh {
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            vertices.push(Vec3::new(
                (i as f64 - nx as f64 / 2.0) * spacing,
                (j as f64 - ny as f64 / 2.0) * spacing,
                height,
            ));
        }
    }
    let idx = |i: usize, j: usize| (j * (nx + 1) + i) as u32;
    let mut faces = Vec::with_capacity(nx * ny * 2);
    for j in 0..ny {
        for i in 0..nx {
            faces.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
            faces.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }
    TriangleMesh::new(vertices, faces).expect("grid is valid")
}

/// Closed, outward-oriented box `[-size/2, size/2]^3` with every face split
/// into `n × n` cells.
pub fn cube(n: usize, size: f64) -> TriangleMesh {
    cuboid(n, n, n, Vec3::repeat(size))
}

/// Closed box of extents `dims` centred at the origin with `nx, ny, nz` cells
/// along each axis. Used for bar-bending deformation tests.
pub fn cuboid(nx: usize, ny: usize, nz: usize, dims: Vec3) -> TriangleMesh {
    let counts = [nx, ny, nz];
    let half = dims * 0.5;
    let mut welded: HashMap<[i64; 3], u32> = HashMap::new();
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut vertex = |grid: [usize; 3], vertices: &mut Vec<Vec3>| -> u32 {
        let key = [grid[0] as i64, grid[1] as i64, grid[2] as i64];
        *welded.entry(key).or_insert_with(|| {
            let p = Vec3::new(
                -half.x + dims.x * grid[0] as f64 / nx as f64,
                -half.y + dims.y * grid[1] as f64 / ny as f64,
                -half.z + dims.z * grid[2] as f64 / nz as f64,
            );
            vertices.push(p);
            (vertices.len() - 1) as u32
        })
    };
    // For each axis, two faces (low/high). (u, v) span the other two axes.
    for axis in 0..3 {
        let u_axis = (axis + 1) % 3;
        let v_axis = (axis + 2) % 3;
        for side in [0usize, 1] {
            let fixed = side * counts[axis];
            for j in 0..counts[v_axis] {
                for i in 0..counts[u_axis] {
                    let corner = |di: usize, dj: usize| {
                        let mut g = [0usize; 3];
                        g[axis] = fixed;
                        g[u_axis] = i + di;
                        g[v_axis] = j + dj;
                        g
                    };
                    let a = vertex(corner(0, 0), &mut vertices);
                    let b = vertex(corner(1, 0), &mut vertices);
                    let c = vertex(corner(1, 1), &mut vertices);
                    let d = vertex(corner(0, 1), &mut vertices);
                    // u × v points along +axis, so the high side keeps
                    // (a, b, c) winding and the low side reverses it.
                    if side == 1 {
                        faces.push([a, b, c]);
                        faces.push([a, c, d]);
                    } else {
                        faces.push([a, c, b]);
                        faces.push([a, d, c]);
                    }
                }
            }
        }
    }
    TriangleMesh::new(vertices, faces).expect("cuboid is valid")
}

/// Translate a mesh.
pub fn translated(mesh: &TriangleMesh, offset: Vec3) -> TriangleMesh {
    mesh.transformed(&nalgebra::Matrix3::identity(), &offset)
        .expect("translation preserves validity")
}

/// Two disjoint icospheres: a base body (label 0) and a smaller attached part
/// (label 1). Returns the merged mesh and per-vertex ground-truth labels.
pub fn two_part_compound(level: u32) -> (TriangleMesh, Vec<i8>) {
    let base = icosphere(level, 0.7);
    let part = translated(&icosphere(level, 0.35), Vec3::new(0.95, 0.0, 0.25));
    let mesh = base.merged(&part).expect("disjoint parts merge");
    let mut labels = vec![0i8; base.vertex_count()];
    labels.extend(std::iter::repeat_n(1i8, part.vertex_count()));
    (mesh, labels)
}

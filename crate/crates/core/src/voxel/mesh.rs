//! Iso-surface extraction (classic marching cubes at level 0.5) and mesh
//! export.
//!
//! The binary field is sampled at voxel centers and padded with one layer of
//! background, so components touching the grid boundary still close. Crossing
//! vertices are shared through an edge-keyed map, which makes each component
//! watertight by construction.

use std::collections::HashMap;
use std::path::Path;

use crate::util::write_atomic;
use crate::error::{Error, Result};

use super::mc_tables::{EDGE_CORNERS, EDGE_TABLE, TRI_TABLE};
use super::VoxelVolume;

#[derive(Debug, Clone, Default)]
pub struct TriMesh {
    /// World coordinates, mm.
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = [
                    self.vertices[t[0] as usize],
                    self.vertices[t[1] as usize],
                    self.vertices[t[2] as usize],
                ];
                let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
                let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
                let n = cross(u, v);
                0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
            })
            .sum()
    }

    /// Signed volume via the divergence theorem; positive for outward-facing
    /// counter-clockwise winding.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = [
                    self.vertices[t[0] as usize],
                    self.vertices[t[1] as usize],
                    self.vertices[t[2] as usize],
                ];
                dot(a, cross(b, c)) / 6.0
            })
            .sum()
    }

    /// True when every directed edge is used exactly once and its reverse
    /// exactly once: closed and consistently oriented.
    pub fn is_closed(&self) -> bool {
        let mut directed: HashMap<(u32, u32), i32> = HashMap::new();
        for t in &self.triangles {
            for e in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                *directed.entry(e).or_insert(0) += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }
}

fn cross(u: [f64; 3], v: [f64; 3]) -> [f64; 3] {
    [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ]
}

fn dot(u: [f64; 3], v: [f64; 3]) -> f64 {
    u[0] * v[0] + u[1] * v[1] + u[2] * v[2]
}

/// Sample positions are voxel centers on the padded lattice; a crossing
/// vertex sits at the midpoint of a lattice edge.
fn edge_vertex(v: &VoxelVolume, a: [isize; 3], axis: usize) -> [f64; 3] {
    let sp = v.spacing();
    let or = v.origin();
    let mut p = [
        or[0] + a[0] as f64 * sp[0],
        or[1] + a[1] as f64 * sp[1],
        or[2] + a[2] as f64 * sp[2],
    ];
    p[axis] += 0.5 * sp[axis];
    p
}

/// Extracts the 0.5 iso-surface of the binary field as a triangle mesh in
/// world coordinates. Errors on an empty foreground.
pub fn extract_surface_mesh(v: &VoxelVolume) -> Result<TriMesh> {
    if v.is_empty_foreground() {
        return Err(Error::EmptyVolume);
    }
    let [nx, ny, nz] = v.shape();

    let sample = |x: isize, y: isize, z: isize| -> bool {
        if x < 0 || y < 0 || z < 0 {
            return false;
        }
        let (x, y, z) = (x as usize, y as usize, z as usize);
        if x >= nx || y >= ny || z >= nz {
            return false;
        }
        v.get(x, y, z) != 0
    };

    // corner offsets in table order
    const CORNER: [[isize; 3]; 8] = [
        [0, 0, 0],
        [1, 0, 0],
        [1, 1, 0],
        [0, 1, 0],
        [0, 0, 1],
        [1, 0, 1],
        [1, 1, 1],
        [0, 1, 1],
    ];

    let mut mesh = TriMesh::default();
    let mut vertex_ids: HashMap<([isize; 3], u8), u32> = HashMap::new();

    for cz in -1..nz as isize {
        for cy in -1..ny as isize {
            for cx in -1..nx as isize {
                let mut case = 0usize;
                for (bit, c) in CORNER.iter().enumerate() {
                    if sample(cx + c[0], cy + c[1], cz + c[2]) {
                        case |= 1 << bit;
                    }
                }
                if EDGE_TABLE[case] == 0 {
                    continue;
                }

                let mut edge_ids = [u32::MAX; 12];
                for (e, corners) in EDGE_CORNERS.iter().enumerate() {
                    if EDGE_TABLE[case] & (1 << e) == 0 {
                        continue;
                    }
                    let ca = CORNER[corners[0]];
                    let cb = CORNER[corners[1]];
                    // canonical lattice edge: lower sample plus axis
                    let a = [cx + ca[0].min(cb[0]), cy + ca[1].min(cb[1]), cz + ca[2].min(cb[2])];
                    let axis = (0..3).find(|&i| ca[i] != cb[i]).expect("degenerate edge");
                    let key = (a, axis as u8);
                    let id = *vertex_ids.entry(key).or_insert_with(|| {
                        mesh.vertices.push(edge_vertex(v, a, axis));
                        (mesh.vertices.len() - 1) as u32
                    });
                    edge_ids[e] = id;
                }

                // the tables assume "bit set below iso"; with bits set above
                // iso the listed order faces inward, so swap two vertices
                let tri = &TRI_TABLE[case];
                let mut t = 0;
                while tri[t] >= 0 {
                    mesh.triangles.push([
                        edge_ids[tri[t] as usize],
                        edge_ids[tri[t + 2] as usize],
                        edge_ids[tri[t + 1] as usize],
                    ]);
                    t += 3;
                }
            }
        }
    }
    Ok(mesh)
}

/// Binary little-endian STL, units mm.
pub fn write_stl(mesh: &TriMesh, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(84 + mesh.triangles.len() * 50);
    let mut header = [0u8; 80];
    let tag = b"binary stl, units mm";
    header[..tag.len()].copy_from_slice(tag);
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&(mesh.triangles.len() as u32).to_le_bytes());
    for t in &mesh.triangles {
        let [a, b, c] = [
            mesh.vertices[t[0] as usize],
            mesh.vertices[t[1] as usize],
            mesh.vertices[t[2] as usize],
        ];
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let n = cross(u, v);
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        let n = if len > 0.0 {
            [n[0] / len, n[1] / len, n[2] / len]
        } else {
            [0.0; 3]
        };
        for &x in n.iter().chain(a.iter()).chain(b.iter()).chain(c.iter()) {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
        bytes.extend_from_slice(&0u16.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

/// ASCII PLY mesh, units mm.
pub fn write_ply_mesh(mesh: &TriMesh, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", mesh.vertices.len()));
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    out.push_str(&format!("element face {}\n", mesh.triangles.len()));
    out.push_str("property list uchar int vertex_indices\nend_header\n");
    for v in &mesh.vertices {
        out.push_str(&format!("{} {} {}\n", v[0] as f32, v[1] as f32, v[2] as f32));
    }
    for t in &mesh.triangles {
        out.push_str(&format!("3 {} {} {}\n", t[0], t[1], t[2]));
    }
    write_atomic(path, out.as_bytes())
}

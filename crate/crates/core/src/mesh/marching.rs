//! Marching cubes over a voxel volume.

use std::collections::HashMap;

use super::tables::TRI_TABLE;
use super::{Point, TriMesh};
use crate::error::{Error, Result};
use crate::phantom::VoxelVolume;

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Interpolation parameters this close to an edge end snap to the grid
/// point, so vertices shared through a corner are welded.
const SNAP: f64 = 1e-9;

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum VertexKey {
    Corner(usize),
    Edge(usize, usize),
}

/// Extracts the `iso` level set. Voxel `(i, j, k)` sits at
/// `(i, j, k) * spacing`; the surface faces from high to low density.
pub fn extract_isosurface(volume: &VoxelVolume, iso: f64) -> Result<TriMesh> {
    let (lo, hi) = volume.min_max();
    let (lo, hi) = (lo as f64, hi as f64);
    if !(iso > lo && iso < hi) {
        return Err(Error::EmptySurface { iso, min: lo, max: hi });
    }
    let [nx, ny, nz] = volume.dims;
    let sp = volume.spacing.map(|s| s as f64);
    let gid = |p: [usize; 3]| p[0] + nx * (p[1] + ny * p[2]);
    let value = |p: [usize; 3]| volume.data[gid(p)] as f64;
    let pos = |p: [usize; 3]| Point::new(p[0] as f64 * sp[0], p[1] as f64 * sp[1], p[2] as f64 * sp[2]);

    let mut index: HashMap<VertexKey, u32> = HashMap::new();
    let mut vertices: Vec<Point> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();

    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let pts = CORNERS.map(|c| [i + c[0], j + c[1], k + c[2]]);
                let vals = pts.map(value);
                let mut case = 0usize;
                for (b, &v) in vals.iter().enumerate() {
                    if v < iso {
                        case |= 1 << b;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let mut vertex_of = |e: usize| -> u32 {
                    let (a, b) = EDGES[e];
                    let t = (iso - vals[a]) / (vals[b] - vals[a]);
                    let key = if t <= SNAP {
                        VertexKey::Corner(gid(pts[a]))
                    } else if t >= 1.0 - SNAP {
                        VertexKey::Corner(gid(pts[b]))
                    } else {
                        let (ga, gb) = (gid(pts[a]), gid(pts[b]));
                        VertexKey::Edge(ga.min(gb), ga.max(gb))
                    };
                    *index.entry(key).or_insert_with(|| {
                        let p = match key {
                            VertexKey::Corner(_) if t <= SNAP => pos(pts[a]),
                            VertexKey::Corner(_) => pos(pts[b]),
                            VertexKey::Edge(..) => pos(pts[a]) + t * (pos(pts[b]) - pos(pts[a])),
                        };
                        vertices.push(p);
                        vertices.len() as u32 - 1
                    })
                };
                let row = &TRI_TABLE[case];
                for tri in row.chunks_exact(3).take_while(|c| c[0] >= 0) {
                    let t = [
                        vertex_of(tri[0] as usize),
                        vertex_of(tri[1] as usize),
                        vertex_of(tri[2] as usize),
                    ];
                    if t[0] != t[1] && t[1] != t[2] && t[0] != t[2] {
                        triangles.push(t);
                    }
                }
            }
        }
    }

    let mut mesh = TriMesh {
        vertices,
        triangles,
    };
    mesh.triangles.retain(|t| {
        let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
        0.5 * (b - a).cross(&(c - a)).norm() > 1e-12
    });
    if mesh.triangles.is_empty() {
        return Err(Error::EmptySurface { iso, min: lo, max: hi });
    }
    if mesh.signed_volume() < 0.0 {
        mesh.flip();
    }
    Ok(mesh)
}

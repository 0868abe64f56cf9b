//! Triangle meshes: iso-surface extraction, binary STL, distance queries,
//! surface distances and rigid alignment.

mod align;
mod distance;
mod marching;
mod query;
mod tables;

pub use align::{rigid_align, Alignment, IcpConfig};
pub use distance::{mesh_distance, surface_sample, DistanceReport};
pub use marching::extract_isosurface;
pub use query::{brute_force_distance, closest_point_on_triangle, point_mesh_distance, Bvh};

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Point = Vector3<f64>;

/// Indexed triangle surface, coordinates in mm.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Point>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Point>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let m = Self {
            vertices,
            triangles,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::Numeric("mesh vertex".into()));
        }
        let n = self.vertices.len() as u32;
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::Shape(format!("triangle {t:?} indexes past {n} vertices")));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    #[inline]
    pub fn corners(&self, t: usize) -> [Point; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.corners(t);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Signed enclosed volume; positive for outward-facing windings.
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.corners(t);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    pub fn flip(&mut self) {
        for t in &mut self.triangles {
            t.swap(1, 2);
        }
    }

    /// `(min, max)` corners of the axis-aligned box around the vertices
    /// used by triangles.
    pub fn bounds(&self) -> Option<(Point, Point)> {
        let mut it = self.triangles.iter().flatten().map(|&i| self.vertices[i as usize]);
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.inf(&v), hi.sup(&v))))
    }

    /// Area-weighted centroid of the surface.
    pub fn centroid(&self) -> Option<Point> {
        let mut acc = Point::zeros();
        let mut area = 0.0;
        for t in 0..self.triangles.len() {
            let [a, b, c] = self.corners(t);
            let w = 0.5 * (b - a).cross(&(c - a)).norm();
            acc += w * (a + b + c) / 3.0;
            area += w;
        }
        (area > 0.0).then(|| acc / area)
    }

    /// Area-weighted covariance of the surface about its centroid, computed
    /// exactly per triangle.
    pub fn covariance(&self) -> Option<(Point, Matrix3<f64>)> {
        let centroid = self.centroid()?;
        let mut m = Matrix3::zeros();
        let mut area = 0.0;
        for t in 0..self.triangles.len() {
            let [a, b, c] = self.corners(t).map(|v| v - centroid);
            let w = 0.5 * (b - a).cross(&(c - a)).norm();
            let s = a + b + c;
            m += (w / 12.0) * (s * s.transpose() + a * a.transpose() + b * b.transpose() + c * c.transpose());
            area += w;
        }
        Some((centroid, m / area))
    }

    /// `R v + t` applied to every vertex.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Point) -> Self {
        Self {
            vertices: self.vertices.iter().map(|v| rotation * v + translation).collect(),
            triangles: self.triangles.clone(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            vertices: self.vertices.iter().map(|v| v * factor).collect(),
            triangles: self.triangles.clone(),
        }
    }

    /// Undirected edges used by a number of triangles other than two.
    pub fn open_edges(&self) -> usize {
        let mut count: HashMap<(u32, u32), usize> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        count.values().filter(|&&c| c != 2).count()
    }

    /// Geodesic sphere from a subdivided icosahedron, outward winding.
    pub fn icosphere(center: Point, radius: f64, subdivisions: usize) -> Self {
        let p = (1.0 + 5f64.sqrt()) / 2.0;
        let mut vertices: Vec<Point> = [
            [-1.0, p, 0.0],
            [1.0, p, 0.0],
            [-1.0, -p, 0.0],
            [1.0, -p, 0.0],
            [0.0, -1.0, p],
            [0.0, 1.0, p],
            [0.0, -1.0, -p],
            [0.0, 1.0, -p],
            [p, 0.0, -1.0],
            [p, 0.0, 1.0],
            [-p, 0.0, -1.0],
            [-p, 0.0, 1.0],
        ]
        .iter()
        .map(|v| Point::from(*v).normalize())
        .collect();
        let mut triangles: Vec<[u32; 3]> = vec![
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
        for _ in 0..subdivisions {
            let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
            let mut next = Vec::with_capacity(triangles.len() * 4);
            let mut midpoint = |a: u32, b: u32, verts: &mut Vec<Point>| {
                *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    verts.push(((verts[a as usize] + verts[b as usize]) / 2.0).normalize());
                    verts.len() as u32 - 1
                })
            };
            for [a, b, c] in triangles {
                let ab = midpoint(a, b, &mut vertices);
                let bc = midpoint(b, c, &mut vertices);
                let ca = midpoint(c, a, &mut vertices);
                next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            triangles = next;
        }
        Self {
            vertices: vertices.iter().map(|v| center + radius * v).collect(),
            triangles,
        }
    }

    pub fn write_stl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = [0u8; 80];
        let tag = b"binary STL";
        header[..tag.len()].copy_from_slice(tag);
        w.write_all(&header)?;
        w.write_all(&(self.triangles.len() as u32).to_le_bytes())?;
        let mut rec = Vec::with_capacity(50);
        for t in 0..self.triangles.len() {
            let [a, b, c] = self.corners(t);
            let n = (b - a).cross(&(c - a));
            let n = if n.norm() > 0.0 { n.normalize() } else { n };
            rec.clear();
            for v in [n, a, b, c] {
                for x in v.iter() {
                    rec.extend_from_slice(&(*x as f32).to_le_bytes());
                }
            }
            rec.extend_from_slice(&0u16.to_le_bytes());
            w.write_all(&rec)?;
        }
        Ok(())
    }

    /// Reads binary STL, merging vertices with identical coordinates.
    pub fn read_stl<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(|e| Error::io("<stl>", e))?;
        if buf.len() < 84 {
            return Err(Error::format("STL", buf.len() as u64, "missing header"));
        }
        let n = u32::from_le_bytes(buf[80..84].try_into().unwrap()) as usize;
        let expected = 84 + 50 * n as u64;
        if buf.len() as u64 != expected {
            return Err(Error::format(
                "STL",
                buf.len().min(expected as usize) as u64,
                format!("{n} triangles need {expected} bytes, file has {}", buf.len()),
            ));
        }
        let mut index: HashMap<[u32; 3], u32> = HashMap::new();
        let mut vertices = Vec::new();
        let mut triangles = Vec::with_capacity(n);
        for t in 0..n {
            let rec = &buf[84 + 50 * t..84 + 50 * (t + 1)];
            let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap());
            let mut tri = [0u32; 3];
            for (c, slot) in tri.iter_mut().enumerate() {
                let xyz = [f(3 + 3 * c), f(4 + 3 * c), f(5 + 3 * c)];
                *slot = *index.entry(xyz.map(f32::to_bits)).or_insert_with(|| {
                    vertices.push(Point::new(xyz[0] as f64, xyz[1] as f64, xyz[2] as f64));
                    vertices.len() as u32 - 1
                });
            }
            triangles.push(tri);
        }
        Self::new(vertices, triangles)
    }

    pub fn save_stl(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_stl(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_stl(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_stl(std::io::BufReader::new(f))
    }
}

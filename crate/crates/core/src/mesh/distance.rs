//! Sampled surface distances (RMS and Hausdorff).

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Bvh, Point, TriMesh};
use crate::error::{Error, Result};
use crate::seed;

/// `n` area-uniform points on the surface, deterministic per seed.
pub fn surface_sample(mesh: &TriMesh, n: usize, seed: u64) -> Result<Vec<Point>> {
    if n == 0 {
        return Err(Error::Param("sample count must be at least 1".into()));
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::Param("cannot sample an empty mesh".into()));
    }
    let mut rng = seed::rng(seed);
    Ok((0..n)
        .map(|_| {
            let x = rng.random::<f64>() * total;
            let t = cumulative.partition_point(|&c| c <= x).min(cumulative.len() - 1);
            let [a, b, c] = mesh.corners(t);
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let s = r1.sqrt();
            a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub rms_mm: f64,
    pub hausdorff_mm: f64,
    pub rms_relative: f64,
    pub hausdorff_relative: f64,
    /// Points sampled on each mesh.
    pub sample_count: usize,
    pub bbox_diagonal_mm: f64,
}

/// Neumaier-compensated sum in slice order.
fn compensated_sum(values: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() {
            (sum - t) + v
        } else {
            (v - t) + sum
        };
        sum = t;
    }
    sum + comp
}

/// Symmetric sampled distance between two pre-aligned meshes.
pub fn mesh_distance(a: &TriMesh, b: &TriMesh, n: usize, seed: u64) -> Result<DistanceReport> {
    let sa = surface_sample(a, n, seed::derive_seed(seed, 0))?;
    let sb = surface_sample(b, n, seed::derive_seed(seed, 1))?;
    let (ba, bb) = (Bvh::new(a), Bvh::new(b));
    let mut d: Vec<f64> = sa.par_iter().map(|p| bb.distance(p)).collect();
    d.par_extend(sb.par_iter().map(|p| ba.distance(p)));
    let sq: Vec<f64> = d.iter().map(|v| v * v).collect();
    let rms = (compensated_sum(&sq) / d.len() as f64).sqrt();
    let hausdorff = d.iter().copied().fold(0.0, f64::max);
    let (la, ha) = a.bounds().expect("sampled mesh is non-empty");
    let (lb, hb) = b.bounds().expect("sampled mesh is non-empty");
    let diagonal = (ha.sup(&hb) - la.inf(&lb)).norm();
    Ok(DistanceReport {
        rms_mm: rms,
        hausdorff_mm: hausdorff,
        rms_relative: rms / diagonal,
        hausdorff_relative: hausdorff / diagonal,
        sample_count: n,
        bbox_diagonal_mm: diagonal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_triangles() -> TriMesh {
        // Areas 1 and 3.
        TriMesh::new(
            vec![
                Point::new(0.0, 0.0, 0.0),
                Point::new(2.0, 0.0, 0.0),
                Point::new(0.0, 1.0, 0.0),
                Point::new(10.0, 0.0, 0.0),
                Point::new(13.0, 0.0, 0.0),
                Point::new(10.0, 2.0, 0.0),
            ],
            vec![[0, 1, 2], [3, 4, 5]],
        )
        .unwrap()
    }

    #[test]
    fn sampling_is_area_uniform_and_inside() {
        let m = two_triangles();
        let pts = surface_sample(&m, 10_000, 4).unwrap();
        assert_eq!(pts, surface_sample(&m, 10_000, 4).unwrap());
        let second = pts.iter().filter(|p| p.x >= 5.0).count() as f64;
        let sigma = (10_000.0f64 * 0.75 * 0.25).sqrt();
        assert!((second - 7500.0).abs() < 3.0 * sigma, "{second}");
        for p in &pts {
            assert_eq!(p.z, 0.0);
            let inside = if p.x < 5.0 {
                p.x >= 0.0 && p.y >= 0.0 && p.x / 2.0 + p.y <= 1.0 + 1e-12
            } else {
                p.x >= 10.0 && p.y >= 0.0 && (p.x - 10.0) / 3.0 + p.y / 2.0 <= 1.0 + 1e-12
            };
            assert!(inside, "{p:?}");
        }
        assert!(surface_sample(&TriMesh::default(), 5, 1).is_err());
        assert!(surface_sample(&m, 0, 1).is_err());
    }

    #[test]
    fn identical_meshes_are_at_zero() {
        let s = TriMesh::icosphere(Point::zeros(), 1.0, 3);
        let r = mesh_distance(&s, &s, 5000, 1).unwrap();
        assert!(r.rms_mm <= 1e-9 && r.hausdorff_mm <= 1e-9);
    }

    #[test]
    fn concentric_spheres() {
        let a = TriMesh::icosphere(Point::zeros(), 1.0, 5);
        let b = TriMesh::icosphere(Point::zeros(), 1.1, 5);
        let r = mesh_distance(&a, &b, 100_000, 3).unwrap();
        assert!((r.rms_mm - 0.1).abs() < 0.002, "{r:?}");
        assert!((r.hausdorff_mm - 0.1).abs() < 0.002, "{r:?}");
        assert!(r.rms_mm <= r.hausdorff_mm);
        let swapped = mesh_distance(&b, &a, 100_000, 3).unwrap();
        assert!((r.rms_mm - swapped.rms_mm).abs() < 1e-4);
        assert_eq!(r.bbox_diagonal_mm, swapped.bbox_diagonal_mm);
    }

    #[test]
    fn relative_distances_are_scale_invariant() {
        let a = TriMesh::icosphere(Point::zeros(), 1.0, 3);
        let b = TriMesh::icosphere(Point::new(0.05, 0.0, 0.0), 1.0, 3);
        let r1 = mesh_distance(&a, &b, 2000, 5).unwrap();
        let r2 = mesh_distance(&a.scaled(4.0), &b.scaled(4.0), 2000, 5).unwrap();
        assert!((r1.rms_relative - r2.rms_relative).abs() < 1e-6);
        assert!((4.0 * r1.hausdorff_mm - r2.hausdorff_mm).abs() < 1e-6);
    }
}

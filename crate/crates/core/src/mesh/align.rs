//! Rigid registration: principal axes, then point-to-point ICP.

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{surface_sample, Bvh, Point, TriMesh};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpConfig {
    /// Points sampled on the moving mesh.
    pub samples: usize,
    pub max_iterations: usize,
    /// Stop once the RMS improves by less than this (mm).
    pub tolerance_mm: f64,
    pub seed: u64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            samples: 5000,
            max_iterations: 100,
            tolerance_mm: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Alignment {
    /// Maps moving coordinates onto the fixed mesh: `x ↦ R x + t`.
    pub rotation: Matrix3<f64>,
    pub translation: Point,
    pub aligned: TriMesh,
    /// RMS of sample-to-fixed distances after the last iteration.
    pub rms_mm: f64,
    pub iterations: usize,
}

const DIVERGENCE_RUN: usize = 5;

/// Eigenvectors as columns, sorted by decreasing eigenvalue, right-handed.
fn principal_axes(cov: Matrix3<f64>) -> Matrix3<f64> {
    let eig = SymmetricEigen::new(cov);
    let mut idx = [0, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axes = Matrix3::from_columns(&idx.map(|i| eig.eigenvectors.column(i).into_owned()));
    if axes.determinant() < 0.0 {
        axes.set_column(2, &(-axes.column(2)));
    }
    axes
}

/// Least-squares rotation and translation taking `src` onto `dst`.
fn kabsch(src: &[Point], dst: &[Point]) -> Result<(Matrix3<f64>, Point)> {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Point>() / n;
    let cd = dst.iter().sum::<Point>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Alignment("SVD did not converge".into())),
    };
    let v = v_t.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v * d * u.transpose();
    Ok((r, cd - r * cs))
}

fn rms_to(points: &[Point], r: &Matrix3<f64>, t: &Point, bvh: &Bvh) -> f64 {
    let sq: f64 = points
        .par_iter()
        .map(|p| bvh.distance(&(r * p + t)).powi(2))
        .collect::<Vec<_>>()
        .iter()
        .sum();
    (sq / points.len() as f64).sqrt()
}

/// Aligns `moving` onto `fixed`.
pub fn rigid_align(moving: &TriMesh, fixed: &TriMesh, config: &IcpConfig) -> Result<Alignment> {
    if moving.is_empty() || fixed.is_empty() {
        return Err(Error::Alignment("both meshes must be non-empty".into()));
    }
    let (cm, cov_m) = moving
        .covariance()
        .ok_or_else(|| Error::Alignment("moving mesh has zero area".into()))?;
    let (cf, cov_f) = fixed
        .covariance()
        .ok_or_else(|| Error::Alignment("fixed mesh has zero area".into()))?;
    let (em, ef) = (principal_axes(cov_m), principal_axes(cov_f));
    let samples = surface_sample(moving, config.samples.max(3), config.seed)?;
    let bvh = Bvh::new(fixed);

    // Four right-handed sign choices for the matched axes.
    let mut best: Option<(f64, Matrix3<f64>, Point)> = None;
    for s in [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]] {
        let r = ef * Matrix3::from_diagonal(&Point::from(s)) * em.transpose();
        let t = cf - r * cm;
        let rms = rms_to(&samples, &r, &t, &bvh);
        if best.as_ref().is_none_or(|b| rms < b.0) {
            best = Some((rms, r, t));
        }
    }
    let (mut rms, mut r, mut t) = best.expect("four candidates");

    let mut iterations = 0;
    let mut rising = 0;
    while iterations < config.max_iterations {
        iterations += 1;
        let targets: Vec<Point> = samples
            .par_iter()
            .map(|p| bvh.closest(&(r * p + t)).expect("non-empty").0)
            .collect();
        let (nr, nt) = kabsch(&samples, &targets)?;
        let next = rms_to(&samples, &nr, &nt, &bvh);
        if !next.is_finite() {
            return Err(Error::Alignment("non-finite RMS".into()));
        }
        let improvement = rms - next;
        if improvement < 0.0 {
            rising += 1;
            if rising >= DIVERGENCE_RUN {
                return Err(Error::Alignment(format!(
                    "RMS increased for {DIVERGENCE_RUN} consecutive iterations"
                )));
            }
        } else {
            rising = 0;
        }
        (r, t, rms) = (nr, nt, next);
        if improvement.abs() < config.tolerance_mm {
            break;
        }
    }
    Ok(Alignment {
        aligned: moving.transformed(&r, &t),
        rotation: r,
        translation: t,
        rms_mm: rms,
        iterations,
    })
}

//! Parallel-beam Beer–Lambert projection.
//!
//! The volume is rotated about its center by `rx` around the volume X axis,
//! then by `ry` around the beam axis (world Y). The detector spans world X
//! (rows, along the bone) and world Z (columns). The ML view is the AP view
//! with an extra 90° about X.

use super::grid::{GridConfig, PoseEnergy};
use super::image::{ImageMeta, RadiographImage, View};
use crate::error::{Error, Result};
use crate::phantom::VoxelVolume;

/// Energy response of the attenuation coefficients, relative to 140 keV.
pub fn lut(energy_kev: f64) -> f64 {
    1.0 - 0.01 * (energy_kev - 140.0)
}

type Mat3 = [[f64; 3]; 3];

fn rotation(rx_deg: f64, ry_deg: f64) -> Mat3 {
    let (sx, cx) = rx_deg.to_radians().sin_cos();
    let (sy, cy) = ry_deg.to_radians().sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| ry[i][k] * rx[k][j]).sum();
        }
    }
    m
}

/// `m^T v`
#[inline]
fn apply_transpose(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|j| m[0][j] * v[0] + m[1][j] * v[1] + m[2][j] * v[2])
}

/// Clips the ray `o + t d` to the box `[0, ext]`.
fn clip(o: [f64; 3], d: [f64; 3], ext: [f64; 3]) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        if d[a].abs() < 1e-12 {
            if o[a] < 0.0 || o[a] > ext[a] {
                return None;
            }
            continue;
        }
        let (mut lo, mut hi) = ((0.0 - o[a]) / d[a], (ext[a] - o[a]) / d[a]);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    (t1 > t0).then_some((t0, t1))
}

struct Sampler<'a> {
    vol: &'a VoxelVolume,
    inv_spacing: [f64; 3],
    max_index: [f64; 3],
}

impl<'a> Sampler<'a> {
    fn new(vol: &'a VoxelVolume) -> Self {
        Self {
            vol,
            inv_spacing: vol.spacing.map(|s| 1.0 / s as f64),
            max_index: vol.dims.map(|n| (n - 1) as f64),
        }
    }

    /// Trilinear density at a physical position inside the box.
    #[inline]
    fn sample(&self, p: [f64; 3]) -> f64 {
        let [nx, ny, _] = self.vol.dims;
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let u = (p[a] * self.inv_spacing[a]).clamp(0.0, self.max_index[a]);
            let i = (u.floor() as usize).min(self.vol.dims[a].saturating_sub(2));
            base[a] = i;
            frac[a] = u - i as f64;
        }
        let sx = if self.vol.dims[0] > 1 { 1 } else { 0 };
        let sy = if self.vol.dims[1] > 1 { nx } else { 0 };
        let sz = if self.vol.dims[2] > 1 { nx * ny } else { 0 };
        let i000 = base[0] + nx * (base[1] + ny * base[2]);
        let d = &self.vol.data;
        let c = |i: usize| d[i] as f64;
        let [fx, fy, fz] = frac;
        let x00 = c(i000) + fx * (c(i000 + sx) - c(i000));
        let x10 = c(i000 + sy) + fx * (c(i000 + sy + sx) - c(i000 + sy));
        let x01 = c(i000 + sz) + fx * (c(i000 + sz + sx) - c(i000 + sz));
        let x11 = c(i000 + sz + sy) + fx * (c(i000 + sz + sy + sx) - c(i000 + sz + sy));
        let y0 = x00 + fy * (x10 - x00);
        let y1 = x01 + fy * (x11 - x01);
        y0 + fz * (y1 - y0)
    }
}

/// Line integral of density along every detector ray, before the energy
/// transfer function. Exposed for tests and diagnostics.
pub fn density_integrals(
    volume: &VoxelVolume,
    pose: &PoseEnergy,
    view: View,
    config: &GridConfig,
) -> Result<Vec<f64>> {
    let extra = match view {
        View::Ap => 0.0,
        View::Ml => 90.0,
        View::Combined => {
            return Err(Error::Shape(
                "render a single view, then compose".into(),
            ))
        }
    };
    let rot = rotation(pose.rx + extra, pose.ry);
    let ext = volume.extent();
    let center = volume.center();
    let dir = apply_transpose(&rot, [0.0, 1.0, 0.0]);
    let max_step = 0.5 * volume.spacing.iter().fold(f32::INFINITY, |m, &s| m.min(s)) as f64;
    let sampler = Sampler::new(volume);
    let (w, h) = (config.view_width, config.view_height);
    let mut out = vec![0.0; w * h];
    for row in 0..h {
        let xw = (row as f64 + 0.5 - h as f64 / 2.0) * config.pixel_mm;
        for col in 0..w {
            let zw = (col as f64 + 0.5 - w as f64 / 2.0) * config.pixel_mm;
            let off = apply_transpose(&rot, [xw, 0.0, zw]);
            let o = std::array::from_fn(|a| center[a] + off[a]);
            let Some((t0, t1)) = clip(o, dir, ext) else {
                continue;
            };
            let n = ((t1 - t0) / max_step).ceil().max(1.0) as usize;
            let ds = (t1 - t0) / n as f64;
            let mut acc = 0.0;
            for s in 0..n {
                let t = t0 + (s as f64 + 0.5) * ds;
                acc += sampler.sample([o[0] + t * dir[0], o[1] + t * dir[1], o[2] + t * dir[2]]);
            }
            out[row * w + col] = acc * ds;
        }
    }
    Ok(out)
}

/// Renders one view. Pixel value is `1 - exp(-∫ μ ds)` with
/// `μ = density · lut(E) · attenuation_per_mm`.
pub fn render_projection(
    volume: &VoxelVolume,
    pose: &PoseEnergy,
    view: View,
    specimen_id: u32,
    config: &GridConfig,
) -> Result<RadiographImage> {
    let mu_scale = lut(pose.energy) * config.attenuation_per_mm;
    if !(mu_scale > 0.0) || !pose.rx.is_finite() || !pose.ry.is_finite() {
        return Err(Error::Param(format!("pose {pose:?} outside physical limits")));
    }
    let integrals = density_integrals(volume, pose, view, config)?;
    let mut pixels = Vec::with_capacity(integrals.len());
    for line in integrals {
        let optical_depth = line * mu_scale;
        if !optical_depth.is_finite() {
            return Err(Error::Numeric(format!(
                "projection of specimen {specimen_id} at {pose:?}"
            )));
        }
        let detected = config.i0 * (-optical_depth).exp();
        let value = 1.0 - detected / config.i0;
        pixels.push(value.clamp(0.0, 1.0) as f32);
    }
    RadiographImage::new(
        config.view_width,
        config.view_height,
        pixels,
        ImageMeta {
            specimen_id,
            view,
            pose: *pose,
            scale: [1.0, 1.0],
        },
    )
}

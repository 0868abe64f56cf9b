use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed arithmetic sequence `start, start + step, ...` up to `end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
    pub step: f64,
}

impl Interval {
    pub const fn new(start: f64, end: f64, step: f64) -> Self {
        Self { start, end, step }
    }

    pub fn values(&self) -> Vec<f64> {
        if !(self.step > 0.0) || self.end < self.start {
            return Vec::new();
        }
        // Guard against 0.1-style representation error at the last element.
        let span = (self.end - self.start) / self.step;
        let count = (span + 1e-9).floor() as usize + 1;
        (0..count)
            .map(|i| self.start + i as f64 * self.step)
            .collect()
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.start - 1e-9 && v <= self.end + 1e-9
    }
}

/// Rotation about the volume X axis (the bone's long axis), rotation about
/// the beam axis, and beam energy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseEnergy {
    /// Degrees.
    pub rx: f64,
    /// Degrees.
    pub ry: f64,
    /// keV.
    pub energy: f64,
}

/// Pose/energy sampling plus detector and post-processing settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub rx: Interval,
    pub ry: Interval,
    pub energy: Interval,
    /// Per-view detector width in pixels.
    pub view_width: usize,
    /// Per-view detector height in pixels (along the bone).
    pub view_height: usize,
    pub pixel_mm: f64,
    pub blur_sigma: f64,
    /// Incident intensity. Pixels record `1 - I / i0`, so it cancels.
    pub i0: f64,
    /// Linear attenuation per mm of a unit-density voxel at 140 keV.
    pub attenuation_per_mm: f64,
    /// Real-world length of the scaling object.
    pub ruler_mm: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            rx: Interval::new(70.0, 112.0, 3.0),
            ry: Interval::new(-21.0, 22.0, 3.0),
            energy: Interval::new(140.0, 161.0, 6.0),
            view_width: 64,
            view_height: 128,
            pixel_mm: 0.75,
            blur_sigma: 1.0,
            i0: 1.0,
            attenuation_per_mm: 0.1,
            ruler_mm: 10.0,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, iv) in [("rx", self.rx), ("ry", self.ry), ("energy", self.energy)] {
            if !(iv.step > 0.0) || !iv.start.is_finite() || !iv.end.is_finite() {
                return Err(Error::Config(format!("{name} interval {iv:?} is invalid")));
            }
        }
        if self.view_width == 0 || self.view_height == 0 {
            return Err(Error::Config("detector resolution must be positive".into()));
        }
        if !(self.pixel_mm > 0.0) || !(self.i0 > 0.0) || !(self.attenuation_per_mm > 0.0) {
            return Err(Error::Config(
                "pixel_mm, i0 and attenuation_per_mm must be positive".into(),
            ));
        }
        if !(self.blur_sigma >= 0.0) || !(self.ruler_mm > 0.0) {
            return Err(Error::Config("blur_sigma >= 0 and ruler_mm > 0 required".into()));
        }
        Ok(())
    }

    /// The pose nominally showing the standard AP/ML views: the midpoint of
    /// the rx interval, and ry = 0.
    pub fn nominal_pose(&self) -> (f64, f64) {
        (0.5 * (self.rx.start + self.rx.end), 0.0)
    }
}

/// Cartesian product of the three sequences, rx-major, then ry, then energy.
pub fn pose_grid(config: &GridConfig) -> Result<Vec<PoseEnergy>> {
    let rx = config.rx.values();
    let ry = config.ry.values();
    let energy = config.energy.values();
    for (name, v) in [("rx", &rx), ("ry", &ry), ("energy", &energy)] {
        if v.is_empty() {
            return Err(Error::EmptyGrid(name));
        }
    }
    let mut out = Vec::with_capacity(rx.len() * ry.len() * energy.len());
    for &a in &rx {
        for &b in &ry {
            for &e in &energy {
                out.push(PoseEnergy {
                    rx: a,
                    ry: b,
                    energy: e,
                });
            }
        }
    }
    Ok(out)
}

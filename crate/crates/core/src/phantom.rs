//! Synthetic long-bone phantoms.
//!
//! A phantom is a curved cortical tube with a marrow cavity, capped at both
//! ends by unions of ellipsoids. The bone's long axis runs along the volume
//! X axis. Densities are normalized attenuation coefficients (per mm once
//! scaled by the renderer), not Hounsfield units.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Shape and density parameters of one phantom. Lengths are in mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomParams {
    pub length: f64,
    pub shaft_radius: f64,
    /// Second derivative of the shaft centerline offset, 1/mm.
    pub shaft_curvature: f64,
    /// Head ellipsoid radii (x, y, z) at the proximal end.
    pub proximal_radii: [f64; 3],
    /// Condyle ellipsoid radii (x, y, z) at the distal end.
    pub distal_radii: [f64; 3],
    pub cortical_density: f64,
    pub marrow_density: f64,
    pub background_density: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            length: 70.0,
            shaft_radius: 4.0,
            shaft_curvature: 0.004,
            proximal_radii: [6.0, 5.5, 5.5],
            distal_radii: [5.0, 4.5, 5.5],
            cortical_density: 0.85,
            marrow_density: 0.12,
            background_density: 0.02,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let scalars = [
            self.length,
            self.shaft_radius,
            self.shaft_curvature,
            self.cortical_density,
            self.marrow_density,
            self.background_density,
        ];
        if scalars
            .iter()
            .chain(&self.proximal_radii)
            .chain(&self.distal_radii)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Param("non-finite phantom parameter".into()));
        }
        if self.shaft_radius <= 0.0
            || self.proximal_radii.iter().any(|&r| r <= 0.0)
            || self.distal_radii.iter().any(|&r| r <= 0.0)
        {
            return Err(Error::Param("all radii must be positive".into()));
        }
        if self.length <= 4.0 * self.shaft_radius {
            return Err(Error::Param(format!(
                "length {} must exceed 4 x shaft radius {}",
                self.length, self.shaft_radius
            )));
        }
        if self.proximal_radii[0] + self.distal_radii[0] >= self.length {
            return Err(Error::Param("end caps longer than the bone".into()));
        }
        if !(0.5..=1.0).contains(&self.cortical_density)
            || !(0.05..=0.2).contains(&self.marrow_density)
            || !(0.0..=0.05).contains(&self.background_density)
        {
            return Err(Error::Param("density outside its allowed range".into()));
        }
        if !(self.cortical_density > self.marrow_density
            && self.marrow_density > self.background_density)
        {
            return Err(Error::Param(
                "densities must satisfy cortical > marrow > background".into(),
            ));
        }
        Ok(())
    }

    /// Draws every field uniformly within `±variation` relative to `self`.
    /// Densities are clamped back into their domains afterwards.
    fn perturbed<R: Rng>(&self, variation: f64, rng: &mut R) -> Self {
        let mut jitter = |v: f64| v * (1.0 + variation * rng.random_range(-1.0..=1.0));
        let mut p = Self {
            length: jitter(self.length),
            shaft_radius: jitter(self.shaft_radius),
            shaft_curvature: jitter(self.shaft_curvature),
            proximal_radii: self.proximal_radii.map(&mut jitter),
            distal_radii: self.distal_radii.map(&mut jitter),
            cortical_density: jitter(self.cortical_density),
            marrow_density: jitter(self.marrow_density),
            background_density: jitter(self.background_density),
        };
        p.cortical_density = p.cortical_density.clamp(0.5, 1.0);
        p.marrow_density = p.marrow_density.clamp(0.05, 0.2);
        p.background_density = p.background_density.clamp(0.0, 0.05);
        p
    }
}

/// Voxel grid geometry shared by all specimens of a population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeGrid {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
}

impl Default for VolumeGrid {
    fn default() -> Self {
        Self {
            dims: [160, 64, 64],
            spacing: [0.5, 0.5, 0.5],
        }
    }
}

/// Scalar density grid, x-fastest. Sample `(i, j, k)` sits at physical
/// position `(i * sx, j * sy, k * sz)` mm.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub data: Vec<f32>,
}

impl VoxelVolume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        let vol = Self {
            dims,
            spacing,
            data,
        };
        vol.validate()?;
        Ok(vol)
    }

    pub fn filled(dims: [usize; 3], spacing: [f32; 3], value: f32) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims[0] * dims[1] * dims[2]])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dims.iter().product::<usize>();
        if n == 0 || self.data.len() != n {
            return Err(Error::Shape(format!(
                "volume dims {:?} do not match {} samples",
                self.dims,
                self.data.len()
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Param(format!("bad spacing {:?}", self.spacing)));
        }
        if self.data.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Param(
                "densities must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    /// Physical extent (mm) from the first to the last sample on each axis.
    pub fn extent(&self) -> [f64; 3] {
        std::array::from_fn(|a| (self.dims[a] - 1) as f64 * self.spacing[a] as f64)
    }

    pub fn center(&self) -> [f64; 3] {
        self.extent().map(|e| e / 2.0)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    const MAGIC: &'static [u8; 4] = b"VVOL";
    const VERSION: u8 = 1;

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&[Self::VERSION])?;
        for &d in &self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &s in &self.spacing {
            w.write_all(&s.to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut offset = 0u64;
        let mut take = |r: &mut R, buf: &mut [u8], what: &str| -> Result<()> {
            r.read_exact(buf)
                .map_err(|e| Error::format("volume", offset, format!("{what}: {e}")))?;
            offset += buf.len() as u64;
            Ok(())
        };
        let mut magic = [0u8; 4];
        take(&mut r, &mut magic, "magic")?;
        if &magic != Self::MAGIC {
            return Err(Error::format("volume", 0, "bad magic"));
        }
        let mut version = [0u8; 1];
        take(&mut r, &mut version, "version")?;
        if version[0] != Self::VERSION {
            return Err(Error::Version {
                found: version[0],
                expected: Self::VERSION,
            });
        }
        let mut b4 = [0u8; 4];
        let mut dims = [0usize; 3];
        for d in &mut dims {
            take(&mut r, &mut b4, "dims")?;
            *d = u32::from_le_bytes(b4) as usize;
        }
        let mut spacing = [0f32; 3];
        for s in &mut spacing {
            take(&mut r, &mut b4, "spacing")?;
            *s = f32::from_le_bytes(b4);
        }
        let n = dims.iter().product::<usize>();
        let mut raw = vec![0u8; n * 4];
        take(&mut r, &mut raw, "density data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(dims, spacing, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Normalized radial coordinate, < 1 inside.
    #[inline]
    fn level(&self, p: [f64; 3], shrink: f64) -> f64 {
        let mut s = 0.0;
        for a in 0..3 {
            let r = (self.radii[a] - shrink).max(1e-6);
            let d = (p[a] - self.center[a]) / r;
            s += d * d;
        }
        s
    }
}

/// Implicit description of one bone in volume coordinates (mm).
struct BoneShape {
    center: [f64; 3],
    shaft_start: f64,
    shaft_end: f64,
    shaft_radius: f64,
    curvature: f64,
    wall: f64,
    caps: Vec<Ellipsoid>,
    densities: (f64, f64, f64),
}

impl BoneShape {
    fn new(p: &PhantomParams, center: [f64; 3]) -> Self {
        let x0 = center[0] - p.length / 2.0;
        let x1 = center[0] + p.length / 2.0;
        let pr = p.proximal_radii;
        let dr = p.distal_radii;
        let head = Ellipsoid {
            center: [x0 + pr[0], center[1] + 0.25 * pr[1], center[2]],
            radii: pr,
        };
        let trochanter = Ellipsoid {
            center: [x0 + 1.4 * pr[0], center[1] - 0.45 * pr[1], center[2]],
            radii: pr.map(|r| 0.7 * r),
        };
        let condyle = |side: f64| Ellipsoid {
            center: [x1 - dr[0], center[1], center[2] + side * 0.45 * dr[2]],
            radii: [dr[0], dr[1], 0.75 * dr[2]],
        };
        Self {
            center,
            shaft_start: x0 + pr[0],
            shaft_end: x1 - dr[0],
            shaft_radius: p.shaft_radius,
            curvature: p.shaft_curvature,
            wall: 0.4 * p.shaft_radius,
            caps: vec![head, trochanter, condyle(-1.0), condyle(1.0)],
            densities: (
                p.cortical_density,
                p.marrow_density,
                p.background_density,
            ),
        }
    }

    /// Centerline offset along +Y: a quadratic arc that vanishes at both
    /// shaft ends.
    #[inline]
    fn bow(&self, x: f64) -> f64 {
        let mid = 0.5 * (self.shaft_start + self.shaft_end);
        let half = 0.5 * (self.shaft_end - self.shaft_start);
        let u = x - mid;
        0.5 * self.curvature * (u * u - half * half)
    }

    fn density_at(&self, p: [f64; 3]) -> f64 {
        let (cortical, marrow, background) = self.densities;
        let mut outer = false;
        if p[0] >= self.shaft_start && p[0] <= self.shaft_end {
            let dy = p[1] - self.center[1] - self.bow(p[0]);
            let dz = p[2] - self.center[2];
            let r = (dy * dy + dz * dz).sqrt();
            if r <= self.shaft_radius - self.wall {
                return marrow;
            }
            outer = r <= self.shaft_radius;
        }
        for cap in &self.caps {
            if cap.level(p, self.wall) <= 1.0 {
                return marrow;
            }
            if !outer && cap.level(p, 0.0) <= 1.0 {
                outer = true;
            }
        }
        if outer {
            cortical
        } else {
            background
        }
    }
}

fn check_fits(p: &PhantomParams, grid: &VolumeGrid) -> Result<()> {
    let ext: [f64; 3] =
        std::array::from_fn(|a| (grid.dims[a].max(1) - 1) as f64 * grid.spacing[a] as f64);
    let r = p
        .proximal_radii
        .iter()
        .chain(&p.distal_radii)
        .fold(p.shaft_radius, |m, &v| m.max(v));
    let half_shaft = 0.5 * (p.length - p.proximal_radii[0] - p.distal_radii[0]);
    let sag = 0.5 * p.shaft_curvature.abs() * half_shaft * half_shaft;
    if p.length > ext[0] || 2.0 * (1.5 * r + sag) > ext[1] || 3.0 * r > ext[2] {
        return Err(Error::Param(format!(
            "phantom does not fit a {:?} mm volume",
            ext
        )));
    }
    Ok(())
}

/// Rasterizes one specimen. With `variation == 0` the realized parameters
/// are `base` exactly.
pub fn generate_specimen(
    seed: u64,
    base: &PhantomParams,
    variation: f64,
    grid: &VolumeGrid,
) -> Result<(VoxelVolume, PhantomParams)> {
    if !(0.0..=0.5).contains(&variation) {
        return Err(Error::Param(format!(
            "variation {variation} outside [0, 0.5]"
        )));
    }
    base.validate()?;
    if grid.dims.iter().any(|&d| d < 2) || grid.spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Param(format!("bad volume grid {grid:?}")));
    }
    let params = if variation == 0.0 {
        base.clone()
    } else {
        let mut rng = seed::rng(seed);
        base.perturbed(variation, &mut rng)
    };
    params.validate()?;
    check_fits(&params, grid)?;

    let [nx, ny, nz] = grid.dims;
    let sp = grid.spacing.map(f64::from);
    let center: [f64; 3] = std::array::from_fn(|a| (grid.dims[a] - 1) as f64 * sp[a] / 2.0);
    let shape = BoneShape::new(&params, center);

    // 2x2x2 supersampling for partial-volume edges.
    const OFFSETS: [f64; 2] = [-0.25, 0.25];
    let mut data = vec![0f32; nx * ny * nz];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let mut acc = 0.0;
                for oz in OFFSETS {
                    for oy in OFFSETS {
                        for ox in OFFSETS {
                            let p = [
                                (i as f64 + ox) * sp[0],
                                (j as f64 + oy) * sp[1],
                                (k as f64 + oz) * sp[2],
                            ];
                            acc += shape.density_at(p);
                        }
                    }
                }
                data[i + nx * (j + ny * k)] = (acc / 8.0) as f32;
            }
        }
    }
    let volume = VoxelVolume::new(grid.dims, grid.spacing, data)?;
    Ok((volume, params))
}

#[derive(Debug, Clone)]
pub struct Specimen {
    pub id: u32,
    pub seed: u64,
    pub volume: VoxelVolume,
    pub params: PhantomParams,
}

/// Generates `n` specimens with ids `0..n` and per-specimen seeds derived
/// from `seed`.
pub fn generate_population(
    n: usize,
    seed: u64,
    base: &PhantomParams,
    variation: f64,
    grid: &VolumeGrid,
) -> Result<Vec<Specimen>> {
    if n == 0 {
        return Err(Error::EmptyPopulation);
    }
    use rayon::prelude::*;
    (0..n as u32)
        .into_par_iter()
        .map(|id| {
            let s = seed::derive_seed(seed, id as u64);
            let (volume, params) = generate_specimen(s, base, variation, grid)?;
            Ok(Specimen {
                id,
                seed: s,
                volume,
                params,
            })
        })
        .collect()
}

/// One line of the population manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationEntry {
    pub specimen_id: u32,
    pub seed: u64,
    pub params: PhantomParams,
    pub volume: PathBuf,
}

/// Writes `volumes/specimen_XXXX.vvol` plus `population.jsonl` under `dir`.
pub fn write_population(specimens: &[Specimen], dir: &Path) -> Result<Vec<PopulationEntry>> {
    let vol_dir = dir.join("volumes");
    std::fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let mut entries = Vec::with_capacity(specimens.len());
    for s in specimens {
        let rel = PathBuf::from("volumes").join(format!("specimen_{:04}.vvol", s.id));
        s.volume.save(&dir.join(&rel))?;
        entries.push(PopulationEntry {
            specimen_id: s.id,
            seed: s.seed,
            params: s.params.clone(),
            volume: rel,
        });
    }
    crate::io::write_jsonl(&dir.join("population.jsonl"), &entries)?;
    Ok(entries)
}

/// Reads a population manifest and the volumes it references (paths are
/// relative to the manifest's directory).
pub fn read_population(manifest: &Path) -> Result<Vec<Specimen>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries: Vec<PopulationEntry> = crate::io::read_jsonl(manifest)?;
    entries
        .into_iter()
        .map(|e| {
            Ok(Specimen {
                id: e.specimen_id,
                seed: e.seed,
                volume: VoxelVolume::load(&base.join(&e.volume))?,
                params: e.params,
            })
        })
        .collect()
}

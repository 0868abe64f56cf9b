use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::{pose_grid, GridConfig, PoseEnergy};
use super::image::{ImageMeta, RadiographImage, View};
use super::post::{common_target, compose_views, gaussian_blur, scale_coefficient, scale_normalize};
use super::render::render_projection;
use crate::error::{Error, Result};
use crate::phantom::Specimen;

/// One manifest line. `path` is relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRow {
    pub specimen_id: u32,
    pub image_id: u64,
    pub rx: f64,
    pub ry: f64,
    pub energy: f64,
    pub view: View,
    pub scale_ap: f64,
    pub scale_ml: f64,
    pub path: PathBuf,
}

impl DatasetRow {
    pub fn pose(&self) -> PoseEnergy {
        PoseEnergy {
            rx: self.rx,
            ry: self.ry,
            energy: self.energy,
        }
    }

    pub fn meta(&self) -> ImageMeta {
        ImageMeta {
            specimen_id: self.specimen_id,
            view: self.view,
            pose: self.pose(),
            scale: [self.scale_ap, self.scale_ml],
        }
    }
}

/// Image rows plus the directory their paths are relative to.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub rows: Vec<DatasetRow>,
}

impl DatasetManifest {
    pub const FILE_NAME: &'static str = "dataset.jsonl";

    pub fn load(path: &Path) -> Result<Self> {
        let rows = crate::io::read_jsonl(path)?;
        Ok(Self {
            root: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            rows,
        })
    }

    pub fn save(&self) -> Result<()> {
        crate::io::write_jsonl(&self.root.join(Self::FILE_NAME), &self.rows)
    }

    pub fn load_image(&self, row: &DatasetRow) -> Result<RadiographImage> {
        RadiographImage::load_pgm(&self.root.join(&row.path), row.meta())
    }

    /// Loads every image in row order.
    pub fn load_images(&self) -> Result<Vec<RadiographImage>> {
        self.rows.par_iter().map(|r| self.load_image(r)).collect()
    }

    pub fn filter(&self, keep: impl Fn(&DatasetRow) -> bool) -> Self {
        Self {
            root: self.root.clone(),
            rows: self.rows.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    pub fn specimen_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.rows.iter().map(|r| r.specimen_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Detector pixels covered by the scaling object in one view. The detector
/// pitch is fixed in mm, so every view measures the same ruler length.
pub fn ruler_pixels(config: &GridConfig) -> f64 {
    config.ruler_mm / config.pixel_mm
}

/// Renders, blurs, scale-normalizes and composes one grid entry.
pub fn render_combined(
    specimen: &Specimen,
    pose: &PoseEnergy,
    config: &GridConfig,
    target_px_per_mm: f64,
) -> Result<RadiographImage> {
    let ruler = ruler_pixels(config);
    let mut views = Vec::with_capacity(2);
    for view in [View::Ap, View::Ml] {
        let raw = render_projection(&specimen.volume, pose, view, specimen.id, config)?;
        views.push(gaussian_blur(&raw, config.blur_sigma)?);
    }
    let views = scale_normalize(&views, &[ruler, ruler], config.ruler_mm, target_px_per_mm)?;
    Ok(compose_views(&views[0], &views[1])?.quantized())
}

/// Manifest rows for `specimen_ids` × the pose grid, without rendering.
/// Image ids are `specimen_id * |grid| + pose index`.
pub fn plan_dataset(specimen_ids: &[u32], config: &GridConfig) -> Result<Vec<DatasetRow>> {
    if specimen_ids.is_empty() {
        return Err(Error::EmptyPopulation);
    }
    config.validate()?;
    let grid = pose_grid(config)?;
    let ruler = ruler_pixels(config);
    let rulers = vec![ruler; 2 * specimen_ids.len()];
    let target = common_target(&rulers, config.ruler_mm).expect("non-empty population");
    let c = scale_coefficient(ruler, config.ruler_mm, target)?;
    let mut rows = Vec::with_capacity(specimen_ids.len() * grid.len());
    for &id in specimen_ids {
        for (pose_idx, pose) in grid.iter().enumerate() {
            rows.push(DatasetRow {
                specimen_id: id,
                image_id: id as u64 * grid.len() as u64 + pose_idx as u64,
                rx: pose.rx,
                ry: pose.ry,
                energy: pose.energy,
                view: View::Combined,
                scale_ap: c,
                scale_ml: c,
                path: PathBuf::from("images").join(format!("s{id:04}_p{pose_idx:04}.pgm")),
            });
        }
    }
    Ok(rows)
}

/// Renders the full specimen × pose dataset into `out_dir/images` and writes
/// `out_dir/dataset.jsonl` in [`plan_dataset`] order.
pub fn render_dataset(
    population: &[Specimen],
    config: &GridConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let ids: Vec<u32> = population.iter().map(|s| s.id).collect();
    let rows = plan_dataset(&ids, config)?;
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let target = common_target(&[ruler_pixels(config)], config.ruler_mm).expect("one ruler");
    let per_specimen = rows.len() / population.len();
    rows.par_iter()
        .enumerate()
        .try_for_each(|(i, row)| {
            let image = render_combined(&population[i / per_specimen], &row.pose(), config, target)?;
            if image.meta.scale != [row.scale_ap, row.scale_ml] {
                return Err(Error::Numeric(format!("scale of image {}", row.image_id)));
            }
            image.save_pgm(&out_dir.join(&row.path))
        })?;
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        rows,
    };
    manifest.save()?;
    Ok(manifest)
}

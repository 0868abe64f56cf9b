//! End-to-end experiment: phantoms, rendering, training, embedding,
//! classification, shape estimation and the separation analysis.

mod config;
pub mod stages;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{
    EncoderConfig, EvaluationConfig, ExperimentConfig, PopulationConfig, SeparationConfig, SplitConfig,
};
pub use stages::{Classification, HoldoutPrediction, Layout, ShapeEstimate, Splits};

use crate::error::{Error, Result};
use crate::fingerprint::SeparationReport;
use crate::io::write_json;
use crate::mesh::{mesh_distance, rigid_align, DistanceReport, IcpConfig, TriMesh};
use crate::triplet::EpochRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Wall-clock information; everything else in the report is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeInfo {
    pub threads: usize,
    pub stages: Vec<StageTiming>,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub images: usize,
    pub training_images: usize,
    pub final_epoch: Option<EpochRecord>,
    pub margin: f64,
    pub validation_triplet_accuracy: f64,
    pub knn_accuracy_in_set: f64,
    pub knn_accuracy_holdout: Option<f64>,
    pub separation: Vec<SeparationReport>,
    pub holdout: Vec<ShapeEstimate>,
    pub runtime: RuntimeInfo,
}

impl ExperimentReport {
    /// `metric,value` lines for the headline numbers.
    pub fn headline_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let mut push = |k: &str, v: f64| out.push_str(&format!("{k},{v}\n"));
        push("validation_triplet_accuracy", self.validation_triplet_accuracy);
        push("knn_accuracy_in_set", self.knn_accuracy_in_set);
        if let Some(v) = self.knn_accuracy_holdout {
            push("knn_accuracy_holdout", v);
        }
        for s in &self.separation {
            push(&format!("separation_{}", s.filter.name), s.accuracy);
        }
        for h in &self.holdout {
            let id = h.specimen_id;
            push(&format!("specimen_{id}_rms_relative"), h.distance.rms_relative);
            push(&format!("specimen_{id}_hausdorff_relative"), h.distance.hausdorff_relative);
            push(&format!("specimen_{id}_better_match_rank"), h.better_match_rank as f64);
        }
        push("total_seconds", self.runtime.total_seconds);
        out
    }
}

fn timed<T>(
    name: &'static str,
    timings: &mut Vec<StageTiming>,
    f: impl FnOnce() -> Result<T>,
) -> Result<T> {
    let t0 = Instant::now();
    let out = f().map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })?;
    timings.push(StageTiming {
        stage: name.to_string(),
        seconds: t0.elapsed().as_secs_f64(),
    });
    Ok(out)
}

/// Runs every stage in order under `out`, writing `report.json` and
/// `headline.csv` at the end.
pub fn run_pipeline(config: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    config.validate()?;
    let layout = Layout::new(out);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("config.json"), config)?;
    let start = Instant::now();
    let mut t = Vec::new();

    timed("phantom", &mut t, || stages::phantom(config, &layout))?;
    let manifest = timed("render", &mut t, || stages::render(config, &layout))?;
    let splits = timed("split", &mut t, || stages::split(config, &layout))?;
    let history = timed("train", &mut t, || stages::train(config, &layout))?;
    timed("hygiene", &mut t, || stages::check_holdout_hygiene(config, &layout))?;
    timed("embed", &mut t, || stages::embed(config, &layout))?;
    let classification = timed("classify", &mut t, || stages::classify(config, &layout))?;
    timed("meshes", &mut t, || stages::meshes(config, &layout))?;
    let holdout = if config.holdout.is_empty() {
        Vec::new()
    } else {
        timed("estimate", &mut t, || stages::estimate(config, &layout))?
    };
    let separation = timed("pairs", &mut t, || stages::pairs(config, &layout))?;

    let report = ExperimentReport {
        images: manifest.rows.len(),
        training_images: splits.train.len(),
        final_epoch: history.last().cloned(),
        margin: classification.margin,
        validation_triplet_accuracy: classification.validation_triplet_accuracy,
        knn_accuracy_in_set: classification.knn_accuracy_in_set,
        knn_accuracy_holdout: classification.knn_accuracy_holdout,
        separation,
        holdout,
        runtime: RuntimeInfo {
            threads: rayon::current_num_threads(),
            stages: t,
            total_seconds: start.elapsed().as_secs_f64(),
        },
    };
    write_json(&layout.report(), &report)?;
    let headline = layout.headline();
    std::fs::write(&headline, report.headline_csv()).map_err(|e| Error::io(&headline, e))?;
    Ok(report)
}

/// Rigidly aligns the predicted mesh onto the true one, then measures the
/// remaining surface distance.
pub fn evaluate_report(predicted: &Path, truth: &Path, samples: usize, seed: u64) -> Result<DistanceReport> {
    let a = TriMesh::load_stl(predicted)?;
    let b = TriMesh::load_stl(truth)?;
    let icp = IcpConfig {
        seed,
        ..IcpConfig::default()
    };
    let aligned = rigid_align(&a, &b, &icp)?.aligned;
    mesh_distance(&aligned, &b, samples, seed)
}

/// Absolute distances in mm, relative ones to four decimals.
pub fn format_distance(r: &DistanceReport) -> String {
    format!(
        "rms {:.4} mm ({:.4} rel)  hausdorff {:.4} mm ({:.4} rel)  bbox diagonal {:.4} mm  samples {}",
        r.rms_mm, r.rms_relative, r.hausdorff_mm, r.hausdorff_relative, r.bbox_diagonal_mm, r.sample_count
    )
}

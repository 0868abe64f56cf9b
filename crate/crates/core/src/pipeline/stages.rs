//! Individual pipeline stages. Each reads its inputs from the output tree
//! and writes its own artifacts, so stages can also run one at a time.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::drr::{render_dataset, DatasetManifest};
use crate::encoder::{init_model, load_model, save_model, EncoderModel};
use crate::error::{Error, Result};
use crate::fingerprint::{
    candidate_distances, embed_images, knn_accuracy, knn_classify, pairwise_separation, rank_in,
    EmbeddingStore, MeshCatalog, RankConfig, SeparationReport,
};
use crate::io::{read_json, read_jsonl, write_json, write_jsonl};
use crate::mesh::{extract_isosurface, mesh_distance, rigid_align, DistanceReport, TriMesh};
use crate::phantom::{generate_population, read_population, write_population, Specimen};
use crate::seed;
use crate::triplet::{train_with, TrainHooks, TrainingHistory, TrainingSet, TripletSampler};

/// File locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }
    pub fn population_dir(&self) -> PathBuf {
        self.root.join("population")
    }
    pub fn population(&self) -> PathBuf {
        self.population_dir().join("population.jsonl")
    }
    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join("dataset")
    }
    pub fn dataset(&self) -> PathBuf {
        self.dataset_dir().join(DatasetManifest::FILE_NAME)
    }
    pub fn splits(&self) -> PathBuf {
        self.root.join("splits.json")
    }
    pub fn model_dir(&self) -> PathBuf {
        self.root.join("model")
    }
    pub fn model(&self) -> PathBuf {
        self.model_dir().join("encoder.ostm")
    }
    pub fn history(&self) -> PathBuf {
        self.model_dir().join("history.csv")
    }
    pub fn batches(&self) -> PathBuf {
        self.model_dir().join("batches.jsonl")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.root.join("embeddings.csv")
    }
    pub fn classification(&self) -> PathBuf {
        self.root.join("classification.json")
    }
    pub fn mesh_dir(&self) -> PathBuf {
        self.root.join("meshes")
    }
    pub fn mesh(&self, specimen: u32) -> PathBuf {
        self.mesh_dir().join(format!("specimen_{specimen:04}.stl"))
    }
    pub fn estimates(&self) -> PathBuf {
        self.root.join("estimates.json")
    }
    pub fn separation(&self) -> PathBuf {
        self.root.join("separation.json")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn headline(&self) -> PathBuf {
        self.root.join("headline.csv")
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn phantom(config: &ExperimentConfig, layout: &Layout) -> Result<Vec<Specimen>> {
    let p = &config.population;
    let specimens = generate_population(p.size, p.seed, &p.base, p.variation, &p.grid)?;
    mkdir(&layout.population_dir())?;
    write_population(&specimens, &layout.population_dir())?;
    Ok(specimens)
}

pub fn render(config: &ExperimentConfig, layout: &Layout) -> Result<DatasetManifest> {
    let population = read_population(&layout.population())?;
    render_dataset(&population, &config.render, &layout.dataset_dir())
}

/// Image ids per role.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<u64>,
    pub validation: Vec<u64>,
    pub holdout_fit: Vec<u64>,
    pub holdout_query: Vec<u64>,
}

/// Shuffles each specimen's images and cuts off `fraction` of them (at
/// least one, never all).
fn cut(ids: &mut [u64], fraction: f64, seed: u64) -> usize {
    ids.sort_unstable();
    ids.shuffle(&mut seed::rng(seed));
    let n = ids.len();
    ((fraction * n as f64).round() as usize).clamp(1.min(n), n.saturating_sub(1))
}

pub fn split(config: &ExperimentConfig, layout: &Layout) -> Result<Splits> {
    let manifest = DatasetManifest::load(&layout.dataset())?;
    let holdout: HashSet<u32> = config.holdout.iter().copied().collect();
    let mut by_specimen: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
    for r in &manifest.rows {
        by_specimen.entry(r.specimen_id).or_default().push(r.image_id);
    }
    let mut s = Splits::default();
    for (id, mut ids) in by_specimen {
        let stream = seed::derive_seed(config.split.seed, id as u64);
        if holdout.contains(&id) {
            let k = cut(&mut ids, config.split.holdout_fit_fraction, stream);
            s.holdout_fit.extend(&ids[..k]);
            s.holdout_query.extend(&ids[k..]);
        } else {
            let k = cut(&mut ids, config.split.validation_fraction, stream);
            s.validation.extend(&ids[..k]);
            s.train.extend(&ids[k..]);
        }
    }
    for v in [&mut s.train, &mut s.validation, &mut s.holdout_fit, &mut s.holdout_query] {
        v.sort_unstable();
    }
    write_json(&layout.splits(), &s)?;
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BatchLine {
    epoch: usize,
    step: usize,
    image_ids: Vec<u64>,
}

pub fn train(config: &ExperimentConfig, layout: &Layout) -> Result<TrainingHistory> {
    let manifest = DatasetManifest::load(&layout.dataset())?;
    let splits: Splits = read_json(&layout.splits())?;
    let keep: HashSet<u64> = splits.train.iter().copied().collect();
    let holdout: HashSet<u32> = config.holdout.iter().copied().collect();
    let train_rows = manifest.filter(|r| keep.contains(&r.image_id) && !holdout.contains(&r.specimen_id));
    let set = TrainingSet::from_manifest(&train_rows)?;
    let model = init_model(config.network_spec(), config.encoder.init_seed)?;
    mkdir(&layout.model_dir())?;
    let mut hooks = TrainHooks {
        checkpoint_dir: Some(layout.model_dir().join("checkpoints")),
        record_batches: true,
        batch_log: Vec::new(),
    };
    let (model, history) = train_with(model, &set, &config.training, &mut hooks)?;
    save_model(&model, &layout.model())?;
    history.save_csv(&layout.history())?;
    let lines: Vec<BatchLine> = hooks
        .batch_log
        .into_iter()
        .map(|b| BatchLine {
            epoch: b.epoch,
            step: b.step,
            image_ids: b.image_ids,
        })
        .collect();
    write_jsonl(&layout.batches(), &lines)?;
    Ok(history)
}

/// Fails if any logged training batch touched a held-out specimen's image.
pub fn check_holdout_hygiene(config: &ExperimentConfig, layout: &Layout) -> Result<usize> {
    let manifest = DatasetManifest::load(&layout.dataset())?;
    let holdout: HashSet<u32> = config.holdout.iter().copied().collect();
    let banned: HashSet<u64> = manifest
        .rows
        .iter()
        .filter(|r| holdout.contains(&r.specimen_id))
        .map(|r| r.image_id)
        .collect();
    let lines: Vec<BatchLine> = read_jsonl(&layout.batches())?;
    let mut checked = 0;
    for line in &lines {
        if let Some(id) = line.image_ids.iter().find(|id| banned.contains(id)) {
            return Err(Error::Config(format!(
                "held-out image {id} used in epoch {} step {}",
                line.epoch, line.step
            )));
        }
        checked += line.image_ids.len();
    }
    Ok(checked)
}

pub fn embed(_config: &ExperimentConfig, layout: &Layout) -> Result<EmbeddingStore> {
    let manifest = DatasetManifest::load(&layout.dataset())?;
    let model: EncoderModel = load_model(&layout.model())?;
    let store = embed_images(&model, &manifest)?;
    store.save(&layout.embeddings())?;
    Ok(store)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutPrediction {
    pub specimen_id: u32,
    /// Majority of the per-image kNN decisions against the training
    /// specimens (ties go to the lower id).
    pub predicted: u32,
    pub votes: usize,
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    /// Margin-condition accuracy on sampled validation triplets.
    pub validation_triplet_accuracy: f64,
    pub margin: f64,
    /// Fit on training images, queried with validation images.
    pub knn_accuracy_in_set: f64,
    /// Fit and queried on disjoint images of the held-out specimens.
    pub knn_accuracy_holdout: Option<f64>,
    pub holdout: Vec<HoldoutPrediction>,
}

fn subset(store: &EmbeddingStore, ids: &[u64]) -> EmbeddingStore {
    let keep: HashSet<u64> = ids.iter().copied().collect();
    store.filter(|r| keep.contains(&r.image_id))
}

pub fn classify(config: &ExperimentConfig, layout: &Layout) -> Result<Classification> {
    let store = EmbeddingStore::load(&layout.embeddings())?;
    let splits: Splits = read_json(&layout.splits())?;
    let train = subset(&store, &splits.train);
    let validation = subset(&store, &splits.validation);
    let k = config.knn_k;

    let labels: Vec<u32> = validation.rows().iter().map(|r| r.specimen_id).collect();
    let sampler = TripletSampler::new(&labels)?;
    let mut rng = seed::rng(seed::derive_seed(config.evaluation.seed, 0x7641));
    let rows = validation.rows();
    let triplets = sampler.sample_batch(config.evaluation.validation_triplets, &mut rng);
    let batch: Vec<(&[f32], &[f32], &[f32])> = triplets
        .iter()
        .map(|t| {
            (
                rows[t.anchor].embedding.values(),
                rows[t.positive].embedding.values(),
                rows[t.negative].embedding.values(),
            )
        })
        .collect();
    let validation_triplet_accuracy = crate::triplet::triplet_accuracy(&batch, config.training.margin)?;
    let knn_accuracy_in_set = knn_accuracy(&train, &validation, k)?;

    let knn_accuracy_holdout = if config.holdout.is_empty() {
        None
    } else {
        let fit = subset(&store, &splits.holdout_fit);
        let query = subset(&store, &splits.holdout_query);
        Some(knn_accuracy(&fit, &query, k.min(fit.len()))?)
    };

    let holdout_set: HashSet<u32> = config.holdout.iter().copied().collect();
    let known = store.filter(|r| !holdout_set.contains(&r.specimen_id));
    let mut holdout = Vec::new();
    for &h in &config.holdout {
        let rows = store.filter(|r| r.specimen_id == h);
        let decisions = rows
            .rows()
            .par_iter()
            .map(|r| knn_classify(&known, &r.embedding, k))
            .collect::<Result<Vec<_>>>()?;
        let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
        for d in decisions {
            *votes.entry(d).or_default() += 1;
        }
        let (&predicted, &count) = votes
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .ok_or_else(|| Error::Classifier(format!("no images for held-out specimen {h}")))?;
        holdout.push(HoldoutPrediction {
            specimen_id: h,
            predicted,
            votes: count,
            images: rows.len(),
        });
    }
    let c = Classification {
        validation_triplet_accuracy,
        margin: config.training.margin,
        knn_accuracy_in_set,
        knn_accuracy_holdout,
        holdout,
    };
    write_json(&layout.classification(), &c)?;
    Ok(c)
}

pub fn meshes(config: &ExperimentConfig, layout: &Layout) -> Result<MeshCatalog> {
    let population = read_population(&layout.population())?;
    mkdir(&layout.mesh_dir())?;
    population
        .par_iter()
        .map(|s| {
            let mesh = extract_isosurface(&s.volume, config.evaluation.iso)?;
            mesh.save_stl(&layout.mesh(s.id))?;
            Ok((s.id, mesh))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeEstimate {
    pub specimen_id: u32,
    pub predicted: u32,
    /// Predicted mesh, rigidly aligned, against the true mesh.
    pub distance: DistanceReport,
    /// Candidates strictly closer (aligned RMS) to the truth than the
    /// prediction.
    pub better_match_rank: usize,
    pub candidates: usize,
    pub candidate_rms_mm: BTreeMap<u32, f64>,
}

fn load_catalog(layout: &Layout, ids: impl Iterator<Item = u32>) -> Result<MeshCatalog> {
    ids.map(|id| {
        let path = layout.mesh(id);
        if !path.exists() {
            return Err(Error::Catalog(id));
        }
        Ok((id, TriMesh::load_stl(&path)?))
    })
    .collect()
}

pub fn estimate(config: &ExperimentConfig, layout: &Layout) -> Result<Vec<ShapeEstimate>> {
    let classification: Classification = read_json(&layout.classification())?;
    let holdout: HashSet<u32> = config.holdout.iter().copied().collect();
    let candidates = (0..config.population.size as u32).filter(|id| !holdout.contains(id));
    let catalog = load_catalog(layout, candidates)?;
    let rank_config = RankConfig {
        samples: config.evaluation.samples,
        seed: config.evaluation.seed,
        align: true,
        icp: config.evaluation.icp.clone(),
    };
    let mut out = Vec::new();
    for p in &classification.holdout {
        let truth = TriMesh::load_stl(&layout.mesh(p.specimen_id))?;
        let predicted = catalog.get(&p.predicted).ok_or(Error::Catalog(p.predicted))?;
        let aligned = rigid_align(predicted, &truth, &config.evaluation.icp)?.aligned;
        let distance = mesh_distance(&aligned, &truth, config.evaluation.samples, config.evaluation.seed)?;
        let rms = candidate_distances(&truth, &catalog, &rank_config)?;
        out.push(ShapeEstimate {
            specimen_id: p.specimen_id,
            predicted: p.predicted,
            distance,
            better_match_rank: rank_in(&rms, p.predicted)?,
            candidates: catalog.len(),
            candidate_rms_mm: rms,
        });
    }
    write_json(&layout.estimates(), &out)?;
    Ok(out)
}

/// Separation analysis on the held-out specimens' embeddings (all
/// specimens when nothing is held out).
pub fn pairs(config: &ExperimentConfig, layout: &Layout) -> Result<Vec<SeparationReport>> {
    let store = EmbeddingStore::load(&layout.embeddings())?;
    let holdout: HashSet<u32> = config.holdout.iter().copied().collect();
    let store = if holdout.is_empty() {
        store
    } else {
        store.filter(|r| holdout.contains(&r.specimen_id))
    };
    let threshold = config.threshold();
    let reports = config
        .filters()?
        .iter()
        .map(|f| pairwise_separation(&store, threshold, f))
        .collect::<Result<Vec<_>>>()?;
    write_json(&layout.separation(), &reports)?;
    Ok(reports)
}

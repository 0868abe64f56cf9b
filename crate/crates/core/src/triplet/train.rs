//! Adam training of the shared encoder on sampled triplets.

use std::path::PathBuf;

use rayon::prelude::*;

use super::{
    triplet_loss, triplet_loss_gradient, triplet_satisfied, EpochRecord, Triplet,
    TripletLossConfig, TripletSampler, TrainingHistory,
};
use crate::drr::{DatasetManifest, RadiographImage};
use crate::encoder::{save_model, EncoderModel};
use crate::error::{Error, Result};
use crate::seed;

/// Triplets per step are split into this many fixed chunks whose gradients
/// are summed in order, so results do not depend on the thread count.
const CHUNKS: usize = 8;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Labelled images ready for the encoder.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub inputs: Vec<Vec<f32>>,
    pub labels: Vec<u32>,
    pub image_ids: Vec<u64>,
}

impl TrainingSet {
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        let images = manifest.load_images()?;
        let ids = manifest.rows.iter().map(|r| r.image_id).collect();
        Ok(Self::from_images(images, ids))
    }

    pub fn from_images(images: Vec<RadiographImage>, image_ids: Vec<u64>) -> Self {
        let labels = images.iter().map(|i| i.meta.specimen_id).collect();
        Self {
            inputs: images.into_iter().map(|i| i.pixels).collect(),
            labels,
            image_ids,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Embeds every input with `model`, in order.
    pub fn embed(&self, model: &EncoderModel) -> Result<Vec<Vec<f32>>> {
        self.inputs.par_iter().map(|x| model.forward(x)).collect()
    }

    /// Triplet accuracy of `model` on `n` triplets drawn with `seed`.
    pub fn triplet_accuracy(
        &self,
        model: &EncoderModel,
        n: usize,
        margin: f64,
        seed: u64,
    ) -> Result<f64> {
        let sampler = TripletSampler::new(&self.labels)?;
        let emb = self.embed(model)?;
        let batch: Vec<(&[f32], &[f32], &[f32])> = sampler
            .sample_batch(n, &mut seed::rng(seed))
            .iter()
            .map(|t| {
                (
                    emb[t.anchor].as_slice(),
                    emb[t.positive].as_slice(),
                    emb[t.negative].as_slice(),
                )
            })
            .collect();
        super::triplet_accuracy(&batch, margin)
    }
}

/// Image ids touched by one optimizer step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchRecord {
    pub epoch: usize,
    pub step: usize,
    pub image_ids: Vec<u64>,
}

/// Optional side channels of a training run.
#[derive(Debug, Default)]
pub struct TrainHooks {
    /// Where per-epoch checkpoints are written.
    pub checkpoint_dir: Option<PathBuf>,
    /// Collect a [`BatchRecord`] per step into `batch_log`.
    pub record_batches: bool,
    pub batch_log: Vec<BatchRecord>,
}

pub fn train(
    model: EncoderModel,
    set: &TrainingSet,
    config: &TripletLossConfig,
) -> Result<(EncoderModel, TrainingHistory)> {
    train_with(model, set, config, &mut TrainHooks::default())
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    fn step(&mut self, params: &mut [f32], grad: &[f32], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let (b1, b2) = (BETA1 as f32, BETA2 as f32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (ADAM_EPS * c2.sqrt()) as f32;
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            params[i] -= step * self.m[i] / (self.v[i].sqrt() + eps);
        }
    }
}

struct ChunkOut {
    grad: Vec<f32>,
    loss: f64,
    hits: usize,
}

fn chunk_gradient(
    model: &EncoderModel,
    set: &TrainingSet,
    triplets: &[Triplet],
    config: &TripletLossConfig,
) -> Result<ChunkOut> {
    let mut out = ChunkOut {
        grad: vec![0.0; model.params().len()],
        loss: 0.0,
        hits: 0,
    };
    for t in triplets {
        let traces = [
            model.forward_trace(&set.inputs[t.anchor])?,
            model.forward_trace(&set.inputs[t.positive])?,
            model.forward_trace(&set.inputs[t.negative])?,
        ];
        let (a, p, n) = (traces[0].output(), traces[1].output(), traces[2].output());
        out.loss += triplet_loss(a, p, n, config)? as f64;
        out.hits += triplet_satisfied(a, p, n, config.margin) as usize;
        let g = triplet_loss_gradient(a, p, n, config)?;
        if g.anchor.iter().all(|&v| v == 0.0) && g.positive.iter().all(|&v| v == 0.0) {
            continue;
        }
        for (trace, up) in traces.iter().zip([&g.anchor, &g.positive, &g.negative]) {
            model.backward_into(trace, up, &mut out.grad)?;
        }
    }
    Ok(out)
}

/// Trains `model` with Adam on uniformly sampled triplets. One epoch is
/// `⌈images / batch_size⌉` steps.
pub fn train_with(
    mut model: EncoderModel,
    set: &TrainingSet,
    config: &TripletLossConfig,
    hooks: &mut TrainHooks,
) -> Result<(EncoderModel, TrainingHistory)> {
    config.validate()?;
    let mut history = TrainingHistory::default();
    if config.epochs == 0 {
        return Ok((model, history));
    }
    let sampler = TripletSampler::new(&set.labels)?;
    if let Some(x) = set.inputs.first() {
        let want: usize = model.input_shape().iter().product();
        if x.len() != want {
            return Err(Error::Shape(format!(
                "images have {} pixels, model expects {want}",
                x.len()
            )));
        }
    }
    let mut rng = seed::rng(seed::derive_seed(config.seed, 0x5452_4950));
    let mut adam = Adam {
        m: vec![0.0; model.params().len()],
        v: vec![0.0; model.params().len()],
        t: 0,
    };
    let mut last_good = String::from("initial model (not persisted)");
    if let Some(dir) = &hooks.checkpoint_dir {
        let path = dir.join("epoch_000.ostm");
        save_model(&model, &path)?;
        last_good = path.display().to_string();
    }
    let steps = set.len().div_ceil(config.batch_size);
    let chunk_len = config.batch_size.div_ceil(CHUNKS);
    for epoch in 1..=config.epochs {
        let (mut loss_sum, mut hits, mut seen) = (0.0f64, 0usize, 0usize);
        for step in 0..steps {
            let batch = sampler.sample_batch(config.batch_size, &mut rng);
            if hooks.record_batches {
                hooks.batch_log.push(BatchRecord {
                    epoch,
                    step,
                    image_ids: batch
                        .iter()
                        .flat_map(|t| [t.anchor, t.positive, t.negative])
                        .map(|i| set.image_ids[i])
                        .collect(),
                });
            }
            let diverged = || Error::Diverged {
                epoch,
                step,
                last_good: last_good.clone(),
            };
            let chunks: Vec<ChunkOut> = batch
                .par_chunks(chunk_len)
                .map(|c| chunk_gradient(&model, set, c, config))
                .collect::<Result<_>>()
                .map_err(|e| match e {
                    Error::Numeric(_) | Error::Normalization(_) => diverged(),
                    e => e,
                })?;
            let mut grad = vec![0.0f32; model.params().len()];
            let mut step_loss = 0.0;
            for c in &chunks {
                step_loss += c.loss;
                hits += c.hits;
                for (g, &v) in grad.iter_mut().zip(&c.grad) {
                    *g += v;
                }
            }
            if !step_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(diverged());
            }
            let scale = 1.0 / config.batch_size as f32;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam.step(model.params_mut(), &grad, config.learning_rate);
            loss_sum += step_loss;
            seen += batch.len();
        }
        history.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / seen as f64,
            triplet_accuracy: hits as f64 / seen as f64,
        });
        last_good = match &hooks.checkpoint_dir {
            Some(dir) => {
                let path = dir.join(format!("epoch_{epoch:03}.ostm"));
                save_model(&model, &path)?;
                // Only the newest checkpoint is kept.
                let previous = dir.join(format!("epoch_{:03}.ostm", epoch - 1));
                std::fs::remove_file(&previous).map_err(|e| Error::io(&previous, e))?;
                path.display().to_string()
            }
            None => format!("end of epoch {epoch} (not persisted)"),
        };
    }
    Ok((model, history))
}

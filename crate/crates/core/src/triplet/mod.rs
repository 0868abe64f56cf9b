//! Triplet sampling, the triplet loss and its gradient, triplet accuracy and
//! the training loop.

mod train;

pub use train::{train, train_with, BatchRecord, TrainHooks, TrainingSet};

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::drr::DatasetManifest;
use crate::encoder::Real;
use crate::error::{Error, Result};

/// Indices into an image collection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TripletLossConfig {
    pub margin: f64,
    /// Squared Euclidean distances in the loss when set.
    pub squared: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TripletLossConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            squared: true,
            batch_size: 32,
            epochs: 30,
            learning_rate: 1e-4,
            seed: 0,
        }
    }
}

impl TripletLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Param(format!("margin must be > 0, got {}", self.margin)));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Param(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-triplet loss over the epoch.
    pub loss: f64,
    pub triplet_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Config(format!("history csv: {e}"));
        out.write_record(["epoch", "loss", "triplet_accuracy"]).map_err(io)?;
        for r in &self.epochs {
            out.write_record([
                r.epoch.to_string(),
                r.loss.to_string(),
                r.triplet_accuracy.to_string(),
            ])
            .map_err(io)?;
        }
        out.flush().map_err(|e| Error::io("<history>", e))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Uniform triplet sampler over class labels.
#[derive(Debug, Clone)]
pub struct TripletSampler {
    labels: Vec<u32>,
    /// Image indices grouped by class; class `k` owns `order[start[k]..start[k + 1]]`.
    order: Vec<usize>,
    start: Vec<usize>,
    class_of: Vec<usize>,
}

impl TripletSampler {
    pub fn new(labels: &[u32]) -> Result<Self> {
        let mut classes: Vec<u32> = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::Sampling(format!(
                "need at least two classes, found {}",
                classes.len()
            )));
        }
        let mut members = vec![Vec::new(); classes.len()];
        let mut class_of = Vec::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            let k = classes.binary_search(l).unwrap();
            members[k].push(i);
            class_of.push(k);
        }
        if let Some((k, _)) = members.iter().enumerate().find(|(_, m)| m.len() < 2) {
            return Err(Error::Sampling(format!(
                "class {} has fewer than two images",
                classes[k]
            )));
        }
        let mut start = vec![0];
        let mut order = Vec::with_capacity(labels.len());
        for m in members {
            order.extend(m);
            start.push(order.len());
        }
        Ok(Self {
            labels: labels.to_vec(),
            order,
            start,
            class_of,
        })
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Triplet {
        let n = self.order.len();
        let anchor = rng.random_range(0..n);
        let k = self.class_of[anchor];
        let (lo, hi) = (self.start[k], self.start[k + 1]);
        let size = hi - lo;
        // Positive: uniform over the class minus the anchor.
        let mut positive = self.order[lo + rng.random_range(0..size - 1)];
        if positive == anchor {
            positive = self.order[hi - 1];
        }
        // Negative: uniform over the images outside [lo, hi).
        let mut j = rng.random_range(0..n - size);
        if j >= lo {
            j += size;
        }
        Triplet {
            anchor,
            positive,
            negative: self.order[j],
        }
    }

    pub fn sample_batch<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<Triplet> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

/// Samples `n` triplets over the rows of `manifest`; indices refer to rows.
pub fn sample_triplet_batch<R: Rng>(
    manifest: &DatasetManifest,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Triplet>> {
    let labels: Vec<u32> = manifest.rows.iter().map(|r| r.specimen_id).collect();
    Ok(TripletSampler::new(&labels)?.sample_batch(n, rng))
}

fn check_dims<T>(a: &[T], p: &[T], n: &[T]) -> Result<()> {
    if a.len() != p.len() || a.len() != n.len() {
        return Err(Error::Shape(format!(
            "embedding dimensions differ: {}, {}, {}",
            a.len(),
            p.len(),
            n.len()
        )));
    }
    Ok(())
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn distances<T: Real>(a: &[T], p: &[T], n: &[T], squared: bool) -> (T, T) {
    let (ap, an) = (sq_dist(a, p), sq_dist(a, n));
    if squared {
        (ap, an)
    } else {
        (ap.sqrt(), an.sqrt())
    }
}

/// Hinge loss of one triplet: `max(0, d(a,p) − d(a,n) + margin)`.
pub fn triplet_loss<T: Real>(a: &[T], p: &[T], n: &[T], config: &TripletLossConfig) -> Result<T> {
    check_dims(a, p, n)?;
    let (dp, dn) = distances(a, p, n, config.squared);
    let h = dp - dn + T::from_f64(config.margin);
    Ok(if h > T::ZERO { h } else { T::ZERO })
}

/// Summed loss over a batch of `(anchor, positive, negative)` embeddings.
pub fn batch_triplet_loss<T: Real>(
    batch: &[(&[T], &[T], &[T])],
    config: &TripletLossConfig,
) -> Result<T> {
    let mut total = T::ZERO;
    for &(a, p, n) in batch {
        total += triplet_loss(a, p, n, config)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletGradient<T> {
    pub anchor: Vec<T>,
    pub positive: Vec<T>,
    pub negative: Vec<T>,
}

/// Gradient of [`triplet_loss`] with respect to the three embeddings. Zero
/// when the hinge is inactive or exactly at its kink.
pub fn triplet_loss_gradient<T: Real>(
    a: &[T],
    p: &[T],
    n: &[T],
    config: &TripletLossConfig,
) -> Result<TripletGradient<T>> {
    check_dims(a, p, n)?;
    let d = a.len();
    let mut g = TripletGradient {
        anchor: vec![T::ZERO; d],
        positive: vec![T::ZERO; d],
        negative: vec![T::ZERO; d],
    };
    let (dp, dn) = distances(a, p, n, config.squared);
    if !(dp - dn + T::from_f64(config.margin) > T::ZERO) {
        return Ok(g);
    }
    // Coefficients of ∂d/∂(a − x): 2 for squared distances, 1/d otherwise.
    let two = T::ONE + T::ONE;
    let (cp, cn) = if config.squared {
        (two, two)
    } else {
        let inv = |v: T| if v > T::ZERO { T::ONE / v } else { T::ZERO };
        (inv(dp), inv(dn))
    };
    for i in 0..d {
        let up = cp * (a[i] - p[i]);
        let un = cn * (a[i] - n[i]);
        g.anchor[i] = up - un;
        g.positive[i] = -up;
        g.negative[i] = un;
    }
    Ok(g)
}

/// Whether `‖a − p‖² + margin < ‖a − n‖²`.
pub fn triplet_satisfied<T: Real>(a: &[T], p: &[T], n: &[T], margin: f64) -> bool {
    sq_dist(a, p).to_f64() + margin < sq_dist(a, n).to_f64()
}

/// Fraction of triplets satisfying the margin condition.
pub fn triplet_accuracy<T: Real>(batch: &[(&[T], &[T], &[T])], margin: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut hits = 0usize;
    for &(a, p, n) in batch {
        check_dims(a, p, n)?;
        hits += triplet_satisfied(a, p, n, margin) as usize;
    }
    Ok(hits as f64 / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    const E1: [f64; 2] = [1.0, 0.0];
    const E2: [f64; 2] = [0.0, 1.0];
    const E3: [f64; 2] = [0.6, 0.8];

    fn cfg() -> TripletLossConfig {
        TripletLossConfig::default()
    }

    #[test]
    fn hand_computed_losses() {
        assert_eq!(triplet_loss(&E1, &E1, &E2, &cfg()).unwrap(), 0.0);
        assert_eq!(triplet_loss(&E1, &E2, &E1, &cfg()).unwrap(), 2.1);
        assert_eq!(triplet_loss(&E1, &E3, &E2, &cfg()).unwrap(), 0.0);
        assert!(matches!(
            triplet_loss(&E1, &[1.0], &E2, &cfg()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn hand_computed_accuracy() {
        let batch: Vec<(&[f64], &[f64], &[f64])> =
            vec![(&E1, &E1, &E2), (&E1, &E2, &E1), (&E1, &E3, &E2)];
        assert_eq!(triplet_accuracy(&batch, 0.1).unwrap(), 2.0 / 3.0);
        let all_good: Vec<(&[f64], &[f64], &[f64])> = vec![(&E1, &E1, &E2), (&E2, &E2, &E1)];
        assert_eq!(triplet_accuracy(&all_good, 0.1).unwrap(), 1.0);
        let all_bad: Vec<(&[f64], &[f64], &[f64])> = vec![(&E1, &E2, &E1), (&E3, &E1, &E3)];
        assert_eq!(triplet_accuracy(&all_bad, 0.1).unwrap(), 0.0);
        let empty: Vec<(&[f64], &[f64], &[f64])> = vec![];
        assert!(matches!(triplet_accuracy(&empty, 0.1), Err(Error::EmptyBatch)));
    }

    #[test]
    fn inactive_and_cancelling_gradients() {
        let g = triplet_loss_gradient(&E1, &E1, &E2, &cfg()).unwrap();
        assert!(g.anchor.iter().chain(&g.positive).chain(&g.negative).all(|&v| v == 0.0));
        let g = triplet_loss_gradient(&E1, &E2, &E2, &cfg()).unwrap();
        assert_eq!(g.anchor, vec![0.0, 0.0]);
        assert!(g.positive.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let a: [f64; 4] = [0.3, -0.5, 0.8, 0.1];
        let p: [f64; 4] = [-0.2, 0.4, 0.7, -0.6];
        let n: [f64; 4] = [0.35, -0.45, 0.75, 0.2];
        for squared in [true, false] {
            let c = TripletLossConfig {
                squared,
                ..cfg()
            };
            assert!(triplet_loss(&a, &p, &n, &c).unwrap() > 0.0);
            let g = triplet_loss_gradient(&a, &p, &n, &c).unwrap();
            let h = 1e-6;
            for role in 0..3 {
                for i in 0..4 {
                    let mut v = [a, p, n];
                    v[role][i] += h;
                    let up = triplet_loss(&v[0], &v[1], &v[2], &c).unwrap();
                    v[role][i] -= 2.0 * h;
                    let down = triplet_loss(&v[0], &v[1], &v[2], &c).unwrap();
                    let fd = (up - down) / (2.0 * h);
                    let an: f64 = [&g.anchor, &g.positive, &g.negative][role][i];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                    assert!(rel < 1e-6, "squared={squared} role={role} i={i}: {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn sampler_respects_classes() {
        let labels = [0, 0, 1, 1];
        let s = TripletSampler::new(&labels).unwrap();
        let mut rng = seed::rng(1);
        for _ in 0..500 {
            let t = s.sample(&mut rng);
            assert_ne!(t.anchor, t.positive);
            assert_eq!(labels[t.anchor], labels[t.positive]);
            assert_ne!(labels[t.anchor], labels[t.negative]);
        }
        let a = s.sample_batch(20, &mut seed::rng(4));
        let b = s.sample_batch(20, &mut seed::rng(4));
        assert_eq!(a, b);
    }

    #[test]
    fn sampler_preconditions() {
        assert!(matches!(TripletSampler::new(&[3, 3, 3]), Err(Error::Sampling(_))));
        assert!(matches!(TripletSampler::new(&[0, 0, 1]), Err(Error::Sampling(_))));
        assert!(matches!(TripletSampler::new(&[]), Err(Error::Sampling(_))));
    }

    #[test]
    fn anchor_classes_are_uniform() {
        let (classes, per) = (29usize, 900usize);
        let labels: Vec<u32> = (0..classes * per).map(|i| (i / per) as u32).collect();
        let s = TripletSampler::new(&labels).unwrap();
        let mut rng = seed::rng(77);
        let draws = 100_000;
        let mut counts = vec![0f64; classes];
        let mut neg_counts = vec![0f64; classes];
        for _ in 0..draws {
            let t = s.sample(&mut rng);
            counts[labels[t.anchor] as usize] += 1.0;
            neg_counts[labels[t.negative] as usize] += 1.0;
        }
        // Pearson statistic against the uniform multinomial; 28 degrees of
        // freedom, so mean 28 and standard deviation sqrt(56).
        let expected = draws as f64 / classes as f64;
        let dof = (classes - 1) as f64;
        let bound = dof + 3.0 * (2.0 * dof).sqrt();
        for c in [&counts, &neg_counts] {
            let chi2: f64 = c.iter().map(|&o| (o - expected).powi(2) / expected).sum();
            assert!(chi2 < bound, "chi-square {chi2} >= {bound}");
        }
    }

    #[test]
    fn positive_is_uniform_within_class() {
        let labels = [0, 0, 0, 0, 1, 1];
        let s = TripletSampler::new(&labels).unwrap();
        let mut rng = seed::rng(3);
        let mut counts = [0usize; 4];
        let mut n = 0;
        while n < 30_000 {
            let t = s.sample(&mut rng);
            if t.anchor == 0 {
                counts[t.positive] += 1;
                n += 1;
            }
        }
        assert_eq!(counts[0], 0);
        for &c in &counts[1..] {
            assert!((c as f64 - 10_000.0).abs() < 300.0, "{counts:?}");
        }
    }
}

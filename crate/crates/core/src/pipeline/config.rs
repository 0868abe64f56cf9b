//! Experiment configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::drr::{GridConfig, Interval};
use crate::encoder::{NetworkSpec, EMBEDDING_DIMS};
use crate::error::{Error, Result};
use crate::fingerprint::SeparationFilter;
use crate::mesh::IcpConfig;
use crate::phantom::{PhantomParams, VolumeGrid};
use crate::triplet::TripletLossConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationConfig {
    pub size: usize,
    pub seed: u64,
    /// Relative half-width of the per-parameter perturbation.
    pub variation: f64,
    pub base: PhantomParams,
    pub grid: VolumeGrid,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            size: 12,
            seed: 7,
            variation: 0.1,
            base: PhantomParams::default(),
            grid: VolumeGrid::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub init_seed: u64,
    /// Explicit architecture; the desk network sized to the images otherwise.
    pub spec: Option<NetworkSpec>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            init_seed: 1,
            spec: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Share of each training specimen's images kept for validation.
    pub validation_fraction: f64,
    /// Share of each held-out specimen's images used to fit the held-out
    /// classifier; the rest are its queries.
    pub holdout_fit_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            validation_fraction: 0.2,
            holdout_fit_fraction: 0.5,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeparationConfig {
    /// Preset names; see [`SeparationFilter::presets`].
    pub presets: Vec<String>,
    /// Defaults to the training margin.
    pub threshold: Option<f64>,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        Self {
            presets: SeparationFilter::presets((0.0, 0.0))
                .into_iter()
                .map(|f| f.name)
                .collect(),
            threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Iso level for surface extraction, in volume density units.
    pub iso: f64,
    /// Points sampled per mesh for each distance.
    pub samples: usize,
    pub seed: u64,
    pub icp: IcpConfig,
    /// Sampled triplets for the validation triplet accuracy.
    pub validation_triplets: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            iso: 0.07,
            samples: 100_000,
            seed: 5,
            icp: IcpConfig::default(),
            validation_triplets: 2000,
        }
    }
}

/// Everything one experiment needs. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub population: PopulationConfig,
    pub render: GridConfig,
    pub encoder: EncoderConfig,
    pub training: TripletLossConfig,
    pub split: SplitConfig,
    pub holdout: Vec<u32>,
    pub knn_k: usize,
    pub separation: SeparationConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Twelve phantoms, three held out, 5 × 5 poses × 4 energies.
    pub fn desk() -> Self {
        Self {
            population: PopulationConfig::default(),
            render: GridConfig {
                rx: Interval::new(70.0, 112.0, 10.5),
                ry: Interval::new(-21.0, 21.0, 10.5),
                ..GridConfig::default()
            },
            encoder: EncoderConfig::default(),
            training: TripletLossConfig {
                epochs: 30,
                learning_rate: 1e-3,
                batch_size: 8,
                ..TripletLossConfig::default()
            },
            split: SplitConfig::default(),
            holdout: vec![9, 10, 11],
            knn_k: 1,
            separation: SeparationConfig::default(),
            evaluation: EvaluationConfig {
                samples: 20_000,
                ..EvaluationConfig::default()
            },
        }
    }

    /// The full-size layout: 29 phantoms, five held out, 900 poses, 400 × 800
    /// views, 128-dimensional embeddings.
    pub fn paper() -> Self {
        Self {
            population: PopulationConfig {
                size: 29,
                ..PopulationConfig::default()
            },
            render: GridConfig {
                view_width: 400,
                view_height: 800,
                pixel_mm: 0.12,
                ..GridConfig::default()
            },
            encoder: EncoderConfig {
                dim: 128,
                ..EncoderConfig::default()
            },
            training: TripletLossConfig::default(),
            holdout: vec![24, 25, 26, 27, 28],
            ..Self::desk()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Encoder input: one channel, the two views side by side.
    pub fn network_spec(&self) -> NetworkSpec {
        self.encoder.spec.clone().unwrap_or_else(|| {
            NetworkSpec::desk(
                self.render.view_height,
                2 * self.render.view_width,
                self.encoder.dim,
            )
        })
    }

    pub fn threshold(&self) -> f64 {
        self.separation.threshold.unwrap_or(self.training.margin)
    }

    pub fn filters(&self) -> Result<Vec<SeparationFilter>> {
        let nominal = self.render.nominal_pose();
        self.separation
            .presets
            .iter()
            .map(|name| {
                SeparationFilter::preset(name, nominal)
                    .ok_or_else(|| Error::Config(format!("unknown separation preset {name:?}")))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.population.size == 0 {
            return Err(Error::EmptyPopulation);
        }
        if !(0.0..=0.5).contains(&self.population.variation) {
            return Err(Error::Config("variation must lie in [0, 0.5]".into()));
        }
        if !EMBEDDING_DIMS.contains(&self.encoder.dim) {
            return Err(Error::Config(format!(
                "embedding dimension {} not in {EMBEDDING_DIMS:?}",
                self.encoder.dim
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &h in &self.holdout {
            if h as usize >= self.population.size {
                return Err(Error::Config(format!(
                    "holdout specimen {h} is not in the population of {}",
                    self.population.size
                )));
            }
            if !seen.insert(h) {
                return Err(Error::Config(format!("holdout specimen {h} listed twice")));
            }
        }
        if self.population.size - self.holdout.len() < 2 {
            return Err(Error::Config("at least two training specimens are required".into()));
        }
        if self.knn_k == 0 {
            return Err(Error::Config("knn_k must be at least 1".into()));
        }
        for f in [self.split.validation_fraction, self.split.holdout_fit_fraction] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config("split fractions must lie in (0, 1)".into()));
            }
        }
        self.render.validate()?;
        self.training.validate()?;
        let spec = self.network_spec();
        let d = spec.validate_encoder()?;
        if d != self.encoder.dim {
            return Err(Error::Config(format!(
                "network emits {d} dimensions, config asks for {}",
                self.encoder.dim
            )));
        }
        if spec.input != [1, self.render.view_height, 2 * self.render.view_width] {
            return Err(Error::Config(format!(
                "network input {:?} does not match {}x{} combined images",
                spec.input,
                2 * self.render.view_width,
                self.render.view_height
            )));
        }
        self.filters()?;
        Ok(())
    }
}

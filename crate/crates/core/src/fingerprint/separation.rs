//! Pairwise verification at a distance threshold.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EmbeddingStore, StoreRow};
use crate::error::{Error, Result};

/// Pose/energy window around a nominal pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparationFilter {
    pub name: String,
    pub rx_center: f64,
    pub ry_center: f64,
    /// Largest allowed |rx − rx_center|, degrees.
    pub rx_limit: f64,
    /// Largest allowed |ry − ry_center|, degrees.
    pub ry_limit: f64,
    /// Inclusive keV range.
    pub energy: [f64; 2],
}

const EDGE: f64 = 1e-9;

impl SeparationFilter {
    pub fn new(name: &str, nominal: (f64, f64), rx_limit: f64, ry_limit: f64, energy: [f64; 2]) -> Self {
        Self {
            name: name.into(),
            rx_center: nominal.0,
            ry_center: nominal.1,
            rx_limit,
            ry_limit,
            energy,
        }
    }

    /// The six named windows: ±4° with 146–158 keV, ±4°, ±7°, 22° about
    /// the long axis with 4° in-plane, the converse, and the full range.
    pub fn presets(nominal: (f64, f64)) -> Vec<Self> {
        let all = [140.0, 158.0];
        vec![
            Self::new("narrow", nominal, 4.0, 4.0, [146.0, 158.0]),
            Self::new("four_deg", nominal, 4.0, 4.0, all),
            Self::new("seven_deg", nominal, 7.0, 7.0, all),
            Self::new("long22_perp4", nominal, 22.0, 4.0, all),
            Self::new("long4_perp22", nominal, 4.0, 22.0, all),
            Self::new("full", nominal, 22.0, 22.0, all),
        ]
    }

    pub fn preset(name: &str, nominal: (f64, f64)) -> Option<Self> {
        Self::presets(nominal).into_iter().find(|f| f.name == name)
    }

    pub fn accepts(&self, row: &StoreRow) -> bool {
        (row.rx - self.rx_center).abs() <= self.rx_limit + EDGE
            && (row.ry - self.ry_center).abs() <= self.ry_limit + EDGE
            && row.energy >= self.energy[0] - EDGE
            && row.energy <= self.energy[1] + EDGE
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub filter: SeparationFilter,
    pub threshold: f64,
    pub rows: usize,
    pub intra_pairs: u64,
    pub inter_pairs: u64,
    pub intra_correct: u64,
    pub inter_correct: u64,
    pub accuracy: f64,
}

const MAX_DISTANCE: f64 = 2.0 + 1e-6;

/// Scores every unordered pair of filtered rows: same-specimen pairs must be
/// closer than `threshold`, different-specimen pairs at least that far.
pub fn pairwise_separation(
    store: &EmbeddingStore,
    threshold: f64,
    filter: &SeparationFilter,
) -> Result<SeparationReport> {
    let rows: Vec<&StoreRow> = store.rows().iter().filter(|r| filter.accepts(r)).collect();
    if rows.len() < 2 {
        return Err(Error::EmptyFilter);
    }
    // Per anchor row: (intra, inter, intra_correct, inter_correct).
    let counts = (0..rows.len())
        .into_par_iter()
        .map(|i| {
            let mut c = [0u64; 4];
            for j in i + 1..rows.len() {
                let d = rows[i].embedding.distance(&rows[j].embedding);
                if !(0.0..=MAX_DISTANCE).contains(&d) {
                    return Err(Error::Numeric(format!(
                        "pair distance {d} outside [0, 2] for images {} and {}",
                        rows[i].image_id, rows[j].image_id
                    )));
                }
                if rows[i].specimen_id == rows[j].specimen_id {
                    c[0] += 1;
                    c[2] += (d < threshold) as u64;
                } else {
                    c[1] += 1;
                    c[3] += (d >= threshold) as u64;
                }
            }
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let total = counts.iter().fold([0u64; 4], |mut acc, c| {
        for k in 0..4 {
            acc[k] += c[k];
        }
        acc
    });
    let pairs = total[0] + total[1];
    Ok(SeparationReport {
        filter: filter.clone(),
        threshold,
        rows: rows.len(),
        intra_pairs: total[0],
        inter_pairs: total[1],
        intra_correct: total[2],
        inter_correct: total[3],
        accuracy: (total[2] + total[3]) as f64 / pairs as f64,
    })
}

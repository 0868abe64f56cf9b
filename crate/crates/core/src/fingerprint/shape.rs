//! Nearest-shape retrieval and better-match ranks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{knn_classify, EmbeddingStore};
use crate::drr::RadiographImage;
use crate::encoder::{forward, EncoderModel};
use crate::error::{Error, Result};
use crate::mesh::{mesh_distance, rigid_align, IcpConfig, TriMesh};

/// Ground-truth surface per specimen id.
pub type MeshCatalog = BTreeMap<u32, TriMesh>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankConfig {
    /// Points sampled per mesh for each distance.
    pub samples: usize,
    pub seed: u64,
    /// Rigidly align each candidate onto the truth before measuring.
    pub align: bool,
    pub icp: IcpConfig,
}

impl Default for RankConfig {
    fn default() -> Self {
        Self {
            samples: 100_000,
            seed: 0,
            align: true,
            icp: IcpConfig::default(),
        }
    }
}

/// Classifies `image` against `store` and returns the winner's mesh.
pub fn estimate_shape(
    image: &RadiographImage,
    model: &EncoderModel,
    store: &EmbeddingStore,
    catalog: &MeshCatalog,
    k: usize,
) -> Result<(u32, TriMesh)> {
    let embedding = forward(model, image)?;
    let id = knn_classify(store, &embedding, k)?;
    let mesh = catalog.get(&id).ok_or(Error::Catalog(id))?;
    Ok((id, mesh.clone()))
}

/// RMS distance (mm) from every catalog mesh to `truth`.
pub fn candidate_distances(
    truth: &TriMesh,
    catalog: &MeshCatalog,
    config: &RankConfig,
) -> Result<BTreeMap<u32, f64>> {
    catalog
        .iter()
        .map(|(&id, mesh)| {
            let report = if config.align {
                let aligned = rigid_align(mesh, truth, &config.icp)?.aligned;
                mesh_distance(&aligned, truth, config.samples, config.seed)?
            } else {
                mesh_distance(mesh, truth, config.samples, config.seed)?
            };
            Ok((id, report.rms_mm))
        })
        .collect()
}

/// Number of catalog shapes strictly closer to `truth` than `predicted`.
pub fn better_match_rank(
    truth: &TriMesh,
    predicted: u32,
    catalog: &MeshCatalog,
    config: &RankConfig,
) -> Result<usize> {
    if !catalog.contains_key(&predicted) {
        return Err(Error::Catalog(predicted));
    }
    let d = candidate_distances(truth, catalog, config)?;
    Ok(rank_in(&d, predicted)?)
}

/// Rank of `predicted` among precomputed candidate distances.
pub fn rank_in(distances: &BTreeMap<u32, f64>, predicted: u32) -> Result<usize> {
    let own = *distances.get(&predicted).ok_or(Error::Catalog(predicted))?;
    Ok(distances.values().filter(|&&d| d < own).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Point;

    #[test]
    fn ranks_on_nested_spheres() {
        let truth = TriMesh::icosphere(Point::zeros(), 10.0, 3);
        let catalog: MeshCatalog = [(0, 10.5), (1, 9.0), (2, 12.0), (3, 10.2), (4, 7.0)]
            .into_iter()
            .map(|(id, r)| (id, TriMesh::icosphere(Point::zeros(), r, 3)))
            .collect();
        let config = RankConfig {
            samples: 4000,
            align: false,
            ..RankConfig::default()
        };
        // Closeness order by |r - 10|: 3, 0, 1, 2, 4.
        for (id, expected) in [(3, 0), (0, 1), (1, 2), (2, 3), (4, 4)] {
            assert_eq!(better_match_rank(&truth, id, &catalog, &config).unwrap(), expected);
        }
        assert!(matches!(
            better_match_rank(&truth, 99, &catalog, &config),
            Err(Error::Catalog(99))
        ));
    }
}

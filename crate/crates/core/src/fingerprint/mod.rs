//! Embedding store, kNN classification, pairwise threshold verification,
//! shape estimation and better-match ranks.

mod separation;
mod shape;

pub use separation::{pairwise_separation, SeparationFilter, SeparationReport};
pub use shape::{
    better_match_rank, candidate_distances, estimate_shape, rank_in, MeshCatalog, RankConfig,
};

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::drr::DatasetManifest;
use crate::encoder::{forward, EncoderModel, Embedding};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct StoreRow {
    pub specimen_id: u32,
    pub image_id: u64,
    pub rx: f64,
    pub ry: f64,
    pub energy: f64,
    pub embedding: Embedding,
}

/// Embeddings with their image provenance. Immutable once built.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    rows: Vec<StoreRow>,
}

impl EmbeddingStore {
    pub fn new(rows: Vec<StoreRow>) -> Result<Self> {
        if let Some(first) = rows.first() {
            let d = first.embedding.dim();
            if let Some(r) = rows.iter().find(|r| r.embedding.dim() != d) {
                return Err(Error::Shape(format!(
                    "image {} has dimension {}, store has {d}",
                    r.image_id,
                    r.embedding.dim()
                )));
            }
        }
        let mut seen = HashSet::with_capacity(rows.len());
        for r in &rows {
            if !seen.insert((r.specimen_id, r.image_id)) {
                return Err(Error::Param(format!(
                    "duplicate row for specimen {} image {}",
                    r.specimen_id, r.image_id
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[StoreRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.rows.first().map(|r| r.embedding.dim())
    }

    pub fn filter(&self, keep: impl Fn(&StoreRow) -> bool) -> Self {
        Self {
            rows: self.rows.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    pub fn specimen_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.rows.iter().map(|r| r.specimen_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let err = |e: csv::Error| Error::Config(format!("embedding csv: {e}"));
        let mut out = csv::Writer::from_writer(w);
        let d = self.dim().unwrap_or(0);
        let mut header: Vec<String> = ["specimen", "image", "rx", "ry", "energy"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..d).map(|i| format!("e{i}")));
        out.write_record(&header).map_err(err)?;
        for r in &self.rows {
            let mut rec = vec![
                r.specimen_id.to_string(),
                r.image_id.to_string(),
                r.rx.to_string(),
                r.ry.to_string(),
                r.energy.to_string(),
            ];
            // `Display` prints the shortest string that round-trips.
            rec.extend(r.embedding.values().iter().map(|v| v.to_string()));
            out.write_record(&rec).map_err(err)?;
        }
        out.flush().map_err(|e| Error::io("<embeddings>", e))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let fmt = |line: u64, reason: String| Error::format("embedding store", line, reason);
        let header = rdr.headers().map_err(|e| fmt(0, e.to_string()))?.clone();
        let fixed = ["specimen", "image", "rx", "ry", "energy"];
        if header.len() < fixed.len() || header.iter().zip(fixed).any(|(a, b)| a != b) {
            return Err(fmt(0, format!("unexpected header {header:?}")));
        }
        let d = header.len() - fixed.len();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| fmt(0, e.to_string()))?;
            let at = rec.position().map_or(0, |p| p.byte());
            let field = |i: usize| rec.get(i).unwrap_or("");
            let bad = |i: usize| fmt(at, format!("bad value {:?} in column {}", field(i), i));
            let values = (0..d)
                .map(|i| field(5 + i).parse::<f32>().map_err(|_| bad(5 + i)))
                .collect::<Result<Vec<_>>>()?;
            rows.push(StoreRow {
                specimen_id: field(0).parse().map_err(|_| bad(0))?,
                image_id: field(1).parse().map_err(|_| bad(1))?,
                rx: field(2).parse().map_err(|_| bad(2))?,
                ry: field(3).parse().map_err(|_| bad(3))?,
                energy: field(4).parse().map_err(|_| bad(4))?,
                embedding: Embedding::new(values).map_err(|e| fmt(at, e.to_string()))?,
            });
        }
        Self::new(rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

/// Embeds every manifest image, in manifest order.
pub fn embed_images(model: &EncoderModel, manifest: &DatasetManifest) -> Result<EmbeddingStore> {
    let rows = manifest
        .rows
        .par_iter()
        .map(|row| {
            let image = manifest.load_image(row)?;
            Ok(StoreRow {
                specimen_id: row.specimen_id,
                image_id: row.image_id,
                rx: row.rx,
                ry: row.ry,
                energy: row.energy,
                embedding: forward(model, &image)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EmbeddingStore::new(rows)
}

/// Majority vote among the `k` nearest rows. Distance ties go to the lower
/// image id; vote ties to the smaller mean distance, then the lower
/// specimen id.
pub fn knn_classify(store: &EmbeddingStore, query: &Embedding, k: usize) -> Result<u32> {
    if store.is_empty() {
        return Err(Error::Classifier("store is empty".into()));
    }
    if k == 0 || k > store.len() {
        return Err(Error::Classifier(format!(
            "k = {k} must lie in 1..={}",
            store.len()
        )));
    }
    if store.dim() != Some(query.dim()) {
        return Err(Error::Shape(format!(
            "query has dimension {}, store has {:?}",
            query.dim(),
            store.dim()
        )));
    }
    let mut near: Vec<(f64, u64, u32)> = store
        .rows
        .iter()
        .map(|r| (r.embedding.distance(query), r.image_id, r.specimen_id))
        .collect();
    let by_key = |a: &(f64, u64, u32), b: &(f64, u64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < near.len() {
        near.select_nth_unstable_by(k - 1, by_key);
        near.truncate(k);
    }
    near.sort_by(by_key);
    let mut votes: BTreeMap<u32, (usize, f64)> = BTreeMap::new();
    for &(d, _, s) in &near {
        let v = votes.entry(s).or_default();
        v.0 += 1;
        v.1 += d;
    }
    let (&winner, _) = votes
        .iter()
        .min_by(|(sa, a), (sb, b)| {
            b.0.cmp(&a.0)
                .then((a.1 / a.0 as f64).total_cmp(&(b.1 / b.0 as f64)))
                .then(sa.cmp(sb))
        })
        .expect("k >= 1");
    Ok(winner)
}

/// Fraction of `queries` rows classified as their own specimen.
pub fn knn_accuracy(store: &EmbeddingStore, queries: &EmbeddingStore, k: usize) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Classifier("no queries".into()));
    }
    let hits = queries
        .rows
        .par_iter()
        .map(|q| Ok((knn_classify(store, &q.embedding, k)? == q.specimen_id) as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / queries.len() as f64)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn row(specimen_id: u32, image_id: u64, v: &[f32]) -> StoreRow {
        StoreRow {
            specimen_id,
            image_id,
            rx: 91.0,
            ry: 0.0,
            energy: 146.0,
            embedding: Embedding::normalized(v).unwrap(),
        }
    }

    #[test]
    fn single_row_store_wins_always() {
        let s = EmbeddingStore::new(vec![row(7, 0, &[1.0, 0.0])]).unwrap();
        let q = Embedding::normalized(&[-1.0, 0.2]).unwrap();
        assert_eq!(knn_classify(&s, &q, 1).unwrap(), 7);
        assert!(knn_classify(&s, &q, 2).is_err());
        assert!(matches!(
            knn_classify(&EmbeddingStore::default(), &q, 1),
            Err(Error::Classifier(_))
        ));
    }

    #[test]
    fn exact_match_and_toy_oracle() {
        let rows = vec![
            row(1, 0, &[1.0, 0.0, 0.0]),
            row(1, 1, &[0.9, 0.1, 0.0]),
            row(2, 2, &[0.0, 1.0, 0.0]),
            row(2, 3, &[0.1, 0.9, 0.1]),
            row(3, 4, &[0.0, 0.0, 1.0]),
            row(3, 5, &[0.5, 0.0, 0.9]),
        ];
        let s = EmbeddingStore::new(rows.clone()).unwrap();
        for r in &rows {
            assert_eq!(knn_classify(&s, &r.embedding, 1).unwrap(), r.specimen_id);
        }
        // Brute force: sort all rows by distance, vote among the first three.
        let queries = [[0.7f32, 0.3, 0.5], [0.2, 0.5, 0.8], [0.6, 0.6, 0.1], [0.3, 0.1, 0.9]];
        for q in queries {
            let q = Embedding::normalized(&q).unwrap();
            let mut all: Vec<(f64, &StoreRow)> =
                rows.iter().map(|r| (r.embedding.distance(&q), r)).collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut count: BTreeMap<u32, (usize, f64)> = BTreeMap::new();
            for (d, r) in &all[..3] {
                let c = count.entry(r.specimen_id).or_default();
                c.0 += 1;
                c.1 += d;
            }
            let best = count
                .iter()
                .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then((b.1 .1 / b.1 .0 as f64).total_cmp(&(a.1 .1 / a.1 .0 as f64))))
                .map(|(s, _)| *s)
                .unwrap();
            assert_eq!(knn_classify(&s, &q, 3).unwrap(), best);
        }
    }

    #[test]
    fn vote_ties_use_mean_distance_then_id() {
        // Two votes each for specimens 5 and 4; specimen 5 is closer on average.
        let s = EmbeddingStore::new(vec![
            row(4, 0, &[0.0, 1.0]),
            row(4, 1, &[0.1, 1.0]),
            row(5, 2, &[1.0, 0.0]),
            row(5, 3, &[1.0, 0.1]),
        ])
        .unwrap();
        let q = Embedding::normalized(&[1.0, 0.5]).unwrap();
        assert_eq!(knn_classify(&s, &q, 4).unwrap(), 5);
        // Symmetric query: equal means, lower id wins.
        let s = EmbeddingStore::new(vec![row(9, 0, &[1.0, 0.0]), row(3, 1, &[0.0, 1.0])]).unwrap();
        let q = Embedding::normalized(&[1.0, 1.0]).unwrap();
        assert_eq!(knn_classify(&s, &q, 2).unwrap(), 3);
    }

    #[test]
    fn distance_ties_prefer_lower_image_id() {
        let s = EmbeddingStore::new(vec![row(2, 10, &[0.0, 1.0]), row(1, 11, &[1.0, 0.0])]).unwrap();
        let q = Embedding::normalized(&[1.0, 1.0]).unwrap();
        assert_eq!(knn_classify(&s, &q, 1).unwrap(), 2);
    }

    #[test]
    fn store_invariants_and_csv_round_trip() {
        let rows = vec![row(1, 0, &[0.3, 0.4, 0.1]), row(2, 1, &[-0.7, 0.2, 0.9])];
        let s = EmbeddingStore::new(rows.clone()).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("specimen,image,rx,ry,energy,e0,e1,e2\n"));
        let back = EmbeddingStore::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, s);
        let mut dup = rows.clone();
        dup.push(rows[0].clone());
        assert!(EmbeddingStore::new(dup).is_err());
        let mut mixed = rows;
        mixed.push(row(3, 2, &[1.0, 0.0]));
        assert!(matches!(EmbeddingStore::new(mixed), Err(Error::Shape(_))));
    }
}

use std::collections::BTreeMap;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{mean_std, EvalError};
use crate::retrieval::{rank_individuals, EmbeddingDatabase, EmbeddingRecord, RecordMeta};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocolConfig {
    /// Images of each test individual placed in the gallery (m).
    pub gallery_matches_per_individual: usize,
    /// Independent re-draws of the gallery images.
    pub repetitions: usize,
    pub k: Vec<usize>,
    pub seed: u64,
}

impl Default for EvalProtocolConfig {
    fn default() -> Self {
        Self {
            gallery_matches_per_individual: 2,
            repetitions: 5,
            k: vec![1, 5, 10],
            seed: 0,
        }
    }
}

impl EvalProtocolConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.gallery_matches_per_individual == 0 {
            return Err(EvalError::Protocol("protocol.gallery_matches_per_individual: must be >= 1".into()));
        }
        if self.repetitions == 0 {
            return Err(EvalError::Protocol("protocol.repetitions: must be >= 1".into()));
        }
        if self.k.is_empty() || self.k.contains(&0) {
            return Err(EvalError::Protocol(format!("protocol.k: {:?} must be non-empty and >= 1", self.k)));
        }
        Ok(())
    }

    fn ks(&self) -> Vec<usize> {
        let mut k = self.k.clone();
        k.sort_unstable();
        k.dedup();
        k
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbedding {
    pub individual_id: String,
    pub image_id: String,
    pub vector: Vec<f32>,
}

/// Which test images went to the gallery and which are queries in one
/// repetition; indices into the test slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolSplit {
    pub gallery: Vec<usize>,
    pub queries: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKReport {
    pub k: Vec<usize>,
    pub mean: Vec<f64>,
    /// Sample standard deviation across repetitions (0 for one repetition).
    pub std: Vec<f64>,
    /// `per_repetition[r][i]` is the accuracy at `k[i]` in repetition `r`.
    pub per_repetition: Vec<Vec<f64>>,
    pub queries_per_repetition: usize,
    pub gallery_size: usize,
    pub protocol: EvalProtocolConfig,
}

impl TopKReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.k.iter().position(|&x| x == k).map(|i| self.mean[i])
    }
}

/// Test indices grouped by individual, individuals in first-seen order.
fn group(test: &[LabeledEmbedding]) -> Vec<(String, Vec<usize>)> {
    let mut order: Vec<String> = Vec::new();
    let mut by: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in test.iter().enumerate() {
        let e = by.entry(&t.individual_id).or_default();
        if e.is_empty() {
            order.push(t.individual_id.clone());
        }
        e.push(i);
    }
    order
        .into_iter()
        .map(|id| {
            let v = by[id.as_str()].clone();
            (id, v)
        })
        .collect()
}

fn check_counts(groups: &[(String, Vec<usize>)], m: usize) -> Result<(), EvalError> {
    for (id, idx) in groups {
        if idx.len() < m + 1 {
            return Err(EvalError::TooFewImages {
                individual: id.clone(),
                have: idx.len(),
                need: m + 1,
            });
        }
    }
    Ok(())
}

/// The gallery/query split of every repetition. Repetition `r` draws from
/// its own seeded stream.
pub fn protocol_splits(test: &[LabeledEmbedding], protocol: &EvalProtocolConfig) -> Result<Vec<ProtocolSplit>, EvalError> {
    protocol.validate()?;
    let m = protocol.gallery_matches_per_individual;
    let groups = group(test);
    check_counts(&groups, m)?;
    Ok((0..protocol.repetitions)
        .map(|r| {
            let mut rng = stream(protocol.seed, Stream::Protocol, r as u64);
            let mut gallery = Vec::new();
            let mut queries = Vec::new();
            for (_, idx) in &groups {
                let mut chosen = sample(&mut rng, idx.len(), m).into_vec();
                chosen.sort_unstable();
                for (j, &i) in idx.iter().enumerate() {
                    if chosen.binary_search(&j).is_ok() {
                        gallery.push(i);
                    } else {
                        queries.push(i);
                    }
                }
            }
            ProtocolSplit { gallery, queries }
        })
        .collect())
}

fn to_record(e: &LabeledEmbedding) -> EmbeddingRecord {
    EmbeddingRecord {
        meta: RecordMeta {
            individual_id: e.individual_id.clone(),
            image_id: e.image_id.clone(),
            added_at: 0,
        },
        vector: e.vector.clone(),
    }
}

/// Rank (1-based) of each query's true individual among gallery individuals
/// ordered by their closest record, or None if absent.
pub fn query_ranks(
    train: &[LabeledEmbedding],
    test: &[LabeledEmbedding],
    split: &ProtocolSplit,
) -> Result<Vec<Option<usize>>, EvalError> {
    let dim = train.first().or(test.first()).map(|e| e.vector.len()).unwrap_or(0);
    let mut db = EmbeddingDatabase::new(dim, 0);
    for e in train.iter().chain(split.gallery.iter().map(|&i| &test[i])) {
        db.add_record(to_record(e))?;
    }
    let n_ind = db.individuals().len();
    split
        .queries
        .iter()
        .map(|&q| {
            let ranked = rank_individuals(&db, &test[q].vector, n_ind)?;
            Ok(ranked
                .iter()
                .position(|c| c.individual_id == test[q].individual_id)
                .map(|p| p + 1))
        })
        .collect()
}

/// Top-k identification accuracy under the gallery/query protocol.
pub fn topk_from_embeddings(
    train: &[LabeledEmbedding],
    test: &[LabeledEmbedding],
    protocol: &EvalProtocolConfig,
) -> Result<TopKReport, EvalError> {
    let splits = protocol_splits(test, protocol)?;
    let ks = protocol.ks();
    let mut per_rep = Vec::with_capacity(splits.len());
    let mut queries = 0;
    let mut gallery_size = 0;
    for split in &splits {
        if split.queries.is_empty() {
            return Err(EvalError::Protocol("no query images left after the gallery draw".into()));
        }
        let ranks = query_ranks(train, test, split)?;
        queries = ranks.len();
        gallery_size = train.len() + split.gallery.len();
        per_rep.push(
            ks.iter()
                .map(|&k| ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count() as f64 / ranks.len() as f64)
                .collect::<Vec<f64>>(),
        );
    }
    let (mean, std): (Vec<f64>, Vec<f64>) = (0..ks.len())
        .map(|i| mean_std(&per_rep.iter().map(|r| r[i]).collect::<Vec<_>>()))
        .unzip();
    Ok(TopKReport {
        k: ks,
        mean,
        std,
        per_repetition: per_rep,
        queries_per_repetition: queries,
        gallery_size,
        protocol: protocol.clone(),
    })
}

/// One report per gallery size m, all under the base protocol's seed.
pub fn vary_gallery_size(
    train: &[LabeledEmbedding],
    test: &[LabeledEmbedding],
    ms: &[usize],
    base: &EvalProtocolConfig,
) -> Result<Vec<(usize, TopKReport)>, EvalError> {
    let max_m = ms.iter().copied().max().ok_or_else(|| EvalError::Protocol("empty m list".into()))?;
    check_counts(&group(test), max_m)?;
    ms.iter()
        .map(|&m| {
            let p = EvalProtocolConfig {
                gallery_matches_per_individual: m,
                ..base.clone()
            };
            Ok((m, topk_from_embeddings(train, test, &p)?))
        })
        .collect()
}

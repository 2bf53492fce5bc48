use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::MiningError;
use crate::rng::Rng;
use crate::synth::IndividualEntry;

/// P individuals × K images per batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSpec {
    pub p: usize,
    pub k: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self { p: 15, k: 5 }
    }
}

impl BatchSpec {
    pub fn size(&self) -> usize {
        self.p * self.k
    }

    pub fn validate(&self) -> Result<(), MiningError> {
        if self.p < 2 {
            return Err(MiningError::BatchSpec(format!("batch.p: {} must be >= 2", self.p)));
        }
        if self.k < 2 {
            return Err(MiningError::BatchSpec(format!("batch.k: {} must be >= 2", self.k)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchItem {
    /// Dense class index within the batch, 0..P.
    pub class: usize,
    pub individual_id: String,
    pub image_id: String,
}

/// Draws P distinct individuals from `pool`, then K images of each: without
/// replacement when the individual has at least K, otherwise with. Items
/// come out grouped by class.
pub fn sample_pk_batch(pool: &[&IndividualEntry], spec: BatchSpec, rng: &mut Rng) -> Result<Vec<BatchItem>, MiningError> {
    spec.validate()?;
    if pool.len() < spec.p {
        return Err(MiningError::TooFewIndividuals {
            available: pool.len(),
            needed: spec.p,
        });
    }
    let mut out = Vec::with_capacity(spec.size());
    for (class, idx) in sample(rng, pool.len(), spec.p).into_iter().enumerate() {
        let entry = pool[idx];
        let n = entry.image_ids.len();
        let picks: Vec<usize> = if n >= spec.k {
            sample(rng, n, spec.k).into_vec()
        } else {
            (0..spec.k).map(|_| rng.random_range(0..n)).collect()
        };
        out.extend(picks.into_iter().map(|i| BatchItem {
            class,
            individual_id: entry.individual_id.clone(),
            image_id: entry.image_ids[i].clone(),
        }));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use std::collections::HashSet;

    fn entries(n: usize, views: usize) -> Vec<IndividualEntry> {
        (0..n)
            .map(|i| IndividualEntry {
                individual_id: format!("i{i}"),
                image_count: views,
                image_ids: (0..views).map(|v| format!("i{i}_{v}")).collect(),
            })
            .collect()
    }

    #[test]
    fn pk_shape_and_distinctness() {
        let e = entries(20, 8);
        let pool: Vec<&IndividualEntry> = e.iter().collect();
        let mut r = stream(3, Stream::Batch, 0);
        let b = sample_pk_batch(&pool, BatchSpec::default(), &mut r).unwrap();
        assert_eq!(b.len(), 75);
        let inds: HashSet<_> = b.iter().map(|x| &x.individual_id).collect();
        assert_eq!(inds.len(), 15);
        for c in 0..15 {
            let group: Vec<_> = b.iter().filter(|x| x.class == c).collect();
            assert_eq!(group.len(), 5);
            let imgs: HashSet<_> = group.iter().map(|x| &x.image_id).collect();
            assert_eq!(imgs.len(), 5, "no repeats when the individual has >= K images");
            assert!(group.iter().all(|x| x.individual_id == group[0].individual_id));
        }
    }

    #[test]
    fn short_individuals_sample_with_replacement() {
        let e = entries(3, 3);
        let pool: Vec<&IndividualEntry> = e.iter().collect();
        let mut r = stream(0, Stream::Batch, 0);
        let b = sample_pk_batch(&pool, BatchSpec { p: 3, k: 5 }, &mut r).unwrap();
        assert_eq!(b.len(), 15);
    }

    #[test]
    fn too_few_individuals() {
        let e = entries(4, 5);
        let pool: Vec<&IndividualEntry> = e.iter().collect();
        let mut r = stream(0, Stream::Batch, 0);
        assert_eq!(
            sample_pk_batch(&pool, BatchSpec::default(), &mut r),
            Err(MiningError::TooFewIndividuals {
                available: 4,
                needed: 15
            })
        );
    }

    #[test]
    fn same_stream_same_batch() {
        let e = entries(30, 6);
        let pool: Vec<&IndividualEntry> = e.iter().collect();
        let a = sample_pk_batch(&pool, BatchSpec::default(), &mut stream(9, Stream::Batch, 4)).unwrap();
        let b = sample_pk_batch(&pool, BatchSpec::default(), &mut stream(9, Stream::Batch, 4)).unwrap();
        assert_eq!(a, b);
    }
}

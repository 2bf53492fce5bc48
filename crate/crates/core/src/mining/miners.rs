use rand::Rng as _;

use super::{MiningConfig, MiningError, MiningStrategy, TripletIndex};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Triplets that violate the margin: for every ordered anchor–positive pair
/// and every negative with `D²(a,p) + m > D²(a,n)`. With
/// `include_hard_negatives` off, negatives closer than the positive are
/// dropped as well. Output is ordered by (anchor, positive, negative).
pub fn mine_semi_hard<T: Scalar>(dists: &Tensor<T>, labels: &[usize], config: &MiningConfig) -> Vec<TripletIndex> {
    let b = labels.len();
    let d = dists.data();
    let margin = T::lit(config.margin);
    let mut out = Vec::new();
    for a in 0..b {
        for p in 0..b {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            let dap = d[a * b + p];
            for n in 0..b {
                if labels[n] == labels[a] {
                    continue;
                }
                let dan = d[a * b + n];
                if dap + margin > dan && (config.include_hard_negatives || dan >= dap) {
                    out.push(TripletIndex {
                        anchor: a,
                        positive: p,
                        negative: n,
                    });
                }
            }
        }
    }
    out
}

/// One triplet per anchor: furthest positive, closest negative, lowest
/// index on ties.
pub fn mine_batch_hard<T: Scalar>(dists: &Tensor<T>, labels: &[usize]) -> Result<Vec<TripletIndex>, MiningError> {
    let b = labels.len();
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(MiningError::SingleClass);
    }
    for &c in &classes {
        let size = labels.iter().filter(|&&l| l == c).count();
        if size < 2 {
            return Err(MiningError::ClassTooSmall { class: c, size });
        }
    }
    let d = dists.data();
    let mut out = Vec::with_capacity(b);
    for a in 0..b {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            let dj = d[a * b + j];
            if labels[j] == labels[a] {
                if pos.is_none_or(|p| dj > d[a * b + p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|n| dj < d[a * b + n]) {
                neg = Some(j);
            }
        }
        out.push(TripletIndex {
            anchor: a,
            positive: pos.expect("class has >= 2 members"),
            negative: neg.expect("batch has >= 2 classes"),
        });
    }
    Ok(out)
}

/// One uniformly drawn positive and negative for each anchor that has both.
pub fn mine_random(labels: &[usize], rng: &mut Rng) -> Vec<TripletIndex> {
    let b = labels.len();
    let mut out = Vec::new();
    for a in 0..b {
        let pos: Vec<usize> = (0..b).filter(|&j| j != a && labels[j] == labels[a]).collect();
        let neg: Vec<usize> = (0..b).filter(|&j| labels[j] != labels[a]).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        out.push(TripletIndex {
            anchor: a,
            positive: pos[rng.random_range(0..pos.len())],
            negative: neg[rng.random_range(0..neg.len())],
        });
    }
    out
}

/// Dispatches on the configured strategy. `rng` is only consumed by the
/// random strategy.
pub fn mine<T: Scalar>(
    dists: &Tensor<T>,
    labels: &[usize],
    config: &MiningConfig,
    rng: &mut Rng,
) -> Result<Vec<TripletIndex>, MiningError> {
    match config.strategy {
        MiningStrategy::SemiHard => Ok(mine_semi_hard(dists, labels, config)),
        MiningStrategy::BatchHard => mine_batch_hard(dists, labels),
        MiningStrategy::Random => Ok(mine_random(labels, rng)),
    }
}

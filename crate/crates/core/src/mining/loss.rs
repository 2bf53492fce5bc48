use super::{NegativeReference, PairIndex, TripletIndex};
use crate::tensor::{Scalar, Tensor};

/// Raw loss sum, number of terms with non-zero loss, and the gradient of the
/// sum with respect to the embeddings.
#[derive(Debug, Clone)]
pub struct LossValue<T: Scalar> {
    pub sum: T,
    pub active: usize,
    pub grad: Tensor<T>,
}

fn sq_dist<T: Scalar>(x: &[T], y: &[T]) -> T {
    x.iter().zip(y).map(|(&a, &b)| (a - b) * (a - b)).fold(T::zero(), |s, v| s + v)
}

/// `Σ max(0, m + D(a,p)² − D(ref,n)²)` and its gradient with respect to the
/// embeddings. Inactive triplets (hinge ≤ 0) contribute nothing.
///
/// Returns the raw sum; callers decide how to normalize.
pub fn triplet_loss<T: Scalar>(
    embeddings: &Tensor<T>,
    triplets: &[TripletIndex],
    margin: f64,
    reference: NegativeReference,
) -> LossValue<T> {
    let mut grad = Tensor::zeros(embeddings.shape());
    let d = embeddings.shape()[1];
    let m = T::lit(margin);
    let two = T::lit(2.0);
    let mut total = T::zero();
    let mut active = 0;
    for t in triplets {
        let a = embeddings.row(t.anchor);
        let p = embeddings.row(t.positive);
        let n = embeddings.row(t.negative);
        let r = match reference {
            NegativeReference::Anchor => a,
            NegativeReference::Positive => p,
        };
        let hinge = m + sq_dist(a, p) - sq_dist(r, n);
        if hinge <= T::zero() {
            continue;
        }
        total = total + hinge;
        active += 1;
        let g = grad.data_mut();
        for k in 0..d {
            let ap = two * (a[k] - p[k]);
            let rn = two * (r[k] - n[k]);
            // d/da D²(a,p) = ap, d/dp D²(a,p) = -ap
            g[t.anchor * d + k] = g[t.anchor * d + k] + ap;
            g[t.positive * d + k] = g[t.positive * d + k] - ap;
            // −D²(r,n): d/dr = −rn, d/dn = +rn
            let ri = match reference {
                NegativeReference::Anchor => t.anchor,
                NegativeReference::Positive => t.positive,
            };
            g[ri * d + k] = g[ri * d + k] - rn;
            g[t.negative * d + k] = g[t.negative * d + k] + rn;
        }
    }
    LossValue {
        sum: total,
        active,
        grad,
    }
}

/// Every unordered in-batch pair (i < j).
pub fn batch_pairs(labels: &[usize]) -> Vec<PairIndex> {
    let mut out = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            out.push(PairIndex {
                i,
                j,
                same_class: labels[i] == labels[j],
            });
        }
    }
    out
}

/// `Σ [same]·D² + [different]·max(0, margin − D)²` with its gradient.
/// A different-class pair at D = 0 gets the zero subgradient.
pub fn contrastive_loss<T: Scalar>(embeddings: &Tensor<T>, pairs: &[PairIndex], margin: f64) -> LossValue<T> {
    let mut grad = Tensor::zeros(embeddings.shape());
    let d = embeddings.shape()[1];
    let m = T::lit(margin);
    let two = T::lit(2.0);
    let mut total = T::zero();
    let mut active = 0;
    for pair in pairs {
        let x = embeddings.row(pair.i);
        let y = embeddings.row(pair.j);
        let d2 = sq_dist(x, y);
        let g = grad.data_mut();
        if pair.same_class {
            total = total + d2;
            if d2 > T::zero() {
                active += 1;
            }
            for k in 0..d {
                let v = two * (x[k] - y[k]);
                g[pair.i * d + k] = g[pair.i * d + k] + v;
                g[pair.j * d + k] = g[pair.j * d + k] - v;
            }
        } else {
            let dist = d2.sqrt();
            if dist >= m {
                continue;
            }
            let slack = m - dist;
            total = total + slack * slack;
            active += 1;
            if dist <= T::zero() {
                continue;
            }
            let coef = -two * slack / dist;
            for k in 0..d {
                let v = coef * (x[k] - y[k]);
                g[pair.i * d + k] = g[pair.i * d + k] + v;
                g[pair.j * d + k] = g[pair.j * d + k] - v;
            }
        }
    }
    LossValue {
        sum: total,
        active,
        grad,
    }
}

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::retrieval::euclidean;

/// Unordered index pairs (i < j) split into same-label and different-label.
pub fn all_pairs<L: PartialEq>(labels: &[L]) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            if labels[i] == labels[j] {
                pos.push((i, j));
            } else {
                neg.push((i, j));
            }
        }
    }
    (pos, neg)
}

pub const FAR_TARGET: f64 = 0.01;

/// Empirical ROC of pair distances. A pair is accepted at threshold `d`
/// when its distance is `<= d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    /// Sorted distinct pair distances, bracketed by `-inf` and `inf`.
    #[serde(with = "sentinel_floats")]
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub far: Vec<f64>,
    pub auc: f64,
    pub far_target: f64,
    /// TPR at the largest threshold whose FAR is <= `far_target`; no
    /// interpolation between grid points.
    pub tpr_at_far: f64,
    #[serde(with = "sentinel_float")]
    pub threshold_at_far: f64,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
}

/// Trapezoid rule over consecutive (FAR, TPR) points.
pub fn trapezoid_auc(far: &[f64], tpr: &[f64]) -> f64 {
    far.windows(2)
        .zip(tpr.windows(2))
        .map(|(f, t)| (f[1] - f[0]) * (t[0] + t[1]) / 2.0)
        .sum()
}

/// ROC from precomputed positive and negative pair distances.
pub fn verification_from_distances(positive: &[f64], negative: &[f64]) -> Result<VerificationReport, EvalError> {
    if positive.is_empty() {
        return Err(EvalError::NoPositivePairs);
    }
    if negative.is_empty() {
        return Err(EvalError::NoNegativePairs);
    }
    if positive.iter().chain(negative).any(|d| !d.is_finite()) {
        return Err(EvalError::NonFinite("pair distance".into()));
    }
    let mut pos = positive.to_vec();
    let mut neg = negative.to_vec();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let mut grid: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let mut thresholds = Vec::with_capacity(grid.len() + 2);
    let mut tpr = Vec::with_capacity(grid.len() + 2);
    let mut far = Vec::with_capacity(grid.len() + 2);
    thresholds.push(f64::NEG_INFINITY);
    tpr.push(0.0);
    far.push(0.0);
    let (mut ip, mut in_) = (0usize, 0usize);
    for &d in &grid {
        while ip < pos.len() && pos[ip] <= d {
            ip += 1;
        }
        while in_ < neg.len() && neg[in_] <= d {
            in_ += 1;
        }
        thresholds.push(d);
        tpr.push(ip as f64 / np);
        far.push(in_ as f64 / nn);
    }
    thresholds.push(f64::INFINITY);
    tpr.push(1.0);
    far.push(1.0);

    let at = (0..thresholds.len())
        .rev()
        .find(|&i| far[i] <= FAR_TARGET)
        .expect("the -inf sentinel has FAR 0");
    Ok(VerificationReport {
        auc: trapezoid_auc(&far, &tpr),
        far_target: FAR_TARGET,
        tpr_at_far: tpr[at],
        threshold_at_far: thresholds[at],
        thresholds,
        tpr,
        far,
        positive_pairs: pos.len(),
        negative_pairs: neg.len(),
    })
}

/// All-pairs verification over embeddings with identity labels.
pub fn verification_metrics<L: PartialEq>(embeddings: &[Vec<f32>], labels: &[L]) -> Result<VerificationReport, EvalError> {
    if embeddings.len() != labels.len() {
        return Err(EvalError::Protocol(format!(
            "{} embeddings but {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    if embeddings.len() < 2 {
        return Err(EvalError::TooFewItems(embeddings.len()));
    }
    let (p, n) = all_pairs(labels);
    let dist = |&(i, j): &(usize, usize)| euclidean(&embeddings[i], &embeddings[j]);
    verification_from_distances(&p.iter().map(dist).collect::<Vec<_>>(), &n.iter().map(dist).collect::<Vec<_>>())
}

/// `threshold,tpr,far` rows with a header line.
pub fn roc_csv(report: &VerificationReport) -> String {
    let mut out = String::from("threshold,tpr,far\n");
    for ((d, t), f) in report.thresholds.iter().zip(&report.tpr).zip(&report.far) {
        out.push_str(&format!("{},{},{}\n", fmt_threshold(*d), t, f));
    }
    out
}

fn fmt_threshold(d: f64) -> String {
    if d == f64::INFINITY {
        "inf".into()
    } else if d == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{d}")
    }
}

fn parse_threshold(s: &str) -> Option<f64> {
    match s {
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => None,
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Wire {
    Num(f64),
    Text(String),
}

impl Wire {
    fn from_f64(d: f64) -> Self {
        if d.is_finite() {
            Wire::Num(d)
        } else {
            Wire::Text(fmt_threshold(d))
        }
    }

    fn into_f64<E: serde::de::Error>(self) -> Result<f64, E> {
        match self {
            Wire::Num(d) => Ok(d),
            Wire::Text(s) => parse_threshold(&s).ok_or_else(|| E::custom(format!("bad threshold {s:?}"))),
        }
    }
}

/// Infinite thresholds travel as the strings `"inf"` / `"-inf"`.
mod sentinel_floats {
    use super::Wire;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|&d| Wire::from_f64(d)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Wire>::deserialize(d)?.into_iter().map(Wire::into_f64).collect()
    }
}

mod sentinel_float {
    use super::Wire;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        Wire::from_f64(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Wire::deserialize(d)?.into_f64()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use rand::Rng as _;

    #[test]
    fn pair_counts() {
        let (p, n) = all_pairs(&[0, 0, 1, 1]);
        assert_eq!((p.len(), n.len()), (2, 4));
        let (p, n) = all_pairs(&[3, 3, 3]);
        assert_eq!((p.len(), n.len()), (3, 0));
        // 25 individuals × 12 images: 300 images, 44,850 pairs, 1,650 positive
        let labels: Vec<usize> = (0..300).map(|i| i / 12).collect();
        let (p, n) = all_pairs(&labels);
        assert_eq!(p.len() + n.len(), 300 * 299 / 2);
        assert_eq!(p.len(), 25 * 66);
    }

    #[test]
    fn three_point_hand_case() {
        let r = verification_from_distances(&[1.0], &[0.5, 2.0]).unwrap();
        let i = r.thresholds.iter().position(|&d| d == 1.0).unwrap();
        assert_eq!((r.tpr[i], r.far[i]), (1.0, 0.5));
        // (0,0) → (0.5,0) → (0.5,1) → (1,1) → (1,1)
        assert_eq!(r.auc, 0.5);
        assert_eq!(r.tpr_at_far, 0.0);
        assert_eq!(r.threshold_at_far, f64::NEG_INFINITY);
    }

    #[test]
    fn separated_gives_unit_auc() {
        let r = verification_from_distances(&[0.1, 0.2, 0.3], &[0.5, 0.9]).unwrap();
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.tpr_at_far, 1.0);
        assert_eq!(r.threshold_at_far, 0.3);
    }

    #[test]
    fn missing_classes_rejected() {
        assert!(matches!(verification_from_distances(&[], &[1.0]), Err(EvalError::NoPositivePairs)));
        assert!(matches!(verification_from_distances(&[1.0], &[]), Err(EvalError::NoNegativePairs)));
    }

    #[test]
    fn roc_is_monotone_with_fixed_endpoints() {
        let mut r = stream(4, Stream::Protocol, 0);
        let pos: Vec<f64> = (0..40).map(|_| r.random_range(0.0..2.0)).collect();
        let neg: Vec<f64> = (0..90).map(|_| r.random_range(0.5..3.0)).collect();
        let v = verification_from_distances(&pos, &neg).unwrap();
        assert_eq!((v.tpr[0], v.far[0]), (0.0, 0.0));
        assert_eq!((*v.tpr.last().unwrap(), *v.far.last().unwrap()), (1.0, 1.0));
        assert!(v.tpr.windows(2).all(|w| w[0] <= w[1]));
        assert!(v.far.windows(2).all(|w| w[0] <= w[1]));
        assert!((0.0..=1.0).contains(&v.auc));
    }

    #[test]
    fn json_round_trip_keeps_sentinels() {
        let r = verification_from_distances(&[1.0], &[0.5, 2.0]).unwrap();
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"-inf\"") && s.contains("\"inf\""));
        let back: VerificationReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
        let csv = roc_csv(&r);
        assert!(csv.starts_with("threshold,tpr,far\n-inf,0,0\n"));
        assert!(csv.ends_with("inf,1,1\n"));
    }
}

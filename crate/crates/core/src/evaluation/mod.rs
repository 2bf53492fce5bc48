//! Pair verification (ROC/AUC) and gallery/query top-k identification.

mod topk;
mod verification;

pub use topk::{
    protocol_splits, query_ranks, topk_from_embeddings, vary_gallery_size, EvalProtocolConfig, LabeledEmbedding,
    ProtocolSplit, TopKReport,
};
pub use verification::{
    all_pairs, roc_csv, trapezoid_auc, verification_from_distances, verification_metrics, VerificationReport,
    FAR_TARGET,
};

use serde::{Deserialize, Serialize};

use crate::net::{Model, NetError};
use crate::retrieval::RetrievalError;
use crate::synth::{split_by_individual, DatasetManifest, ImageSample, ImageSource, SynthError};

/// JSON schema of [`EvalReport`].
pub const EVAL_REPORT_SCHEMA: &str = include_str!("../../schema/eval_report.schema.json");
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no positive (same-individual) pairs")]
    NoPositivePairs,
    #[error("no negative (different-individual) pairs")]
    NoNegativePairs,
    #[error("need at least 2 items, got {0}")]
    TooFewItems(usize),
    #[error("individual {individual} has {have} test images, protocol needs {need}")]
    TooFewImages { individual: String, have: usize, need: usize },
    #[error("invalid protocol: {0}")]
    Protocol(String),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

/// Mean and sample standard deviation (n − 1); std is 0 for a single value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    /// Hex fingerprint of the evaluated checkpoint.
    pub model_fingerprint: String,
    pub fold: Option<usize>,
    pub test_individuals: usize,
    pub test_images: usize,
    pub train_images: usize,
    pub verification: VerificationReport,
    pub topk: TopKReport,
    /// Present when a gallery-size sweep was requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vary_m: Option<Vec<VaryEntry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaryEntry {
    pub m: usize,
    pub topk: TopKReport,
}

pub fn embed_labeled(model: &Model, images: &[ImageSample]) -> Result<Vec<LabeledEmbedding>, EvalError> {
    let refs: Vec<&ImageSample> = images.iter().collect();
    let vectors = model.embed(&refs)?;
    if vectors.iter().flatten().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite("embedding".into()));
    }
    Ok(images
        .iter()
        .zip(vectors)
        .map(|(img, vector)| LabeledEmbedding {
            individual_id: img.individual_id.clone(),
            image_id: img.image_id.clone(),
            vector,
        })
        .collect())
}

/// Loads every image of the given individuals through `source`.
pub fn load_images(
    manifest: &DatasetManifest,
    ids: &[String],
    source: &dyn ImageSource,
) -> Result<Vec<ImageSample>, SynthError> {
    manifest
        .images_of(ids)
        .iter()
        .map(|(ind, img)| source.load(ind, img))
        .collect()
}

/// (train images, test images) of a fold.
pub fn fold_images(
    manifest: &DatasetManifest,
    fold: usize,
    source: &dyn ImageSource,
) -> Result<(Vec<ImageSample>, Vec<ImageSample>), SynthError> {
    let (train, test) = split_by_individual(manifest, fold)?;
    Ok((load_images(manifest, &train, source)?, load_images(manifest, &test, source)?))
}

/// Verification over all test-image pairs plus the top-k protocol with the
/// training images as base gallery.
pub fn evaluate_embeddings(
    train: &[LabeledEmbedding],
    test: &[LabeledEmbedding],
    protocol: &EvalProtocolConfig,
    vary_m: Option<&[usize]>,
) -> Result<(VerificationReport, TopKReport, Option<Vec<VaryEntry>>), EvalError> {
    let vectors: Vec<Vec<f32>> = test.iter().map(|e| e.vector.clone()).collect();
    let labels: Vec<&str> = test.iter().map(|e| e.individual_id.as_str()).collect();
    let verification = verification_metrics(&vectors, &labels)?;
    let topk = topk_from_embeddings(train, test, protocol)?;
    let vary = match vary_m {
        Some(ms) => Some(
            vary_gallery_size(train, test, ms, protocol)?
                .into_iter()
                .map(|(m, topk)| VaryEntry { m, topk })
                .collect(),
        ),
        None => None,
    };
    Ok((verification, topk, vary))
}

pub fn evaluate_model(
    model: &Model,
    train_images: &[ImageSample],
    test_images: &[ImageSample],
    protocol: &EvalProtocolConfig,
    vary_m: Option<&[usize]>,
    fold: Option<usize>,
) -> Result<EvalReport, EvalError> {
    let train = embed_labeled(model, train_images)?;
    let test = embed_labeled(model, test_images)?;
    report_from_embeddings(model.fingerprint, &train, &test, protocol, vary_m, fold)
}

pub fn report_from_embeddings(
    model_fingerprint: u64,
    train: &[LabeledEmbedding],
    test: &[LabeledEmbedding],
    protocol: &EvalProtocolConfig,
    vary_m: Option<&[usize]>,
    fold: Option<usize>,
) -> Result<EvalReport, EvalError> {
    let (verification, topk, vary_m) = evaluate_embeddings(train, test, protocol, vary_m)?;
    let mut inds: Vec<&str> = test.iter().map(|e| e.individual_id.as_str()).collect();
    inds.sort_unstable();
    inds.dedup();
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        model_fingerprint: format!("{model_fingerprint:016x}"),
        fold,
        test_individuals: inds.len(),
        test_images: test.len(),
        train_images: train.len(),
        verification,
        topk,
        vary_m,
    })
}

/// `individual_id,image_id,d0,d1,...` rows with a header.
pub fn embeddings_csv(rows: &[LabeledEmbedding]) -> String {
    let dim = rows.first().map(|r| r.vector.len()).unwrap_or(0);
    let mut out = String::from("individual_id,image_id");
    for d in 0..dim {
        out.push_str(&format!(",d{d}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&r.individual_id);
        out.push(',');
        out.push_str(&r.image_id);
        for v in &r.vector {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn csv_shape() {
        let rows = vec![LabeledEmbedding {
            individual_id: "a".into(),
            image_id: "a_v00".into(),
            vector: vec![0.5, -1.0],
        }];
        assert_eq!(embeddings_csv(&rows), "individual_id,image_id,d0,d1\na,a_v00,0.5,-1\n");
    }
}

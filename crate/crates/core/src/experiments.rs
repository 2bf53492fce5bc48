//! Ablation harness: trains variants along one config axis at a time and
//! tabulates held-out metrics against the direction reported for real
//! animal data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::evaluation::{embed_labeled, evaluate_embeddings, fold_images, vary_gallery_size, EvalReport};
use crate::net::Model;
use crate::synth::{AugmentationLevel, DatasetManifest, ImageSource};
use crate::trainer::{train_to_dir, TrainConfig, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Normalization,
    EmbeddingDim,
    Augmentation,
    GalleryMatches,
}

impl Axis {
    pub const ALL: [Axis; 4] = [
        Axis::Normalization,
        Axis::EmbeddingDim,
        Axis::Augmentation,
        Axis::GalleryMatches,
    ];

    fn expectation(self) -> &'static str {
        match self {
            Axis::Normalization => "unnormalized embeddings score higher than l2-normalized",
            Axis::EmbeddingDim => "accuracy insensitive to dimension (top-1 spread <= 0.05)",
            Axis::Augmentation => "extensive augmentation scores higher than small",
            Axis::GalleryMatches => "accuracy grows with gallery matches m",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
    pub tpr_at_far: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: Axis,
    pub rows: Vec<AblationRow>,
    pub expectation: String,
    /// Whether this run's top-1 ordering matches the expectation.
    pub agrees: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct VariantKey {
    l2: bool,
    dim: usize,
    aug: AugmentationLevel,
}

fn variant(base: &TrainConfig, key: &VariantKey) -> TrainConfig {
    let mut c = base.clone();
    c.model.l2_normalize = key.l2;
    c.model.embedding_dim = key.dim;
    c.augmentation = key.aug;
    c
}

fn row(setting: String, report: &EvalReport) -> AblationRow {
    let t = &report.topk;
    AblationRow {
        setting,
        top1: t.at(1).unwrap_or(f64::NAN),
        top5: t.at(5).unwrap_or(f64::NAN),
        top10: t.at(10).unwrap_or(f64::NAN),
        tpr_at_far: report.verification.tpr_at_far,
        auc: report.verification.auc,
    }
}

/// Runs the requested axes. Variants shared between axes (the baseline) are
/// trained once. Each variant's checkpoint and log go to a subdirectory of
/// `out_dir` named after it.
pub fn run_ablation(
    manifest: &DatasetManifest,
    base: &TrainConfig,
    source: &dyn ImageSource,
    axes: &[Axis],
    out_dir: &Path,
) -> Result<Vec<AblationTable>, TrainError> {
    let base_key = VariantKey {
        l2: base.model.l2_normalize,
        dim: base.model.embedding_dim,
        aug: base.augmentation,
    };
    let (train_imgs, test_imgs) = fold_images(manifest, base.fold, source)?;
    let mut cache: Vec<(VariantKey, Model, EvalReport)> = Vec::new();
    let mut get = |key: VariantKey| -> Result<(Model, EvalReport), TrainError> {
        if let Some((_, m, r)) = cache.iter().find(|(k, _, _)| *k == key) {
            return Ok((m.clone(), r.clone()));
        }
        let cfg = TrainConfig {
            eval_every: 0,
            ..variant(base, &key)
        };
        let name = format!(
            "{}-d{}-{}",
            if key.l2 { "l2" } else { "raw" },
            key.dim,
            match key.aug {
                AugmentationLevel::Extensive => "extensive",
                AugmentationLevel::Small => "small",
            }
        );
        ::log::info!("ablation: training {name}");
        let out = train_to_dir(manifest, &cfg, source, None, &out_dir.join(&name))?;
        let report = crate::evaluation::evaluate_model(&out.model, &train_imgs, &test_imgs, &cfg.protocol, None, Some(cfg.fold))?;
        cache.push((key, out.model.clone(), report.clone()));
        Ok((out.model, report))
    };

    let mut tables = Vec::new();
    for &axis in axes {
        let rows: Vec<AblationRow> = match axis {
            Axis::Normalization => {
                let mut rows = Vec::new();
                for l2 in [true, false] {
                    let (_, r) = get(VariantKey { l2, ..base_key.clone() })?;
                    rows.push(row(if l2 { "l2-normalized".into() } else { "not normalized".into() }, &r));
                }
                rows
            }
            Axis::EmbeddingDim => {
                let mut rows = Vec::new();
                for dim in [128, 256, 512] {
                    let (_, r) = get(VariantKey { dim, ..base_key.clone() })?;
                    rows.push(row(format!("{dim}"), &r));
                }
                rows
            }
            Axis::Augmentation => {
                let mut rows = Vec::new();
                for aug in [AugmentationLevel::Small, AugmentationLevel::Extensive] {
                    let (_, r) = get(VariantKey { aug, ..base_key.clone() })?;
                    let name = if aug == AugmentationLevel::Small { "small" } else { "extensive" };
                    rows.push(row(name.into(), &r));
                }
                rows
            }
            Axis::GalleryMatches => {
                let (model, base_report) = get(base_key.clone())?;
                let train = embed_labeled(&model, &train_imgs)?;
                let test = embed_labeled(&model, &test_imgs)?;
                let ms: Vec<usize> = (1..=5).collect();
                let sweep = vary_gallery_size(&train, &test, &ms, &base.protocol)?;
                let (verification, _, _) = evaluate_embeddings(&train, &test, &base.protocol, None)?;
                sweep
                    .into_iter()
                    .map(|(m, topk)| {
                        row(
                            format!("m={m}"),
                            &EvalReport {
                                topk,
                                verification: verification.clone(),
                                ..base_report.clone()
                            },
                        )
                    })
                    .collect()
            }
        };
        let agrees = match axis {
            Axis::Normalization => rows[1].top1 >= rows[0].top1,
            Axis::EmbeddingDim => {
                let (lo, hi) = rows
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.top1), hi.max(r.top1)));
                hi - lo <= 0.05
            }
            Axis::Augmentation => rows[1].top1 >= rows[0].top1,
            Axis::GalleryMatches => rows.last().map(|r| r.top1).unwrap_or(0.0) >= rows[0].top1,
        };
        tables.push(AblationTable {
            axis,
            rows,
            expectation: axis.expectation().into(),
            agrees,
        });
    }
    Ok(tables)
}

/// Markdown rendering: one table per axis, settings as columns.
pub fn render_markdown(tables: &[AblationTable]) -> String {
    let mut out = String::new();
    for t in tables {
        out.push_str(&format!("### {:?}\n\n", t.axis));
        out.push_str("| metric |");
        for r in &t.rows {
            out.push_str(&format!(" {} |", r.setting));
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(t.rows.len()));
        out.push('\n');
        let metrics: [(&str, fn(&AblationRow) -> f64); 5] = [
            ("top-1", |r| r.top1),
            ("top-5", |r| r.top5),
            ("top-10", |r| r.top10),
            ("TPR@FAR=0.01", |r| r.tpr_at_far),
            ("AUC", |r| r.auc),
        ];
        for (name, f) in metrics {
            out.push_str(&format!("| {name} |"));
            for r in &t.rows {
                out.push_str(&format!(" {:.4} |", f(r)));
            }
            out.push('\n');
        }
        out.push_str(&format!(
            "\nexpected: {}; this run {}.\n\n",
            t.expectation,
            if t.agrees { "agrees" } else { "disagrees" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn markdown_has_one_column_per_setting() {
        let t = AblationTable {
            axis: Axis::Augmentation,
            rows: vec![
                AblationRow {
                    setting: "small".into(),
                    top1: 0.5,
                    top5: 0.8,
                    top10: 0.9,
                    tpr_at_far: 0.4,
                    auc: 0.95,
                },
                AblationRow {
                    setting: "extensive".into(),
                    top1: 0.6,
                    top5: 0.85,
                    top10: 0.95,
                    tpr_at_far: 0.5,
                    auc: 0.97,
                },
            ],
            expectation: Axis::Augmentation.expectation().into(),
            agrees: true,
        };
        let md = render_markdown(&[t]);
        assert!(md.contains("| metric | small | extensive |"));
        assert!(md.contains("| top-1 | 0.5000 | 0.6000 |"));
        assert!(md.contains("this run agrees"));
    }
}

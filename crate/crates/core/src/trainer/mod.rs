//! The training loop: P×K batch → augment → preprocess → forward → mine →
//! loss → backward → Adam, plus k-fold cross-validation.

mod log;

pub use log::{EvalRecord, LogRecord, StepRecord, TrainLog};

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::evaluation::{
    embed_labeled, evaluate_embeddings, evaluate_model, load_images, mean_std, EvalError, EvalProtocolConfig,
    EvalReport,
};
use crate::mining::{
    batch_pairs, contrastive_loss, mine, pairwise_sq_distances, sample_pk_batch, triplet_loss, BatchSpec, LossKind,
    LossValue, MiningConfig, MiningError,
};
use crate::net::{
    adam_step, backward, encode_checkpoint, forward, init_params, preprocess_batch, AdamConfig, Model, ModelConfig,
    NetError, OptimizerState, Parameters,
};
use crate::rng::{stream, Stream};
use crate::synth::{
    augment_image, sample_view_params, split_by_individual, AugmentationLevel, DatasetManifest, ImageSample,
    ImageSource, IndividualEntry, SynthError,
};

pub const CHECKPOINT_FILE: &str = "model.pidm";
pub const LAST_GOOD_FILE: &str = "last_good.pidm";
pub const LOG_FILE: &str = "train_log.ndjson";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub seed: u64,
    pub batch: BatchSpec,
    pub mining: MiningConfig,
    pub augmentation: AugmentationLevel,
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub lr_schedule: LrSchedule,
    /// Steps between held-out evaluations; 0 evaluates only after the last
    /// step.
    pub eval_every: usize,
    pub fold: usize,
    pub folds: usize,
    pub protocol: EvalProtocolConfig,
}

/// Learning rate used for from-scratch training on the synthetic corpus.
pub const DEFAULT_LEARNING_RATE: f64 = 3e-3;

/// Per-step multiplier on the Adam learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from 1 at the first step down to `final_fraction` at the
    /// last.
    Cosine { final_fraction: f64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Cosine { final_fraction: 0.01 }
    }
}

impl LrSchedule {
    /// Multiplier for 1-based `step` of `total`.
    pub fn factor(&self, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { final_fraction } => {
                let t = if total > 1 {
                    (step.saturating_sub(1)) as f64 / (total - 1) as f64
                } else {
                    0.0
                };
                final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        match *self {
            LrSchedule::Constant => Ok(()),
            LrSchedule::Cosine { final_fraction } if (0.0..=1.0).contains(&final_fraction) => Ok(()),
            LrSchedule::Cosine { final_fraction } => Err(TrainError::Config(format!(
                "train.lr_schedule.final_fraction: {final_fraction} outside [0, 1]"
            ))),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            seed: 0,
            batch: BatchSpec::default(),
            mining: MiningConfig::default(),
            augmentation: AugmentationLevel::Extensive,
            model: ModelConfig::default(),
            optimizer: AdamConfig {
                learning_rate: DEFAULT_LEARNING_RATE,
                ..AdamConfig::default()
            },
            lr_schedule: LrSchedule::default(),
            eval_every: 500,
            fold: 0,
            folds: 5,
            protocol: EvalProtocolConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steps == 0 {
            return Err(TrainError::Config("train.steps: must be > 0".into()));
        }
        if self.eval_every > self.steps {
            return Err(TrainError::Config(format!(
                "train.eval_every: {} exceeds steps {}",
                self.eval_every, self.steps
            )));
        }
        if self.folds < 2 {
            return Err(TrainError::Config(format!("train.folds: {} must be >= 2", self.folds)));
        }
        if self.fold >= self.folds {
            return Err(TrainError::Config(format!(
                "train.fold: {} out of range for {} folds",
                self.fold, self.folds
            )));
        }
        self.batch.validate()?;
        self.mining.validate()?;
        self.model.validate()?;
        self.optimizer.validate()?;
        self.lr_schedule.validate()?;
        self.protocol.validate()?;
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Mining(#[from] MiningError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("training aborted at step {step}: {reason}; parameters from step {} kept", step - 1)]
    NonFinite {
        step: usize,
        reason: String,
        last_good: Box<Model>,
        log: TrainLog,
    },
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<TrainError>,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Model,
    pub checkpoint: Vec<u8>,
    pub log: TrainLog,
}

/// Dense class label per batch item.
fn labels_of(batch: &[crate::mining::BatchItem]) -> Vec<usize> {
    batch.iter().map(|b| b.class).collect()
}

fn loss_for(embeddings: &crate::tensor::Tensor<f32>, labels: &[usize], config: &TrainConfig, step: usize) -> Result<(LossValue<f32>, usize), TrainError> {
    match config.mining.loss {
        LossKind::Triplet => {
            let dists = pairwise_sq_distances(embeddings);
            let mut rng = stream(config.seed, Stream::Mining, step as u64);
            let triplets = mine(&dists, labels, &config.mining, &mut rng)?;
            let v = triplet_loss(embeddings, &triplets, config.mining.margin, config.mining.negative_anchor);
            Ok((v, triplets.len()))
        }
        LossKind::Contrastive => {
            let pairs = batch_pairs(labels);
            let v = contrastive_loss(embeddings, &pairs, config.mining.contrastive_margin);
            Ok((v, pairs.len()))
        }
    }
}

struct Evaluator<'a> {
    train: Vec<ImageSample>,
    test: Vec<ImageSample>,
    protocol: &'a EvalProtocolConfig,
}

impl Evaluator<'_> {
    fn run(&self, model: &Model, step: usize) -> Result<EvalRecord, TrainError> {
        let train = embed_labeled(model, &self.train)?;
        let test = embed_labeled(model, &self.test)?;
        let (v, t, _) = evaluate_embeddings(&train, &test, self.protocol, None)?;
        Ok(EvalRecord {
            step,
            tpr_at_far: v.tpr_at_far,
            auc: v.auc,
            k: t.k,
            topk: t.mean,
        })
    }
}

/// Trains on every fold except `config.fold`. Training images are read only
/// through `source` and only for training individuals; held-out images for
/// the periodic evaluations come from `eval_source` (none: no evaluations).
pub fn train(
    manifest: &DatasetManifest,
    config: &TrainConfig,
    source: &dyn ImageSource,
    eval_source: Option<&dyn ImageSource>,
) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    let init = init_params(&config.model, config.seed)?;
    train_from(manifest, config, source, eval_source, init)
}

fn train_from(
    manifest: &DatasetManifest,
    config: &TrainConfig,
    source: &dyn ImageSource,
    eval_source: Option<&dyn ImageSource>,
    mut params: Parameters<f32>,
) -> Result<TrainOutput, TrainError> {
    if manifest.fold_count != config.folds {
        return Err(TrainError::Config(format!(
            "train.folds: {} but the dataset has {} folds",
            config.folds, manifest.fold_count
        )));
    }
    let (train_ids, test_ids) = split_by_individual(manifest, config.fold)?;
    if train_ids.is_empty() {
        return Err(TrainError::Config("training split is empty".into()));
    }
    let pool: Vec<&IndividualEntry> = manifest
        .individuals
        .iter()
        .filter(|e| train_ids.contains(&e.individual_id))
        .collect();
    if pool.len() < config.batch.p {
        return Err(MiningError::TooFewIndividuals {
            available: pool.len(),
            needed: config.batch.p,
        }
        .into());
    }
    let train_images = load_images(manifest, &train_ids, source)?;
    let index: HashMap<(&str, &str), usize> = train_images
        .iter()
        .enumerate()
        .map(|(i, s)| ((s.individual_id.as_str(), s.image_id.as_str()), i))
        .collect();
    let evaluator = match eval_source {
        Some(es) => Some(Evaluator {
            train: train_images.clone(),
            test: load_images(manifest, &test_ids, es)?,
            protocol: &config.protocol,
        }),
        None => None,
    };

    let mut opt = OptimizerState::new(&config.model, config.optimizer.clone());
    let mut log = TrainLog::default();
    let started = Instant::now();
    let b = config.batch.size();
    for step in 1..=config.steps {
        let mut batch_rng = stream(config.seed, Stream::Batch, step as u64);
        let batch = sample_pk_batch(&pool, config.batch, &mut batch_rng)?;
        let augmented: Vec<ImageSample> = batch
            .par_iter()
            .enumerate()
            .map(|(i, item)| {
                let src = &train_images[index[&(item.individual_id.as_str(), item.image_id.as_str())]];
                let mut rng = stream(config.seed, Stream::Augment, (step * b + i) as u64);
                let p = sample_view_params(&mut rng, config.augmentation, (src.height, src.width));
                augment_image(src, &p)
            })
            .collect::<Result<_, _>>()?;
        let refs: Vec<&ImageSample> = augmented.iter().collect();
        let input = preprocess_batch(&refs)?;
        let abort = |reason: String, params: Parameters<f32>, log: TrainLog| -> TrainError {
            match Model::from_params(params, config.model.clone()) {
                Ok(m) => TrainError::NonFinite {
                    step,
                    reason,
                    last_good: Box::new(m),
                    log,
                },
                Err(e) => e.into(),
            }
        };
        let (embeddings, cache) = match forward(&params, &config.model, &input) {
            Ok(v) => v,
            Err(NetError::NonFinite(reason)) => return Err(abort(reason, params, log)),
            Err(e) => return Err(e.into()),
        };
        let labels = labels_of(&batch);
        let (value, mined) = loss_for(&embeddings, &labels, config, step)?;
        if !value.sum.is_finite() || !embeddings.all_finite() {
            return Err(abort(format!("non-finite loss {}", value.sum), params, log));
        }
        let scale = if value.active > 0 { 1.0 / value.active as f32 } else { 0.0 };
        let mut upstream = value.grad;
        upstream.data_mut().iter_mut().for_each(|g| *g *= scale);
        let grads = backward(&params, &cache, &upstream)?;
        let before = params.clone();
        opt.config.learning_rate =
            config.optimizer.learning_rate * config.lr_schedule.factor(step, config.steps);
        if let Err(e) = adam_step(&mut params, &grads, &mut opt) {
            return Err(abort(e.to_string(), before, log));
        }
        if !params.all_finite() {
            return Err(abort("non-finite parameters after update".into(), before, log));
        }
        let loss = if value.active > 0 {
            value.sum as f64 / value.active as f64
        } else {
            0.0
        };
        log.steps.push(StepRecord {
            step,
            loss,
            loss_sum: value.sum as f64,
            active: value.active,
            mined,
            wall_ms: started.elapsed().as_millis() as u64,
        });
        if step % 100 == 0 {
            ::log::info!("step {step}/{} loss {loss:.4} active {}/{mined}", config.steps, value.active);
        }
        let due = step == config.steps || (config.eval_every > 0 && step % config.eval_every == 0);
        if let (true, Some(ev)) = (due, &evaluator) {
            let model = Model::from_params(params.clone(), config.model.clone())?;
            let rec = ev.run(&model, step)?;
            ::log::info!("step {step} eval auc {:.4} top-k {:?}", rec.auc, rec.topk);
            log.evals.push(rec);
        }
    }
    let checkpoint = encode_checkpoint(&params, &config.model)?;
    let model = Model::from_bytes(&checkpoint)?;
    Ok(TrainOutput { model, checkpoint, log })
}

/// [`train`], then writes the checkpoint and NDJSON log into `out_dir`. On a
/// non-finite abort the last good parameters and the partial log are written
/// instead.
pub fn train_to_dir(
    manifest: &DatasetManifest,
    config: &TrainConfig,
    source: &dyn ImageSource,
    eval_source: Option<&dyn ImageSource>,
    out_dir: &Path,
) -> Result<TrainOutput, TrainError> {
    let io = |p: &Path, e| TrainError::Net(NetError::Io {
        path: p.to_path_buf(),
        source: e,
    });
    std::fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
    match train(manifest, config, source, eval_source) {
        Ok(out) => {
            let ck = out_dir.join(CHECKPOINT_FILE);
            std::fs::write(&ck, &out.checkpoint).map_err(|e| io(&ck, e))?;
            let lg = out_dir.join(LOG_FILE);
            std::fs::write(&lg, out.log.to_ndjson()).map_err(|e| io(&lg, e))?;
            Ok(out)
        }
        Err(TrainError::NonFinite {
            step,
            reason,
            last_good,
            log,
        }) => {
            let p = out_dir.join(LAST_GOOD_FILE);
            let bytes = encode_checkpoint(&last_good.params, &last_good.config)?;
            std::fs::write(&p, bytes).map_err(|e| io(&p, e))?;
            let lg = out_dir.join(LOG_FILE);
            std::fs::write(&lg, log.to_ndjson()).map_err(|e| io(&lg, e))?;
            Err(TrainError::NonFinite {
                step,
                reason,
                last_good,
                log,
            })
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValReport {
    pub folds: Vec<EvalReport>,
    /// Mean ± sample std across folds: `auc`, `tpr_at_far`, `top{k}`.
    pub summary: BTreeMap<String, Stat>,
}

/// Trains one model per fold and evaluates each on its held-out fold.
pub fn run_crossval(
    manifest: &DatasetManifest,
    config: &TrainConfig,
    source: &dyn ImageSource,
) -> Result<CrossValReport, TrainError> {
    if config.folds < 2 {
        return Err(TrainError::Config(format!("train.folds: {} must be >= 2", config.folds)));
    }
    let mut reports = Vec::with_capacity(config.folds);
    for fold in 0..config.folds {
        let annotate = |e: TrainError| TrainError::Fold {
            fold,
            source: Box::new(e),
        };
        let cfg = TrainConfig {
            fold,
            ..config.clone()
        };
        let out = train(manifest, &cfg, source, None).map_err(annotate)?;
        let (train_ids, test_ids) = split_by_individual(manifest, fold).map_err(|e| annotate(e.into()))?;
        let tr = load_images(manifest, &train_ids, source).map_err(|e| annotate(e.into()))?;
        let te = load_images(manifest, &test_ids, source).map_err(|e| annotate(e.into()))?;
        let report = evaluate_model(&out.model, &tr, &te, &config.protocol, None, Some(fold))
            .map_err(|e| annotate(e.into()))?;
        reports.push(report);
    }
    Ok(CrossValReport {
        summary: summarize(&reports),
        folds: reports,
    })
}

pub fn summarize(reports: &[EvalReport]) -> BTreeMap<String, Stat> {
    let mut out = BTreeMap::new();
    let mut put = |name: String, xs: Vec<f64>| {
        let (mean, std) = mean_std(&xs);
        out.insert(name, Stat { mean, std });
    };
    put("auc".into(), reports.iter().map(|r| r.verification.auc).collect());
    put("tpr_at_far".into(), reports.iter().map(|r| r.verification.tpr_at_far).collect());
    if let Some(first) = reports.first() {
        for (i, k) in first.topk.k.iter().enumerate() {
            put(format!("top{k}"), reports.iter().map(|r| r.topk.mean[i]).collect());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{build_dataset, DatasetConfig, DirectorySource};
    use std::collections::HashSet;
    use std::sync::Mutex;

    pub(crate) fn small_corpus(dir: &Path, individuals: usize, folds: usize) -> DatasetManifest {
        build_dataset(
            dir,
            &DatasetConfig {
                individuals,
                views_per_individual: 4,
                image_size: (32, 32),
                seed: 5,
                folds,
                ..Default::default()
            },
        )
        .unwrap()
    }

    pub(crate) fn small_config() -> TrainConfig {
        TrainConfig {
            steps: 3,
            batch: BatchSpec { p: 4, k: 3 },
            model: ModelConfig {
                blocks: vec![4, 8],
                embedding_dim: 8,
                ..Default::default()
            },
            eval_every: 0,
            folds: 3,
            protocol: EvalProtocolConfig {
                repetitions: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    /// Records every image read.
    struct Recording {
        inner: DirectorySource,
        seen: Mutex<Vec<String>>,
    }

    impl ImageSource for Recording {
        fn load(&self, individual_id: &str, image_id: &str) -> Result<ImageSample, SynthError> {
            self.seen.lock().unwrap().push(individual_id.to_string());
            self.inner.load(individual_id, image_id)
        }
    }

    #[test]
    fn zero_steps_rejected() {
        let cfg = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
        let cfg = TrainConfig {
            steps: 10,
            eval_every: 11,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn one_step_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let m = small_corpus(dir.path(), 9, 3);
        let src = DirectorySource::new(&m);
        let cfg = TrainConfig {
            steps: 1,
            seed: 1,
            ..small_config()
        };
        let a = train(&m, &cfg, &src, Some(&src)).unwrap();
        let b = train(&m, &cfg, &src, Some(&src)).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.log.without_timing(), b.log.without_timing());
        assert_eq!(a.log.evals.len(), 1);
        let c = train(&m, &TrainConfig { seed: 2, ..cfg }, &src, None).unwrap();
        assert_ne!(a.checkpoint, c.checkpoint);
    }

    #[test]
    fn training_never_reads_test_fold() {
        let dir = tempfile::tempdir().unwrap();
        let m = small_corpus(dir.path(), 12, 3);
        let rec = Recording {
            inner: DirectorySource::new(&m),
            seen: Mutex::new(Vec::new()),
        };
        let cfg = TrainConfig {
            fold: 1,
            ..small_config()
        };
        train(&m, &cfg, &rec, None).unwrap();
        let (_, test) = split_by_individual(&m, 1).unwrap();
        let seen: HashSet<String> = rec.seen.lock().unwrap().iter().cloned().collect();
        assert!(!seen.is_empty());
        assert!(test.iter().all(|t| !seen.contains(t)));
    }

    #[test]
    fn contrastive_and_batch_hard_run() {
        let dir = tempfile::tempdir().unwrap();
        let m = small_corpus(dir.path(), 9, 3);
        let src = DirectorySource::new(&m);
        for mining in [
            MiningConfig {
                loss: LossKind::Contrastive,
                ..Default::default()
            },
            MiningConfig {
                strategy: crate::mining::MiningStrategy::BatchHard,
                ..Default::default()
            },
            MiningConfig {
                strategy: crate::mining::MiningStrategy::Random,
                ..Default::default()
            },
        ] {
            let cfg = TrainConfig { mining, ..small_config() };
            let out = train(&m, &cfg, &src, None).unwrap();
            assert_eq!(out.log.steps.len(), 3);
            assert!(out.log.steps.iter().all(|s| s.loss.is_finite()));
        }
    }

    #[test]
    fn non_finite_loss_keeps_last_good() {
        let dir = tempfile::tempdir().unwrap();
        let m = small_corpus(dir.path(), 9, 3);
        let src = DirectorySource::new(&m);
        let cfg = small_config();
        let mut p = init_params(&cfg.model, 0).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 1e30);
        }
        match train_from(&m, &cfg, &src, None, p.clone()) {
            Err(TrainError::NonFinite { step, last_good, .. }) => {
                assert_eq!(step, 1);
                assert_eq!(last_good.params, p);
            }
            other => panic!("expected abort, got {:?}", other.map(|o| o.log)),
        }
    }

    #[test]
    fn too_few_training_individuals() {
        let dir = tempfile::tempdir().unwrap();
        let m = small_corpus(dir.path(), 6, 3);
        let cfg = TrainConfig {
            batch: BatchSpec { p: 5, k: 2 },
            ..small_config()
        };
        assert!(matches!(
            train(&m, &cfg, &DirectorySource::new(&m), None),
            Err(TrainError::Mining(MiningError::TooFewIndividuals { available: 4, needed: 5 }))
        ));
    }

    #[test]
    fn crossval_reports_every_fold() {
        let dir = tempfile::tempdir().unwrap();
        let m = small_corpus(dir.path(), 12, 3);
        let src = DirectorySource::new(&m);
        let cfg = TrainConfig {
            steps: 2,
            ..small_config()
        };
        let r = run_crossval(&m, &cfg, &src).unwrap();
        assert_eq!(r.folds.len(), 3);
        assert!(r.summary.contains_key("top10") && r.summary.contains_key("auc"));
        let r2 = run_crossval(&m, &cfg, &src).unwrap();
        assert_eq!(r.summary, r2.summary);
    }
}

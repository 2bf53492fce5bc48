//! `patternid` command line: argument parsing, config merging and the
//! error-to-exit-code mapping.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use crate::config::{ConfigError, RunConfig};
use crate::evaluation::{
    embed_labeled, embeddings_csv, fold_images, load_images, report_from_embeddings, roc_csv, EvalError,
};
use crate::experiments::{render_markdown, run_ablation, Axis};
use crate::imageio::{read_image, ImageError};
use crate::mining::MiningError;
use crate::net::{Model, NetError};
use crate::retrieval::{build_database, load_database, rank_individuals, save_database, RetrievalError};
use crate::service::{AppState, ServiceConfig, ServiceError, DEFAULT_K};
use crate::synth::{build_dataset, split_by_individual, DatasetManifest, DirectorySource, SynthError};
use crate::trainer::{run_crossval, train_to_dir, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("aborted: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Data(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(_) | SynthError::Params(_) | SynthError::FoldOutOfRange { .. } => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Config(_) | NetError::SpatialUnderflow { .. } => CliError::Config(e.to_string()),
            NetError::NonFinite(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MiningError> for CliError {
    fn from(e: MiningError) -> Self {
        match e {
            MiningError::Config(_) | MiningError::BatchSpec(_) => CliError::Config(e.to_string()),
            MiningError::TooFewIndividuals { .. } => CliError::Data(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::ZeroK => CliError::Config(e.to_string()),
            RetrievalError::Net(n) => n.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Protocol(_) => CliError::Config(e.to_string()),
            EvalError::NonFinite(_) => CliError::Runtime(e.to_string()),
            EvalError::Net(n) => n.into(),
            EvalError::Retrieval(r) => r.into(),
            EvalError::Synth(s) => s.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::NonFinite { .. } => CliError::Runtime(e.to_string()),
            TrainError::Mining(m) => m.into(),
            TrainError::Net(n) => n.into(),
            TrainError::Synth(s) => s.into(),
            TrainError::Eval(v) => v.into(),
            TrainError::Fold { fold, source } => match CliError::from(*source) {
                CliError::Config(m) => CliError::Config(format!("fold {fold}: {m}")),
                CliError::Data(m) => CliError::Data(format!("fold {fold}: {m}")),
                CliError::Runtime(m) => CliError::Runtime(format!("fold {fold}: {m}")),
            },
        }
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Retrieval(r) => r.into(),
            ServiceError::Io { .. } => CliError::Data(e.to_string()),
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Parses a snake_case enum value the same way the config file does.
fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// `1,5,10`
fn parse_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("{p:?} is not a non-negative integer")))
        .collect()
}

/// `1..5` (inclusive) or a comma list.
fn parse_range(s: &str) -> Result<Vec<usize>, String> {
    match s.split_once("..") {
        Some((a, b)) => {
            let a: usize = a.trim().parse().map_err(|_| format!("bad range start in {s:?}"))?;
            let b: usize = b.trim().trim_start_matches('=').parse().map_err(|_| format!("bad range end in {s:?}"))?;
            if a > b {
                return Err(format!("empty range {s:?}"));
            }
            Ok((a..=b).collect())
        }
        None => parse_list(s),
    }
}

#[derive(Debug, Parser)]
#[command(name = "patternid", version, about = "Re-identification of individuals from their markings")]
pub struct Cli {
    /// JSON run document.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (falls back to the config file, then PATTERNID_SEED, then 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic corpus to disk.
    Generate(GenerateArgs),
    /// Train an embedding network.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a held-out fold.
    Eval(EvalArgs),
    /// Build an embedding database from dataset images.
    Embed(EmbedArgs),
    /// Rank database individuals for one query image.
    Match(MatchArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Train variants along configuration axes and tabulate their metrics.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub individuals: Option<usize>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Output root.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    /// triplet | contrastive
    #[arg(long, value_parser = parse_enum::<crate::mining::LossKind>)]
    pub loss: Option<crate::mining::LossKind>,
    /// semi_hard | batch_hard | random
    #[arg(long, value_parser = parse_enum::<crate::mining::MiningStrategy>)]
    pub mining: Option<crate::mining::MiningStrategy>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// small | extensive
    #[arg(long, value_parser = parse_enum::<crate::synth::AugmentationLevel>)]
    pub augmentation: Option<crate::synth::AugmentationLevel>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    #[arg(long)]
    pub l2_normalize: Option<bool>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Held-out fold.
    #[arg(long)]
    pub fold: Option<usize>,
    /// Train and evaluate once per fold instead of a single run.
    #[arg(long)]
    pub folds: bool,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

/// Parsed from one comma list or range argument; an alias so the derive
/// does not treat it as a repeated flag.
pub type UsizeList = Vec<usize>;

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub fold: Option<usize>,
    /// Gallery matches per test individual.
    #[arg(long)]
    pub m: Option<usize>,
    /// Comma-separated k values.
    #[arg(long, value_parser = parse_list)]
    pub k: Option<UsizeList>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    /// Gallery-size sweep, e.g. `1..5`.
    #[arg(long, value_parser = parse_range)]
    pub vary_m: Option<UsizeList>,
    #[arg(long)]
    pub export_embeddings: Option<PathBuf>,
    #[arg(long)]
    pub roc_csv: Option<PathBuf>,
    /// Report file (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    All,
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pub split: Split,
    #[arg(long)]
    pub fold: Option<usize>,
    /// Database file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Query image (PGM or PNG).
    pub image: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub db: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub db: Option<PathBuf>,
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    #[arg(long)]
    pub images_dir: Option<PathBuf>,
    #[arg(long)]
    pub pending_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Comma-separated subset of normalization, embedding_dim,
    /// augmentation, gallery_matches.
    #[arg(long, value_delimiter = ',', value_parser = parse_enum::<Axis>)]
    pub axes: Option<Vec<Axis>>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Defaults to `<run_dir>/ablation`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let (mut cfg, explicit) = RunConfig::load_or_default(cli.config.as_deref())?;
    cfg.apply_seed(cli.seed, explicit)?;
    Ok(cfg)
}

fn load_manifest(cfg: &RunConfig) -> Result<DatasetManifest, CliError> {
    Ok(DatasetManifest::load(&cfg.paths.data_dir)?)
}

/// Runs one command, writing its report to stdout.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Generate(a) => {
            if let Some(v) = a.individuals {
                cfg.dataset.individuals = v;
            }
            if let Some(v) = a.views {
                cfg.dataset.views_per_individual = v;
            }
            if let Some(v) = a.folds {
                cfg.dataset.folds = v;
            }
            if let Some(v) = a.data {
                cfg.paths.data_dir = v;
            }
            cfg.dataset.validate()?;
            let m = build_dataset(&cfg.paths.data_dir, &cfg.dataset)?;
            println!(
                "dataset {}: {} individuals, {} images, {}x{} px, {} folds, seed {}",
                cfg.paths.data_dir.display(),
                m.individuals.len(),
                m.image_count(),
                m.image_size.0,
                m.image_size.1,
                m.fold_count,
                m.seed
            );
            Ok(())
        }
        Command::Train(a) => cmd_train(cfg, a),
        Command::Eval(a) => cmd_eval(cfg, a),
        Command::Embed(a) => cmd_embed(cfg, a),
        Command::Match(a) => cmd_match(cfg, a),
        Command::Serve(a) => cmd_serve(cfg, a),
        Command::Ablate(a) => cmd_ablate(cfg, a),
    }
}

fn cmd_train(mut cfg: RunConfig, a: TrainArgs) -> Result<(), CliError> {
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.loss {
        cfg.mining.loss = v;
    }
    if let Some(v) = a.mining {
        cfg.mining.strategy = v;
    }
    if let Some(v) = a.margin {
        cfg.mining.margin = v;
    }
    if let Some(v) = a.lr {
        cfg.train.optimizer.learning_rate = v;
    }
    if let Some(v) = a.augmentation {
        cfg.train.augmentation = v;
    }
    if let Some(v) = a.embedding_dim {
        cfg.model.embedding_dim = v;
    }
    if let Some(v) = a.l2_normalize {
        cfg.model.l2_normalize = v;
    }
    if let Some(v) = a.eval_every {
        cfg.train.eval_every = v;
    }
    if let Some(v) = a.fold {
        cfg.train.fold = v;
    }
    if let Some(v) = a.data {
        cfg.paths.data_dir = v;
    }
    if let Some(v) = a.run_dir {
        cfg.paths.run_dir = v;
    }
    let manifest = load_manifest(&cfg)?;
    cfg.dataset.folds = manifest.fold_count;
    cfg.validate()?;
    let tc = cfg.train_config();
    let source = DirectorySource::new(&manifest);
    if a.folds {
        let report = run_crossval(&manifest, &tc, &source)?;
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        write_file(&cfg.paths.run_dir.join("crossval.json"), &text)?;
        println!("{text}");
        return Ok(());
    }
    let out = train_to_dir(&manifest, &tc, &source, Some(&source), &cfg.paths.run_dir)?;
    let ck = cfg.paths.checkpoint();
    if ck != cfg.paths.run_dir.join(crate::trainer::CHECKPOINT_FILE) {
        write_file(&ck, &out.checkpoint)?;
    }
    println!("checkpoint {}", ck.display());
    println!("fingerprint {:016x}", out.model.fingerprint);
    Ok(())
}

fn cmd_eval(mut cfg: RunConfig, a: EvalArgs) -> Result<(), CliError> {
    if let Some(v) = a.data {
        cfg.paths.data_dir = v;
    }
    if let Some(v) = a.fold {
        cfg.train.fold = v;
    }
    if let Some(v) = a.m {
        cfg.protocol.gallery_matches_per_individual = v;
    }
    if let Some(v) = a.k {
        cfg.protocol.k = v;
    }
    if let Some(v) = a.repetitions {
        cfg.protocol.repetitions = v;
    }
    cfg.protocol.validate()?;
    let ck = a.checkpoint.unwrap_or_else(|| cfg.paths.checkpoint());
    let model = Model::load(&ck)?;
    let manifest = load_manifest(&cfg)?;
    let source = DirectorySource::new(&manifest);
    let (train_imgs, test_imgs) = fold_images(&manifest, cfg.train.fold, &source)?;
    let train = embed_labeled(&model, &train_imgs)?;
    let test = embed_labeled(&model, &test_imgs)?;
    let report = report_from_embeddings(
        model.fingerprint,
        &train,
        &test,
        &cfg.protocol,
        a.vary_m.as_deref(),
        Some(cfg.train.fold),
    )?;
    if let Some(p) = &a.export_embeddings {
        let all: Vec<_> = train.iter().chain(&test).cloned().collect();
        write_file(p, embeddings_csv(&all))?;
    }
    if let Some(p) = &a.roc_csv {
        write_file(p, roc_csv(&report.verification))?;
    }
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    match &a.out {
        Some(p) => write_file(p, format!("{text}\n"))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_embed(mut cfg: RunConfig, a: EmbedArgs) -> Result<(), CliError> {
    if let Some(v) = a.data {
        cfg.paths.data_dir = v;
    }
    if let Some(v) = a.fold {
        cfg.train.fold = v;
    }
    let ck = a.checkpoint.unwrap_or_else(|| cfg.paths.checkpoint());
    let model = Model::load(&ck)?;
    let manifest = load_manifest(&cfg)?;
    let source = DirectorySource::new(&manifest);
    let ids: Vec<String> = match a.split {
        Split::All => manifest.individuals.iter().map(|e| e.individual_id.clone()).collect(),
        Split::Train => split_by_individual(&manifest, cfg.train.fold)?.0,
        Split::Test => split_by_individual(&manifest, cfg.train.fold)?.1,
    };
    let images = load_images(&manifest, &ids, &source)?;
    let db = build_database(&model, &images)?;
    let out = a.out.unwrap_or_else(|| cfg.paths.database());
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    save_database(&db, &out)?;
    println!(
        "database {}: {} records, {} individuals, dim {}, fingerprint {:016x}",
        out.display(),
        db.len(),
        db.individuals().len(),
        db.embedding_dim(),
        db.fingerprint()
    );
    Ok(())
}

fn cmd_match(cfg: RunConfig, a: MatchArgs) -> Result<(), CliError> {
    let ck = a.checkpoint.unwrap_or_else(|| cfg.paths.checkpoint());
    let model = Model::load(&ck)?;
    let db = load_database(&a.db.unwrap_or_else(|| cfg.paths.database()))?;
    if db.fingerprint() != model.fingerprint {
        return Err(RetrievalError::FingerprintMismatch {
            database: db.fingerprint(),
            model: model.fingerprint,
        }
        .into());
    }
    let query = read_image(&a.image, "query", "query")?;
    let v = model.embed_one(&query)?;
    println!("rank,individual_id,image_id,distance");
    for c in rank_individuals(&db, &v, a.k)? {
        println!("{},{},{},{}", c.rank, c.individual_id, c.image_id, c.distance);
    }
    Ok(())
}

fn cmd_serve(mut cfg: RunConfig, a: ServeArgs) -> Result<(), CliError> {
    if let Some(v) = a.bind {
        cfg.serve.bind = v;
    }
    if let Some(v) = a.static_dir {
        cfg.serve.static_dir = Some(v);
    }
    if let Some(v) = a.images_dir {
        cfg.serve.images_dir = Some(v);
    }
    if let Some(v) = a.pending_dir {
        cfg.serve.pending_dir = Some(v);
    }
    cfg.validate()?;
    let ck = a.checkpoint.unwrap_or_else(|| cfg.paths.checkpoint());
    let db_path = a.db.unwrap_or_else(|| cfg.paths.database());
    let model = Model::load(&ck)?;
    let db = load_database(&db_path)?;
    let sc = ServiceConfig {
        images_dir: cfg.serve.images_dir.clone().unwrap_or_else(|| cfg.paths.data_dir.clone()),
        pending_dir: cfg.serve.pending_dir.clone().unwrap_or_else(|| cfg.paths.run_dir.join("pending")),
        pending_ttl: Duration::from_secs(cfg.serve.pending_ttl_secs),
        static_dir: cfg.serve.static_dir.clone(),
    };
    let state = Arc::new(AppState::new(model, db, Some(db_path), sc)?);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&cfg.serve.bind)
            .await
            .map_err(|e| CliError::Runtime(format!("bind {}: {e}", cfg.serve.bind)))?;
        let addr = listener.local_addr().map_err(|e| CliError::Runtime(e.to_string()))?;
        println!("listening on http://{addr}");
        crate::service::serve(state, listener)
            .await
            .map_err(|e| CliError::Runtime(e.to_string()))
    })
}

fn cmd_ablate(mut cfg: RunConfig, a: AblateArgs) -> Result<(), CliError> {
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.data {
        cfg.paths.data_dir = v;
    }
    let manifest = load_manifest(&cfg)?;
    cfg.dataset.folds = manifest.fold_count;
    cfg.validate()?;
    let out = a.out.unwrap_or_else(|| cfg.paths.run_dir.join("ablation"));
    let axes = a.axes.unwrap_or_else(|| Axis::ALL.to_vec());
    let source = DirectorySource::new(&manifest);
    let tables = run_ablation(&manifest, &cfg.train_config(), &source, &axes, &out)?;
    let md = render_markdown(&tables);
    write_file(&out.join("ablation.md"), &md)?;
    write_file(
        &out.join("ablation.json"),
        serde_json::to_string_pretty(&tables).expect("tables serialize"),
    )?;
    print!("{md}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn list_and_range_parsing() {
        assert_eq!(parse_list("1,5,10").unwrap(), vec![1, 5, 10]);
        assert!(parse_list("1,x").is_err());
        assert_eq!(parse_range("1..5").unwrap(), vec![1, 2, 3, 4, 5]);
        assert_eq!(parse_range("1..=3").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_range("2,4").unwrap(), vec![2, 4]);
        assert!(parse_range("5..1").is_err());
    }

    #[test]
    fn enum_flags_use_config_spelling() {
        let cli = Cli::try_parse_from(["patternid", "train", "--loss", "contrastive", "--mining", "batch_hard"]).unwrap();
        match cli.command {
            Command::Train(a) => {
                assert_eq!(a.loss, Some(crate::mining::LossKind::Contrastive));
                assert_eq!(a.mining, Some(crate::mining::MiningStrategy::BatchHard));
            }
            _ => unreachable!(),
        }
        assert!(Cli::try_parse_from(["patternid", "train", "--mining", "hardest"]).is_err());
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(CliError::from(SynthError::Config("x".into())).exit_code(), EXIT_CONFIG);
        assert_eq!(CliError::from(SynthError::Manifest("x".into())).exit_code(), EXIT_DATA);
        assert_eq!(
            CliError::from(RetrievalError::FingerprintMismatch { database: 1, model: 2 }).exit_code(),
            EXIT_DATA
        );
        assert_eq!(CliError::from(NetError::NonFinite("x".into())).exit_code(), EXIT_RUNTIME);
        let nested = TrainError::Fold {
            fold: 2,
            source: Box::new(TrainError::Config("bad".into())),
        };
        let e = CliError::from(nested);
        assert_eq!(e.exit_code(), EXIT_CONFIG);
        assert!(e.to_string().contains("fold 2"));
    }
}

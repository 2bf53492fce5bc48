use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    generate_individual, pgm, render_view, sample_view_params, AugmentationLevel, GenerationConfig, ImageSample,
    SpotPattern, SynthError,
};
use crate::rng::{self, Stream};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PATTERNS_FILE: &str = "patterns.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub individuals: usize,
    pub views_per_individual: usize,
    /// (height, width)
    pub image_size: (usize, usize),
    pub seed: u64,
    pub folds: usize,
    pub generation: GenerationConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            individuals: 50,
            views_per_individual: 10,
            image_size: (64, 64),
            seed: 0,
            folds: 5,
            generation: GenerationConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.folds < 2 {
            return Err(SynthError::Config(format!("dataset.folds: {} < 2", self.folds)));
        }
        if self.individuals < self.folds {
            return Err(SynthError::Config(format!(
                "dataset.individuals: {} individuals cannot fill {} folds",
                self.individuals, self.folds
            )));
        }
        if self.views_per_individual < 3 {
            return Err(SynthError::Config(format!(
                "dataset.views_per_individual: {} < 3",
                self.views_per_individual
            )));
        }
        if self.image_size.0 < 16 || self.image_size.1 < 16 {
            return Err(SynthError::Config(format!(
                "dataset.image_size: {:?} is smaller than 16×16",
                self.image_size
            )));
        }
        self.generation.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndividualEntry {
    pub individual_id: String,
    pub image_count: usize,
    pub image_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    #[serde(skip)]
    pub root: PathBuf,
    pub seed: u64,
    pub image_size: (usize, usize),
    pub fold_count: usize,
    pub individuals: Vec<IndividualEntry>,
    pub folds: BTreeMap<String, usize>,
}

impl DatasetManifest {
    pub fn image_path(&self, individual_id: &str, image_id: &str) -> PathBuf {
        image_path(&self.root, individual_id, image_id)
    }

    pub fn individual(&self, id: &str) -> Option<&IndividualEntry> {
        self.individuals.iter().find(|e| e.individual_id == id)
    }

    pub fn image_count(&self) -> usize {
        self.individuals.iter().map(|e| e.image_count).sum()
    }

    /// All (individual_id, image_id) pairs of the given individuals, in
    /// manifest order.
    pub fn images_of(&self, ids: &[String]) -> Vec<(String, String)> {
        self.individuals
            .iter()
            .filter(|e| ids.contains(&e.individual_id))
            .flat_map(|e| e.image_ids.iter().map(move |i| (e.individual_id.clone(), i.clone())))
            .collect()
    }

    pub fn check(&self) -> Result<(), SynthError> {
        for e in &self.individuals {
            if e.image_count < 3 || e.image_count != e.image_ids.len() {
                return Err(SynthError::Manifest(format!(
                    "individual {} has {} images (need >= 3, listed {})",
                    e.individual_id,
                    e.image_count,
                    e.image_ids.len()
                )));
            }
            match self.folds.get(&e.individual_id) {
                Some(&f) if f < self.fold_count => {}
                _ => {
                    return Err(SynthError::Manifest(format!(
                        "individual {} has no valid fold",
                        e.individual_id
                    )))
                }
            }
        }
        if self.folds.len() != self.individuals.len() {
            return Err(SynthError::Manifest("fold map and individual list disagree".into()));
        }
        Ok(())
    }

    /// UTF-8 JSON with sorted keys.
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("manifest serializes");
        let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file).map_err(|e| SynthError::io(&file, e))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| SynthError::Manifest(format!("{}: {e}", file.display())))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(SynthError::Manifest(format!(
                "unsupported manifest schema version {}",
                m.schema_version
            )));
        }
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        m.check()?;
        Ok(m)
    }
}

pub fn image_path(root: &Path, individual_id: &str, image_id: &str) -> PathBuf {
    root.join("images").join(individual_id).join(format!("{image_id}.pgm"))
}

pub fn individual_id(index: usize) -> String {
    format!("ind-{index:04}")
}

pub fn image_id(individual: &str, view: usize) -> String {
    format!("{individual}_v{view:02}")
}

/// Camera-like view of an individual: extensive geometry (no mirror images)
/// plus lighting, noise and occlusion.
fn corpus_view_params(seed: u64, individual: usize, view: usize, size: (usize, usize)) -> super::RenderParams {
    let mut r = rng::stream(seed, Stream::Render, (individual as u64) << 16 | view as u64);
    let mut p = sample_view_params(&mut r, AugmentationLevel::Extensive, size);
    p.flip_h = false;
    p.flip_v = false;
    p
}

/// Generates patterns and rendered views; no file I/O.
pub fn generate_corpus(cfg: &DatasetConfig) -> Result<(Vec<SpotPattern>, Vec<Vec<ImageSample>>), SynthError> {
    cfg.validate()?;
    let mut patterns: Vec<SpotPattern> = Vec::with_capacity(cfg.individuals);
    for i in 0..cfg.individuals {
        let seed = rng::derive_seed(cfg.seed, Stream::Corpus, i as u64);
        let p = generate_individual(seed, &individual_id(i), &cfg.generation, &patterns)?;
        patterns.push(p);
    }
    let views = patterns
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            (0..cfg.views_per_individual)
                .map(|v| {
                    let params = corpus_view_params(cfg.seed, i, v, cfg.image_size);
                    render_view(p, &params, &image_id(&p.individual_id, v))
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((patterns, views))
}

/// Assigns individuals to folds: a seeded shuffle dealt round-robin, so fold
/// sizes differ by at most one.
pub fn assign_folds(ids: &[String], folds: usize, seed: u64) -> BTreeMap<String, usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut rng::stream(seed, Stream::Folds, 0));
    order
        .iter()
        .enumerate()
        .map(|(pos, &i)| (ids[i].clone(), pos % folds))
        .collect()
}

/// Writes the corpus under `root` and returns its manifest.
pub fn build_dataset(root: &Path, cfg: &DatasetConfig) -> Result<DatasetManifest, SynthError> {
    cfg.validate()?;
    let manifest_path = root.join(MANIFEST_FILE);
    if manifest_path.exists() {
        return Err(SynthError::DuplicateRoot(root.to_path_buf()));
    }
    let (patterns, views) = generate_corpus(cfg)?;
    for (p, imgs) in patterns.iter().zip(&views) {
        let dir = root.join("images").join(&p.individual_id);
        std::fs::create_dir_all(&dir).map_err(|e| SynthError::io(&dir, e))?;
        for img in imgs {
            let path = image_path(root, &img.individual_id, &img.image_id);
            pgm::write(&path, img.width, img.height, &img.pixels)?;
        }
    }
    let ids: Vec<String> = patterns.iter().map(|p| p.individual_id.clone()).collect();
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        root: root.to_path_buf(),
        seed: cfg.seed,
        image_size: cfg.image_size,
        fold_count: cfg.folds,
        individuals: patterns
            .iter()
            .zip(&views)
            .map(|(p, imgs)| IndividualEntry {
                individual_id: p.individual_id.clone(),
                image_count: imgs.len(),
                image_ids: imgs.iter().map(|i| i.image_id.clone()).collect(),
            })
            .collect(),
        folds: assign_folds(&ids, cfg.folds, cfg.seed),
    };
    manifest.check()?;
    let patterns_json = serde_json::to_value(&patterns).expect("patterns serialize");
    let path = root.join(PATTERNS_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&patterns_json).expect("value serializes"))
        .map_err(|e| SynthError::io(&path, e))?;
    std::fs::write(&manifest_path, manifest.to_json()).map_err(|e| SynthError::io(&manifest_path, e))?;
    Ok(manifest)
}

/// (train ids, test ids) for a fold; the test split is exactly that fold's
/// individuals.
pub fn split_by_individual(manifest: &DatasetManifest, fold: usize) -> Result<(Vec<String>, Vec<String>), SynthError> {
    if fold >= manifest.fold_count {
        return Err(SynthError::FoldOutOfRange {
            fold,
            folds: manifest.fold_count,
        });
    }
    let (test, train): (Vec<String>, Vec<String>) = manifest
        .individuals
        .iter()
        .map(|e| e.individual_id.clone())
        .partition(|id| manifest.folds[id] == fold);
    Ok((train, test))
}

/// Where training and evaluation read images from.
pub trait ImageSource: Send + Sync {
    fn load(&self, individual_id: &str, image_id: &str) -> Result<ImageSample, SynthError>;
}

/// Reads `<root>/images/<individual>/<image>.pgm`.
#[derive(Debug, Clone)]
pub struct DirectorySource {
    pub root: PathBuf,
}

impl DirectorySource {
    pub fn new(manifest: &DatasetManifest) -> Self {
        Self {
            root: manifest.root.clone(),
        }
    }
}

impl ImageSource for DirectorySource {
    fn load(&self, individual_id: &str, image_id: &str) -> Result<ImageSample, SynthError> {
        let path = image_path(&self.root, individual_id, image_id);
        let (width, height, pixels) = pgm::read(&path)?;
        Ok(ImageSample {
            individual_id: individual_id.to_string(),
            image_id: image_id.to_string(),
            height,
            width,
            pixels,
        })
    }
}

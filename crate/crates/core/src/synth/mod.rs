//! Synthetic spot-pattern corpus: individuals, rendered views, augmentation,
//! PGM storage and split-by-individual folds.

mod dataset;
pub mod pgm;
mod pattern;
mod render;

use std::path::{Path, PathBuf};

pub use dataset::{
    assign_folds, build_dataset, generate_corpus, image_id, image_path, individual_id, split_by_individual,
    DatasetConfig, DatasetManifest, DirectorySource, ImageSource, IndividualEntry, MANIFEST_FILE, PATTERNS_FILE,
};
pub use pattern::{
    center_distance, generate_individual, is_near_duplicate, GenerationConfig, Silhouette, Spot, SpotPattern,
};
pub use render::{
    augment_image, compose_warp, render_view, sample_view_components, sample_view_params, AugmentationLevel,
    Homography, Occluder, RenderParams, WarpComponents, EXTENSIVE_MAX_ROTATION_DEG, MAX_SHIFT_PX,
    SMALL_MAX_ROTATION_DEG,
};

/// One grayscale view of an individual.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSample {
    pub individual_id: String,
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major, `height * width` bytes.
    pub pixels: Vec<u8>,
}

impl ImageSample {
    pub fn to_pgm(&self) -> Vec<u8> {
        pgm::encode(self.width, self.height, &self.pixels)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("could not generate a distinct pattern for {individual_id}: every candidate nearly duplicates {colliding}")]
    Generation { individual_id: String, colliding: String },
    #[error("invalid render parameters: {0}")]
    Params(String),
    #[error("degenerate warp for {image_id}: silhouette lies entirely outside the frame")]
    Degenerate { image_id: String },
    #[error("dataset root {0} already holds a manifest")]
    DuplicateRoot(PathBuf),
    #[error("fold {fold} out of range (dataset has {folds} folds)")]
    FoldOutOfRange { fold: usize, folds: usize },
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error("bad PGM: {0}")]
    Pgm(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl SynthError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        SynthError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

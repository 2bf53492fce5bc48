//! Fully convolutional embedding network with analytic gradients, Adam, and
//! a versioned checkpoint format.

mod adam;
mod checkpoint;
mod layers;
mod params;

use std::path::{Path, PathBuf};

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointHeader, TensorEntry,
};
pub use layers::{backward, backward_with_input, conv_out, forward, Cache, MIN_BLOCK_INPUT};
pub use params::{
    init_params, preprocess, preprocess_batch, ConvParams, Gradients, ModelConfig, Parameters, Preprocess,
    INPUT_CHANNELS,
};

use rayon::prelude::*;

use crate::synth::ImageSample;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("input too small: block {block} receives a {height}×{width} map (minimum {min})", min = MIN_BLOCK_INPUT)]
    SpatialUnderflow { block: usize, height: usize, width: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint format error at byte {offset}: {reason}")]
    Checkpoint { offset: usize, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl NetError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        NetError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// A loaded checkpoint: config, parameters and the fingerprint of the
/// checkpoint bytes it came from.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters<f32>,
    pub fingerprint: u64,
}

impl Model {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetError> {
        let (params, config) = decode_checkpoint(bytes)?;
        Ok(Self {
            config,
            params,
            fingerprint: crate::rng::fnv1a64(bytes),
        })
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let bytes = std::fs::read(path).map_err(|e| NetError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Model from in-memory parameters; the fingerprint is that of the
    /// checkpoint they would serialize to.
    pub fn from_params(params: Parameters<f32>, config: ModelConfig) -> Result<Self, NetError> {
        let bytes = encode_checkpoint(&params, &config)?;
        Ok(Self {
            config,
            params,
            fingerprint: crate::rng::fnv1a64(&bytes),
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    /// Embeds each image with its own forward pass, so a vector never
    /// depends on which other images shared the call.
    pub fn embed(&self, images: &[&ImageSample]) -> Result<Vec<Vec<f32>>, NetError> {
        images
            .par_iter()
            .map(|img| {
                let batch = preprocess_batch(&[img])?;
                let (emb, _) = forward(&self.params, &self.config, &batch)?;
                Ok(emb.into_data())
            })
            .collect()
    }

    pub fn embed_one(&self, image: &ImageSample) -> Result<Vec<f32>, NetError> {
        Ok(self.embed(&[image])?.pop().expect("one image in, one row out"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_embedding_matches_single_forward() {
        let cfg = ModelConfig {
            embedding_dim: 16,
            ..Default::default()
        };
        let model = Model::from_params(init_params(&cfg, 1).unwrap(), cfg).unwrap();
        let imgs: Vec<ImageSample> = (0..70)
            .map(|i| ImageSample {
                individual_id: "a".into(),
                image_id: format!("{i}"),
                height: 32,
                width: 32,
                pixels: (0..1024).map(|p| ((p * 7 + i * 13) % 256) as u8).collect(),
            })
            .collect();
        let refs: Vec<&ImageSample> = imgs.iter().collect();
        let all = model.embed(&refs).unwrap();
        assert_eq!(all.len(), 70);
        for (i, img) in imgs.iter().enumerate().step_by(17) {
            let one = model.embed_one(img).unwrap();
            assert_eq!(one, all[i]);
        }
    }
}

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::NetError;
use crate::rng::{self, Stream};
use crate::synth::ImageSample;
use crate::tensor::{Scalar, Tensor};

/// How pixels are mapped to network inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preprocess {
    /// `pixel / 127.5 - 1`, i.e. [0, 255] onto [-1, 1].
    #[default]
    SymmetricUnit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Output channels of each 3×3 stride-2 conv + ReLU block.
    pub blocks: Vec<usize>,
    pub embedding_dim: usize,
    pub l2_normalize: bool,
    pub preprocess: Preprocess,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: vec![16, 32, 64, 128],
            embedding_dim: 256,
            l2_normalize: false,
            preprocess: Preprocess::SymmetricUnit,
        }
    }
}

pub const INPUT_CHANNELS: usize = 1;
pub const KERNEL: usize = 3;

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.blocks.is_empty() {
            return Err(NetError::Config("model.blocks: at least one conv block is required".into()));
        }
        if let Some(i) = self.blocks.iter().position(|&c| c == 0) {
            return Err(NetError::Config(format!("model.blocks[{i}]: channel count must be positive")));
        }
        if self.embedding_dim == 0 {
            return Err(NetError::Config("model.embedding_dim: must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        *self.blocks.last().expect("validated config has blocks")
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let mut c_in = INPUT_CHANNELS;
        let mut n = 0;
        for &c_out in &self.blocks {
            n += c_out * c_in * KERNEL * KERNEL + c_out;
            c_in = c_out;
        }
        n + self.embedding_dim * c_in + self.embedding_dim
    }

    /// Ordered (name, shape) list of every parameter tensor.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = INPUT_CHANNELS;
        for (i, &c_out) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.weight"), vec![c_out, c_in, KERNEL, KERNEL]));
            out.push((format!("block{i}.bias"), vec![c_out]));
            c_in = c_out;
        }
        out.push(("dense.weight".into(), vec![self.embedding_dim, c_in]));
        out.push(("dense.bias".into(), vec![self.embedding_dim]));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T: Scalar = f32> {
    /// `[out, in, 3, 3]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

/// Learned weights in a fixed order: conv blocks, then the dense layer.
/// Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T: Scalar = f32> {
    pub convs: Vec<ConvParams<T>>,
    /// `[embedding_dim, channels]`
    pub dense_weight: Tensor<T>,
    /// `[embedding_dim]`
    pub dense_bias: Tensor<T>,
}

pub type Gradients<T = f32> = Parameters<T>;

impl<T: Scalar> Parameters<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let shapes = config.tensor_shapes();
        let mut tensors = shapes.iter().map(|(_, s)| Tensor::zeros(s));
        let mut convs = Vec::with_capacity(config.blocks.len());
        for _ in &config.blocks {
            convs.push(ConvParams {
                weight: tensors.next().expect("shape list"),
                bias: tensors.next().expect("shape list"),
            });
        }
        Self {
            convs,
            dense_weight: tensors.next().expect("shape list"),
            dense_bias: tensors.next().expect("shape list"),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v: Vec<&Tensor<T>> = Vec::with_capacity(self.convs.len() * 2 + 2);
        for c in &self.convs {
            v.push(&c.weight);
            v.push(&c.bias);
        }
        v.push(&self.dense_weight);
        v.push(&self.dense_bias);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v: Vec<&mut Tensor<T>> = Vec::with_capacity(self.convs.len() * 2 + 2);
        for c in &mut self.convs {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
        }
        v.push(&mut self.dense_weight);
        v.push(&mut self.dense_bias);
        v
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Shape-congruence with the layout `config` prescribes.
    pub fn matches(&self, config: &ModelConfig) -> bool {
        let shapes = config.tensor_shapes();
        let tensors = self.tensors();
        shapes.len() == tensors.len() && shapes.iter().zip(tensors).all(|((_, s), t)| t.shape() == s.as_slice())
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters {
            convs: self
                .convs
                .iter()
                .map(|c| ConvParams {
                    weight: c.weight.cast(),
                    bias: c.bias.cast(),
                })
                .collect(),
            dense_weight: self.dense_weight.cast(),
            dense_bias: self.dense_bias.cast(),
        }
    }

    /// `self += other`, element-wise.
    pub fn accumulate(&mut self, other: &Parameters<T>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = *x + *y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }
}

/// He-normal conv kernels, `N(0, 1/fan_in)` dense weights, zero biases.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<Parameters<f32>, NetError> {
    config.validate()?;
    let mut rng = rng::stream(seed, Stream::Init, 0);
    let mut params = Parameters::<f32>::zeros(config);
    let mut c_in = INPUT_CHANNELS;
    for (conv, &c_out) in params.convs.iter_mut().zip(&config.blocks) {
        let fan_in = (c_in * KERNEL * KERNEL) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        for w in conv.weight.data_mut() {
            *w = normal.sample(&mut rng) as f32;
        }
        c_in = c_out;
    }
    let normal = Normal::new(0.0, (1.0 / c_in as f64).sqrt()).expect("positive std");
    for w in params.dense_weight.data_mut() {
        *w = normal.sample(&mut rng) as f32;
    }
    Ok(params)
}

/// `[1, H, W]` tensor with values `pixel / 127.5 - 1`.
pub fn preprocess(image: &ImageSample) -> Tensor<f32> {
    let data = image.pixels.iter().map(|&p| p as f32 / 127.5 - 1.0).collect();
    Tensor::from_vec(&[1, image.height, image.width], data).expect("image extents")
}

/// Stacks images into a `[B, 1, H, W]` batch.
pub fn preprocess_batch(images: &[&ImageSample]) -> Result<Tensor<f32>, NetError> {
    let first = images
        .first()
        .ok_or_else(|| NetError::Shape("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(NetError::Shape(format!(
                "image {} is {}×{}, batch is {h}×{w}",
                img.image_id, img.height, img.width
            )));
        }
        data.extend(preprocess(img).into_data());
    }
    Tensor::from_vec(&[images.len(), 1, h, w], data).map_err(|e| NetError::Shape(e.to_string()))
}

//! Forward and reverse-mode passes of the fixed layer stack:
//! `[conv3x3/s2 + ReLU] × n → global average pool → dense → optional l2`.
//!
//! Activations are kept channel-major (`[C, B, H, W]`) so each conv is a
//! single GEMM over the whole batch.

use super::params::{Gradients, ModelConfig, Parameters, KERNEL};
use super::NetError;
use crate::tensor::{gemm, Op, Scalar, Tensor};

const STRIDE: usize = 2;
const PAD: usize = 1;
/// Smallest spatial extent a block accepts as input.
pub const MIN_BLOCK_INPUT: usize = 2;
const NORM_FLOOR: f64 = 1e-12;

pub fn conv_out(extent: usize) -> usize {
    (extent + 2 * PAD - KERNEL) / STRIDE + 1
}

#[derive(Debug, Clone)]
struct BlockCache<T: Scalar> {
    in_channels: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    /// `[C_in*9, B*Ho*Wo]`
    cols: Vec<T>,
    /// post-ReLU output `[C_out, B*Ho*Wo]`
    out: Vec<T>,
}

/// Everything backward needs from a forward call.
#[derive(Debug, Clone)]
pub struct Cache<T: Scalar> {
    batch: usize,
    blocks: Vec<BlockCache<T>>,
    /// `[B, C]`
    pooled: Vec<T>,
    /// dense output before normalization, `[B, E]`
    dense_out: Vec<T>,
    /// per-row norms of `dense_out` when normalizing
    norms: Option<Vec<T>>,
    embedding_dim: usize,
}

impl<T: Scalar> Cache<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Sign pattern of every ReLU input (true = active). Finite-difference
    /// checks use it to detect kink crossings.
    pub fn relu_mask(&self) -> Vec<bool> {
        self.blocks
            .iter()
            .flat_map(|b| b.out.iter().map(|&v| v > T::zero()))
            .collect()
    }
}

fn im2col<T: Scalar>(x: &[T], c: usize, b: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let n = b * oh * ow;
    let mut cols = vec![T::zero(); c * KERNEL * KERNEL * n];
    for ci in 0..c {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ci * KERNEL + ky) * KERNEL + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for bi in 0..b {
                    let src = &x[(ci * b + bi) * h * w..(ci * b + bi + 1) * h * w];
                    for oy in 0..oh {
                        let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                        let drow = &mut dst[(bi * oh + oy) * ow..(bi * oh + oy + 1) * ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(cols: &[T], c: usize, b: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let n = b * oh * ow;
    let mut x = vec![T::zero(); c * b * h * w];
    for ci in 0..c {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ci * KERNEL + ky) * KERNEL + kx;
                let src = &cols[row * n..(row + 1) * n];
                for bi in 0..b {
                    let dst = &mut x[(ci * b + bi) * h * w..(ci * b + bi + 1) * h * w];
                    for oy in 0..oh {
                        let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[(bi * oh + oy) * ow..(bi * oh + oy + 1) * ow];
                        for (ox, &g) in srow.iter().enumerate() {
                            let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                            if ix >= 0 && ix < w as isize {
                                let d = &mut dst[iy as usize * w + ix as usize];
                                *d = *d + g;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Embeds a `[B, 1, H, W]` batch. Returns `[B, embedding_dim]` and the cache.
pub fn forward<T: Scalar>(
    params: &Parameters<T>,
    config: &ModelConfig,
    batch: &Tensor<T>,
) -> Result<(Tensor<T>, Cache<T>), NetError> {
    config.validate()?;
    if !params.matches(config) {
        return Err(NetError::Shape("parameters do not match the model config".into()));
    }
    let shape = batch.shape();
    if shape.len() != 4 || shape[1] != super::params::INPUT_CHANNELS {
        return Err(NetError::Shape(format!("expected a [B, 1, H, W] batch, got {shape:?}")));
    }
    let (b, mut h, mut w) = (shape[0], shape[2], shape[3]);
    let mut c = shape[1];
    // [1, B, H, W] and [B, 1, H, W] coincide in memory.
    let mut act: Vec<T> = batch.data().to_vec();
    let mut blocks = Vec::with_capacity(config.blocks.len());
    for (i, conv) in params.convs.iter().enumerate() {
        if h < MIN_BLOCK_INPUT || w < MIN_BLOCK_INPUT {
            return Err(NetError::SpatialUnderflow {
                block: i,
                height: h,
                width: w,
            });
        }
        let c_out = conv.weight.shape()[0];
        let (oh, ow) = (conv_out(h), conv_out(w));
        let n = b * oh * ow;
        let k = c * KERNEL * KERNEL;
        let cols = im2col(&act, c, b, h, w, oh, ow);
        let mut out = vec![T::zero(); c_out * n];
        for (co, row) in out.chunks_mut(n).enumerate() {
            row.fill(conv.bias.data()[co]);
        }
        gemm(c_out, k, n, conv.weight.data(), Op::N, &cols, Op::N, T::one(), &mut out);
        for v in out.iter_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        blocks.push(BlockCache {
            in_channels: c,
            in_h: h,
            in_w: w,
            out_h: oh,
            out_w: ow,
            cols,
            out: out.clone(),
        });
        act = out;
        c = c_out;
        h = oh;
        w = ow;
    }
    // global average pooling: [C, B, HW] -> [B, C]
    let hw = h * w;
    let inv_hw = T::lit(1.0 / hw as f64);
    let mut pooled = vec![T::zero(); b * c];
    for ci in 0..c {
        for bi in 0..b {
            let s: T = act[(ci * b + bi) * hw..(ci * b + bi + 1) * hw].iter().copied().sum();
            pooled[bi * c + ci] = s * inv_hw;
        }
    }
    let e = config.embedding_dim;
    let mut dense_out = vec![T::zero(); b * e];
    for row in dense_out.chunks_mut(e) {
        row.copy_from_slice(params.dense_bias.data());
    }
    gemm(b, c, e, &pooled, Op::N, params.dense_weight.data(), Op::T, T::one(), &mut dense_out);
    let (emb, norms) = if config.l2_normalize {
        let mut y = dense_out.clone();
        let mut norms = Vec::with_capacity(b);
        for row in y.chunks_mut(e) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::lit(NORM_FLOOR));
            for v in row.iter_mut() {
                *v = *v / n;
            }
            norms.push(n);
        }
        (y, Some(norms))
    } else {
        (dense_out.clone(), None)
    };
    let out = Tensor::from_vec(&[b, e], emb).map_err(|err| NetError::Shape(err.to_string()))?;
    if !out.all_finite() {
        return Err(NetError::NonFinite("forward produced a non-finite embedding".into()));
    }
    Ok((
        out,
        Cache {
            batch: b,
            blocks,
            pooled,
            dense_out,
            norms,
            embedding_dim: e,
        },
    ))
}

/// Gradients of all parameters given `dL/d embeddings`.
pub fn backward<T: Scalar>(
    params: &Parameters<T>,
    cache: &Cache<T>,
    upstream: &Tensor<T>,
) -> Result<Gradients<T>, NetError> {
    backward_impl(params, cache, upstream, false).map(|(g, _)| g)
}

/// As [`backward`], also returning `dL/d input` shaped `[B, 1, H, W]`.
pub fn backward_with_input<T: Scalar>(
    params: &Parameters<T>,
    cache: &Cache<T>,
    upstream: &Tensor<T>,
) -> Result<(Gradients<T>, Tensor<T>), NetError> {
    backward_impl(params, cache, upstream, true).map(|(g, x)| (g, x.expect("requested input gradient")))
}

fn backward_impl<T: Scalar>(
    params: &Parameters<T>,
    cache: &Cache<T>,
    upstream: &Tensor<T>,
    want_input: bool,
) -> Result<(Gradients<T>, Option<Tensor<T>>), NetError> {
    let (b, e) = (cache.batch, cache.embedding_dim);
    if upstream.shape() != [b, e] {
        return Err(NetError::Shape(format!(
            "upstream gradient {:?} does not match cached embeddings [{b}, {e}]",
            upstream.shape()
        )));
    }
    if params.convs.len() != cache.blocks.len() || params.dense_weight.shape()[0] != e {
        return Err(NetError::Shape("cache was produced by a different model".into()));
    }
    let mut grads = Parameters {
        convs: params
            .convs
            .iter()
            .map(|c| super::params::ConvParams {
                weight: Tensor::zeros(c.weight.shape()),
                bias: Tensor::zeros(c.bias.shape()),
            })
            .collect(),
        dense_weight: Tensor::zeros(params.dense_weight.shape()),
        dense_bias: Tensor::zeros(params.dense_bias.shape()),
    };

    // l2 normalization
    let d_dense: Vec<T> = match &cache.norms {
        Some(norms) => {
            let mut d = vec![T::zero(); b * e];
            for bi in 0..b {
                let x = &cache.dense_out[bi * e..(bi + 1) * e];
                let g = upstream.row(bi);
                let n = norms[bi];
                let y_dot_g: T = x.iter().zip(g).map(|(&xv, &gv)| xv / n * gv).sum();
                for j in 0..e {
                    d[bi * e + j] = (g[j] - x[j] / n * y_dot_g) / n;
                }
            }
            d
        }
        None => upstream.data().to_vec(),
    };

    // dense
    let c = params.dense_weight.shape()[1];
    gemm(e, b, c, &d_dense, Op::T, &cache.pooled, Op::N, T::zero(), grads.dense_weight.data_mut());
    for row in d_dense.chunks(e) {
        for (g, &d) in grads.dense_bias.data_mut().iter_mut().zip(row) {
            *g = *g + d;
        }
    }
    let mut d_pooled = vec![T::zero(); b * c];
    gemm(b, e, c, &d_dense, Op::N, params.dense_weight.data(), Op::N, T::zero(), &mut d_pooled);

    // global average pooling
    let last = cache.blocks.last().expect("validated config has blocks");
    let hw = last.out_h * last.out_w;
    let inv_hw = T::lit(1.0 / hw as f64);
    let mut d_act = vec![T::zero(); c * b * hw];
    for ci in 0..c {
        for bi in 0..b {
            let g = d_pooled[bi * c + ci] * inv_hw;
            d_act[(ci * b + bi) * hw..(ci * b + bi + 1) * hw].fill(g);
        }
    }

    // conv blocks, last to first
    let mut input_grad = None;
    for (i, (blk, conv)) in cache.blocks.iter().zip(&params.convs).enumerate().rev() {
        let c_out = conv.weight.shape()[0];
        let n = b * blk.out_h * blk.out_w;
        let k = blk.in_channels * KERNEL * KERNEL;
        for (d, &o) in d_act.iter_mut().zip(&blk.out) {
            if o <= T::zero() {
                *d = T::zero();
            }
        }
        let g = &mut grads.convs[i];
        gemm(c_out, n, k, &d_act, Op::N, &blk.cols, Op::T, T::zero(), g.weight.data_mut());
        for (co, row) in d_act.chunks(n).enumerate() {
            g.bias.data_mut()[co] = row.iter().copied().sum();
        }
        if i == 0 && !want_input {
            break;
        }
        let mut d_cols = vec![T::zero(); k * n];
        gemm(k, c_out, n, conv.weight.data(), Op::T, &d_act, Op::N, T::zero(), &mut d_cols);
        let dx = col2im(&d_cols, blk.in_channels, b, blk.in_h, blk.in_w, blk.out_h, blk.out_w);
        if i == 0 {
            input_grad = Some(
                Tensor::from_vec(&[b, 1, blk.in_h, blk.in_w], dx).map_err(|err| NetError::Shape(err.to_string()))?,
            );
        } else {
            d_act = dx;
        }
    }
    Ok((grads, input_grad))
}

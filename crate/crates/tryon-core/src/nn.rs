//! Denoising-network building blocks: sinusoidal timestep embedding,
//! residual convolution blocks, self-attention transformer blocks, and
//! stride-2 down / nearest-up resampling.
//!
//! The transformer block carries self-attention only — there is no context
//! input and no cross-attention, so the block's parameter budget is
//! dominated by the four square projections q, k, v, out (~4c² per block).

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{ops, Tensor};

/// Group-norm epsilon used by every block.
pub const NORM_EPS: f64 = 1e-6;

/// Channels per normalization group. Statistics are position-local, so the
/// convolutional path stays strictly local in space.
pub const NORM_GROUP_SIZE: usize = 8;

pub fn norm_groups(channels: usize) -> usize {
    assert!(
        channels % NORM_GROUP_SIZE == 0,
        "block widths must be multiples of {NORM_GROUP_SIZE} (got {channels})"
    );
    channels / NORM_GROUP_SIZE
}

/// Per-channel affine for a normalization layer.
#[derive(Clone)]
pub struct Affine {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl Affine {
    pub fn identity(channels: usize) -> Affine {
        Affine { gamma: Tensor::full(&[channels], 1.0), beta: Tensor::zeros(&[channels]) }
    }
}

/// Convolution weight + bias.
#[derive(Clone)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv {
    /// Kaiming-style init: N(0, 1/fan_in) weights, zero bias.
    pub fn init(out_c: usize, in_c: usize, k: usize, stream: &mut Stream) -> Conv {
        let fan_in = (in_c * k * k) as f64;
        let std = (1.0 / fan_in).sqrt();
        Conv {
            weight: ops::scale(&Tensor::randn(&[out_c, in_c, k, k], stream), std),
            bias: Tensor::zeros(&[out_c]),
        }
    }

    pub fn init_scaled(out_c: usize, in_c: usize, k: usize, std: f64, stream: &mut Stream) -> Conv {
        Conv {
            weight: ops::scale(&Tensor::randn(&[out_c, in_c, k, k], stream), std),
            bias: Tensor::zeros(&[out_c]),
        }
    }
}

/// Linear weight `[in, out]` + bias.
#[derive(Clone)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn init(in_f: usize, out_f: usize, stream: &mut Stream) -> LinearLayer {
        let std = (1.0 / in_f as f64).sqrt();
        LinearLayer {
            weight: ops::scale(&Tensor::randn(&[in_f, out_f], stream), std),
            bias: Tensor::zeros(&[out_f]),
        }
    }
}

// ── timestep embedding ───────────────────────────────────────────────

pub const MAX_PERIOD: f64 = 10_000.0;

/// Sinusoidal embedding of an integer timestep: first half sine, second
/// half cosine of `t / MAX_PERIOD^(2i/dim)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Tensor> {
    if dim % 2 != 0 {
        return Err(Error::invalid("timestep_embedding", format!("odd dim {dim}")));
    }
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp();
        let angle = t as f64 * freq;
        data[i] = angle.sin();
        data[half + i] = angle.cos();
    }
    Ok(Tensor::from_vec(data, vec![dim]))
}

/// Stacked embeddings for a batch of timesteps: `[b, dim]`.
pub fn timestep_embedding_batch(ts: &[usize], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend_from_slice(timestep_embedding(t, dim)?.data());
    }
    Ok(Tensor::from_vec(data, vec![ts.len(), dim]))
}

// ── residual block ───────────────────────────────────────────────────

/// Residual block parameters. The 1x1 skip projection exists exactly when
/// the channel count changes.
#[derive(Clone)]
pub struct ResBlockParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub norm1: Affine,
    pub conv1: Conv,
    pub temb_proj: LinearLayer,
    pub norm2: Affine,
    pub conv2: Conv,
    pub skip: Option<Conv>,
}

impl ResBlockParams {
    pub fn init(in_c: usize, out_c: usize, temb_dim: usize, stream: &mut Stream) -> ResBlockParams {
        ResBlockParams {
            in_channels: in_c,
            out_channels: out_c,
            norm1: Affine::identity(in_c),
            conv1: Conv::init(out_c, in_c, 3, stream),
            temb_proj: LinearLayer::init(temb_dim, out_c, stream),
            norm2: Affine::identity(out_c),
            conv2: Conv::init(out_c, out_c, 3, stream),
            skip: (in_c != out_c).then(|| Conv::init(out_c, in_c, 1, stream)),
        }
    }
}

/// `skip(x) + conv2(act(norm2(conv1(act(norm1(x))) + proj(temb))))`.
/// Spatial extents are preserved; `temb` is `[b, temb_dim]`.
pub fn res_block(x: &Tensor, temb: &Tensor, p: &ResBlockParams) -> Result<Tensor> {
    if x.shape().len() != 4 || x.shape()[1] != p.in_channels {
        return Err(Error::invalid(
            "res_block",
            format!("input {:?} does not carry {} channels", x.shape(), p.in_channels),
        ));
    }
    let h = ops::group_norm(x, norm_groups(p.in_channels), &p.norm1.gamma, &p.norm1.beta, NORM_EPS)?;
    let h = ops::silu(&h);
    let h = ops::conv2d(&h, &p.conv1.weight, Some(&p.conv1.bias), 1, 1)?;

    let t = ops::linear(&ops::silu(temb), &p.temb_proj.weight, Some(&p.temb_proj.bias))?;
    let h = ops::add_channel_bias(&h, &t)?;

    let h = ops::group_norm(&h, norm_groups(p.out_channels), &p.norm2.gamma, &p.norm2.beta, NORM_EPS)?;
    let h = ops::silu(&h);
    let h = ops::conv2d(&h, &p.conv2.weight, Some(&p.conv2.bias), 1, 1)?;

    let shortcut = match &p.skip {
        Some(s) => ops::conv2d(x, &s.weight, Some(&s.bias), 1, 0)?,
        None => x.clone(),
    };
    ops::add(&shortcut, &h)
}

// ── self-attention transformer block ─────────────────────────────────

/// Self-attention-only transformer block parameters: pre-norm, square
/// q/k/v projections without bias, output projection with bias, then a
/// second norm and a gated feed-forward. No context input exists.
#[derive(Clone)]
pub struct AttnBlockParams {
    pub channels: usize,
    pub heads: usize,
    pub norm: Affine,
    pub to_q: Tensor,
    pub to_k: Tensor,
    pub to_v: Tensor,
    pub to_out_w: Tensor,
    pub to_out_b: Tensor,
    pub norm_ff: Affine,
    /// First feed-forward linear produces `2 * FF_EXPANSION * c` channels;
    /// half gates the other half through SiLU.
    pub ff_w1: LinearLayer,
    pub ff_w2: LinearLayer,
}

pub const FF_EXPANSION: usize = 4;

impl AttnBlockParams {
    pub fn init(channels: usize, heads: usize, stream: &mut Stream) -> AttnBlockParams {
        let c = channels;
        let std = (1.0 / c as f64).sqrt();
        let hidden = FF_EXPANSION * c;
        AttnBlockParams {
            channels: c,
            heads,
            norm: Affine::identity(c),
            to_q: ops::scale(&Tensor::randn(&[c, c], stream), std),
            to_k: ops::scale(&Tensor::randn(&[c, c], stream), std),
            to_v: ops::scale(&Tensor::randn(&[c, c], stream), std),
            to_out_w: ops::scale(&Tensor::randn(&[c, c], stream), std),
            to_out_b: Tensor::zeros(&[c]),
            norm_ff: Affine::identity(c),
            ff_w1: LinearLayer::init(c, 2 * hidden, stream),
            ff_w2: LinearLayer::init(hidden, c, stream),
        }
    }
}

/// Multi-head self-attention over the `h*w` flattened positions, followed by
/// a gated feed-forward; a residual wraps each half. Softmax runs over the
/// key axis with `1/sqrt(c/heads)` scaling.
pub fn self_attention_block(x: &Tensor, p: &AttnBlockParams) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 4 || xs[1] != p.channels {
        return Err(Error::invalid(
            "self_attention_block",
            format!("input {:?} does not carry {} channels", xs, p.channels),
        ));
    }
    let (b, c, hh, ww) = (xs[0], xs[1], xs[2], xs[3]);
    if c % p.heads != 0 {
        return Err(Error::invalid(
            "self_attention_block",
            format!("channels {c} not divisible by {} heads", p.heads),
        ));
    }
    let tokens = hh * ww;
    let dh = c / p.heads;

    // attention half
    let normed = ops::group_norm(x, norm_groups(c), &p.norm.gamma, &p.norm.beta, NORM_EPS)?;
    let seq = ops::permute(&ops::reshape(&normed, &[b, c, tokens])?, &[0, 2, 1])?; // [b, t, c]
    let q = split_heads(&ops::linear(&seq, &p.to_q, None)?, b, tokens, p.heads, dh)?;
    let k = split_heads(&ops::linear(&seq, &p.to_k, None)?, b, tokens, p.heads, dh)?;
    let v = split_heads(&ops::linear(&seq, &p.to_v, None)?, b, tokens, p.heads, dh)?;

    let scores = ops::matmul(&q, &ops::permute(&k, &[0, 1, 3, 2])?)?;
    let weights = ops::softmax(&ops::scale(&scores, 1.0 / (dh as f64).sqrt()), 3)?;
    let mixed = ops::matmul(&weights, &v)?; // [b, heads, t, dh]

    let merged = ops::reshape(&ops::permute(&mixed, &[0, 2, 1, 3])?, &[b, tokens, c])?;
    let attn_out = ops::linear(&merged, &p.to_out_w, Some(&p.to_out_b))?;
    let attn_out = ops::reshape(&ops::permute(&attn_out, &[0, 2, 1])?, &[b, c, hh, ww])?;
    let x = ops::add(x, &attn_out)?;

    // feed-forward half
    let normed = ops::group_norm(&x, norm_groups(c), &p.norm_ff.gamma, &p.norm_ff.beta, NORM_EPS)?;
    let seq = ops::permute(&ops::reshape(&normed, &[b, c, tokens])?, &[0, 2, 1])?;
    let hidden = ops::linear(&seq, &p.ff_w1.weight, Some(&p.ff_w1.bias))?;
    let parts = ops::split(&hidden, &[FF_EXPANSION * c, FF_EXPANSION * c], 2)?;
    let gated = ops::mul(&parts[0], &ops::silu(&parts[1]))?;
    let ff_out = ops::linear(&gated, &p.ff_w2.weight, Some(&p.ff_w2.bias))?;
    let ff_out = ops::reshape(&ops::permute(&ff_out, &[0, 2, 1])?, &[b, c, hh, ww])?;
    ops::add(&x, &ff_out)
}

/// `[b, t, c]` -> `[b, heads, t, dh]`.
fn split_heads(x: &Tensor, b: usize, t: usize, heads: usize, dh: usize) -> Result<Tensor> {
    ops::permute(&ops::reshape(x, &[b, t, heads, dh])?, &[0, 2, 1, 3])
}

// ── resampling blocks ────────────────────────────────────────────────

/// Stride-2 3x3 convolution; halves both spatial extents. Extents must be even.
pub fn downsample(x: &Tensor, conv: &Conv) -> Result<Tensor> {
    let xs = x.shape();
    if xs[2] % 2 != 0 || xs[3] % 2 != 0 {
        return Err(Error::invalid(
            "downsample",
            format!("odd spatial extents {}x{}", xs[2], xs[3]),
        ));
    }
    ops::conv2d(x, &conv.weight, Some(&conv.bias), 2, 1)
}

/// Nearest-neighbor x2 followed by a 3x3 convolution; doubles both extents.
pub fn upsample(x: &Tensor, conv: &Conv) -> Result<Tensor> {
    let up = ops::upsample_nearest(x, 2)?;
    ops::conv2d(&up, &conv.weight, Some(&conv.bias), 1, 1)
}

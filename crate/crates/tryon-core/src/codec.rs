//! Image <-> latent codec: 4 channels at 1/8 spatial resolution.
//!
//! Two interchangeable modes sit behind one interface. The analytic codec
//! is a fixed linear map (8x8 average pooling plus an orthonormal channel
//! mixing built from signed-half Hadamard columns) whose decode inverts its
//! encode on pooled content — handy for exact tests and as a frozen codec
//! for end-to-end runs. The learned codec is a small convolutional
//! autoencoder trained with plain reconstruction MSE; no KL term, no
//! stochastic sampling — try-on training never touches codec weights.

use crate::error::{Error, Result};
use crate::nn::Conv;
use crate::optim::AdamW;
use crate::params::{join, ParamWalk};
use crate::rng::{Purpose, Stream};
use crate::tensor::{backward, ops, Tape, Tensor};

/// Spatial reduction factor.
pub const DOWNSCALE: usize = 8;
/// Latent channel count.
pub const LATENT_CHANNELS: usize = 4;

/// Orthonormal 4x3 channel mixing: three mutually orthogonal sign columns
/// of the order-4 Hadamard matrix, scaled by 1/2. `MIX^T * MIX = I`.
const MIX: [[f64; 3]; 4] = [
    [0.5, 0.5, 0.5],
    [-0.5, 0.5, -0.5],
    [0.5, -0.5, -0.5],
    [-0.5, -0.5, 0.5],
];

/// Convolutional autoencoder parameters: three stride-2 encoder stages and
/// a mirrored decoder.
#[derive(Clone)]
pub struct LearnedCodecParams {
    pub widths: [usize; 3],
    pub enc: Vec<Conv>,
    pub dec: Vec<Conv>,
}

impl LearnedCodecParams {
    pub fn init(widths: [usize; 3], seed: u64) -> LearnedCodecParams {
        let mut s = Stream::derive(seed, Purpose::Init, 0);
        let [w0, w1, w2] = widths;
        LearnedCodecParams {
            widths,
            enc: vec![
                Conv::init(w0, 3, 3, &mut s),
                Conv::init(w1, w0, 3, &mut s),
                Conv::init(w2, w1, 3, &mut s),
                Conv::init(LATENT_CHANNELS, w2, 3, &mut s),
            ],
            dec: vec![
                Conv::init(w2, LATENT_CHANNELS, 3, &mut s),
                Conv::init(w1, w2, 3, &mut s),
                Conv::init(w0, w1, 3, &mut s),
                Conv::init(3, w0, 3, &mut s),
            ],
        }
    }
}

impl ParamWalk for LearnedCodecParams {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.enc.for_each(&join(prefix, "enc"), f);
        self.dec.for_each(&join(prefix, "dec"), f);
    }

    fn map(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor) -> Tensor) -> Self {
        LearnedCodecParams {
            widths: self.widths,
            enc: self.enc.map(&join(prefix, "enc"), f),
            dec: self.dec.map(&join(prefix, "dec"), f),
        }
    }
}

/// The codec: analytic (fixed) or learned (trained autoencoder).
#[derive(Clone)]
pub enum Codec {
    Analytic,
    Learned(LearnedCodecParams),
}

impl Codec {
    pub fn mode_name(&self) -> &'static str {
        match self {
            Codec::Analytic => "analytic",
            Codec::Learned(_) => "learned",
        }
    }

    /// `[b, 3, H, W]` -> `[b, 4, H/8, W/8]`. Extents must divide by 8;
    /// pixel values are expected in [-1, 1].
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let s = image.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::invalid("encode", format!("expected [b,3,H,W], got {s:?}")));
        }
        if s[2] % DOWNSCALE != 0 || s[3] % DOWNSCALE != 0 {
            return Err(Error::invalid(
                "encode",
                format!("extents {}x{} not divisible by {DOWNSCALE}", s[2], s[3]),
            ));
        }
        match self {
            Codec::Analytic => {
                let pooled = ops::avg_pool(image, DOWNSCALE)?;
                mix_channels(&pooled)
            }
            Codec::Learned(p) => {
                let mut h = image.clone();
                for (i, conv) in p.enc.iter().enumerate() {
                    let stride = if i < 3 { 2 } else { 1 };
                    h = ops::conv2d(&h, &conv.weight, Some(&conv.bias), stride, 1)?;
                    if i < 3 {
                        h = ops::silu(&h);
                    }
                }
                Ok(h)
            }
        }
    }

    /// `[b, 4, h, w]` -> `[b, 3, 8h, 8w]`, clamped to [-1, 1].
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let s = latent.shape();
        if s.len() != 4 || s[1] != LATENT_CHANNELS {
            return Err(Error::invalid("decode", format!("expected [b,4,h,w], got {s:?}")));
        }
        match self {
            Codec::Analytic => {
                let pooled = unmix_channels(latent)?;
                let img = ops::upsample_nearest(&pooled, DOWNSCALE)?;
                Ok(ops::clamp(&img, -1.0, 1.0))
            }
            Codec::Learned(p) => {
                let mut h = latent.clone();
                for (i, conv) in p.dec.iter().enumerate() {
                    if i > 0 {
                        h = ops::upsample_nearest(&h, 2)?;
                    }
                    h = ops::conv2d(&h, &conv.weight, Some(&conv.bias), 1, 1)?;
                    if i < 3 {
                        h = ops::silu(&h);
                    }
                }
                Ok(ops::clamp(&h, -1.0, 1.0))
            }
        }
    }
}

/// rgb -> 4 latent channels through `MIX`.
fn mix_channels(pooled: &Tensor) -> Result<Tensor> {
    let s = pooled.shape();
    let (b, pos) = (s[0], s[2] * s[3]);
    let mut data = vec![0.0; b * LATENT_CHANNELS * pos];
    let src = pooled.data();
    for n in 0..b {
        for (lc, row) in MIX.iter().enumerate() {
            let dst = (n * LATENT_CHANNELS + lc) * pos;
            for p in 0..pos {
                let mut acc = 0.0;
                for (rgb, coef) in row.iter().enumerate() {
                    acc += coef * src[(n * 3 + rgb) * pos + p];
                }
                data[dst + p] = acc;
            }
        }
    }
    Ok(Tensor::from_vec(data, vec![b, LATENT_CHANNELS, s[2], s[3]]))
}

/// 4 latent channels -> rgb through `MIX^T`.
fn unmix_channels(latent: &Tensor) -> Result<Tensor> {
    let s = latent.shape();
    let (b, pos) = (s[0], s[2] * s[3]);
    let mut data = vec![0.0; b * 3 * pos];
    let src = latent.data();
    for n in 0..b {
        for rgb in 0..3 {
            let dst = (n * 3 + rgb) * pos;
            for p in 0..pos {
                let mut acc = 0.0;
                for (lc, row) in MIX.iter().enumerate() {
                    acc += row[rgb] * src[(n * LATENT_CHANNELS + lc) * pos + p];
                }
                data[dst + p] = acc;
            }
        }
    }
    Ok(Tensor::from_vec(data, vec![b, 3, s[2], s[3]]))
}

/// Downsample a `[b, 1, H, W]` mask to latent resolution by nearest
/// neighbor, then re-binarize at 0.5.
pub fn downsample_mask(mask: &Tensor) -> Result<Tensor> {
    let s = mask.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::invalid("downsample_mask", format!("expected [b,1,H,W], got {s:?}")));
    }
    if s[2] % DOWNSCALE != 0 || s[3] % DOWNSCALE != 0 {
        return Err(Error::invalid("downsample_mask", "extents not divisible by 8"));
    }
    let (b, h, w) = (s[0], s[2] / DOWNSCALE, s[3] / DOWNSCALE);
    let mut data = vec![0.0; b * h * w];
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let v = mask.data()[(n * s[2] + y * DOWNSCALE) * s[3] + x * DOWNSCALE];
                data[(n * h + y) * w + x] = if v >= 0.5 { 1.0 } else { 0.0 };
            }
        }
    }
    Ok(Tensor::from_vec(data, vec![b, 1, h, w]))
}

/// Reconstruction-training outcome.
pub struct CodecTraining {
    pub params: LearnedCodecParams,
    pub losses: Vec<f64>,
    pub best_loss: f64,
}

/// Train the learned codec on reconstruction MSE. Deterministic from
/// `seed`; returns the best checkpoint seen. Fails on a non-finite loss.
pub fn train_codec(
    images: &[Tensor],
    widths: [usize; 3],
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<CodecTraining> {
    if images.is_empty() {
        return Err(Error::invalid("train_codec", "empty dataset"));
    }
    let mut params = LearnedCodecParams::init(widths, seed);
    let mut opt = AdamW::new(lr, 0.0);
    let mut losses = Vec::with_capacity(steps);
    let mut best_loss = f64::INFINITY;
    let mut best = params.clone();

    for step in 0..steps {
        let mut pick = Stream::derive(seed, Purpose::BatchIndices, step as u64);
        let chosen: Vec<&Tensor> =
            (0..batch.min(images.len())).map(|_| &images[pick.below(images.len())]).collect();
        let x = ops::concat(&chosen, 0)?;

        let tape = Tape::new();
        let tracked = params.map("", &mut |_, t| tape.watch(t));
        let codec = Codec::Learned(tracked.clone());
        let z = codec.encode(&x)?;
        let rec = codec.decode(&z)?;
        let loss = ops::mse(&rec, &x)?;
        let loss_val = loss.item();
        if !loss_val.is_finite() {
            return Err(Error::NonFiniteLoss { step: step as u64, value: loss_val });
        }
        losses.push(loss_val);

        let grads = backward(&loss)?;
        let tracked_map = tracked.to_map();
        opt.begin_step();
        params = params.map("", &mut |name, old| {
            match grads.wrt(&tracked_map[name]) {
                Some(g) => opt.update(name, old, g.data()),
                None => old.clone(),
            }
        });

        if loss_val < best_loss {
            best_loss = loss_val;
            best = params.clone();
        }
    }
    Ok(CodecTraining { params: best, losses, best_loss })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Block-constant test image with dyadic pixel values (multiples of
    /// 1/64), for which the analytic roundtrip is exact in f64.
    fn block_constant_image(b: usize, bh: usize, bw: usize, seed: u64) -> Tensor {
        let mut s = Stream::derive(seed, Purpose::Init, 7);
        let (h, w) = (bh * DOWNSCALE, bw * DOWNSCALE);
        let mut data = vec![0.0; b * 3 * h * w];
        for n in 0..b {
            for c in 0..3 {
                for by in 0..bh {
                    for bx in 0..bw {
                        let v = (s.below(129) as f64 - 64.0) / 64.0;
                        for y in 0..DOWNSCALE {
                            for x in 0..DOWNSCALE {
                                data[((n * 3 + c) * h + by * DOWNSCALE + y) * w
                                    + bx * DOWNSCALE
                                    + x] = v;
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_vec(data, vec![b, 3, h, w])
    }

    #[test]
    fn shapes_contract() {
        let img = Tensor::zeros(&[1, 3, 128, 96]);
        let z = Codec::Analytic.encode(&img).unwrap();
        assert_eq!(z.shape(), &[1, 4, 16, 12]);
        let back = Codec::Analytic.decode(&Tensor::zeros(&[1, 4, 16, 12])).unwrap();
        assert_eq!(back.shape(), &[1, 3, 128, 96]);

        let learned = Codec::Learned(LearnedCodecParams::init([8, 16, 16], 0));
        let z = learned.encode(&img).unwrap();
        assert_eq!(z.shape(), &[1, 4, 16, 12]);
        assert_eq!(learned.decode(&z).unwrap().shape(), &[1, 3, 128, 96]);
    }

    #[test]
    fn indivisible_extents_rejected() {
        let img = Tensor::zeros(&[1, 3, 100, 96]);
        assert!(Codec::Analytic.encode(&img).is_err());
        let bad = Tensor::zeros(&[1, 5, 16, 12]);
        assert!(Codec::Analytic.decode(&bad).is_err());
    }

    #[test]
    fn constant_image_gives_mix_column_sums() {
        let img = Tensor::full(&[1, 3, 16, 16], 0.5);
        let z = Codec::Analytic.encode(&img).unwrap();
        for (lc, row) in MIX.iter().enumerate() {
            let expect = 0.5 * row.iter().sum::<f64>();
            for p in 0..4 {
                assert_eq!(z.data()[lc * 4 + p], expect);
            }
        }
    }

    #[test]
    fn zero_latent_decodes_to_zero_image() {
        let img = Codec::Analytic.decode(&Tensor::zeros(&[1, 4, 2, 2])).unwrap();
        assert!(img.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn analytic_roundtrip_exact_on_block_constant_images() {
        let img = block_constant_image(2, 3, 4, 42);
        let z = Codec::Analytic.encode(&img).unwrap();
        let rec = Codec::Analytic.decode(&z).unwrap();
        assert_eq!(rec.data(), img.data(), "roundtrip must be bit-exact");
    }

    #[test]
    fn analytic_encode_is_linear() {
        let mut s = Stream::derive(9, Purpose::Init, 3);
        let x = Tensor::randn(&[1, 3, 16, 16], &mut s);
        let y = Tensor::randn(&[1, 3, 16, 16], &mut s);
        let (a, b) = (0.3, -1.7);
        let lhs = Codec::Analytic
            .encode(&ops::add(&ops::scale(&x, a), &ops::scale(&y, b)).unwrap())
            .unwrap();
        let rhs = ops::add(
            &ops::scale(&Codec::Analytic.encode(&x).unwrap(), a),
            &ops::scale(&Codec::Analytic.encode(&y).unwrap(), b),
        )
        .unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - r).abs() < 1e-12);
        }
    }

    #[test]
    fn mixing_is_orthonormal() {
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..4).map(|r| MIX[r][i] * MIX[r][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_eq!(dot, expect, "MIX^T MIX [{i}][{j}]");
            }
        }
    }

    #[test]
    fn mask_downsampling_binarizes() {
        let mut data = vec![0.0; 16 * 16];
        for y in 0..8 {
            for x in 0..16 {
                data[y * 16 + x] = 1.0;
            }
        }
        let m = Tensor::from_vec(data, vec![1, 1, 16, 16]);
        let d = downsample_mask(&m).unwrap();
        assert_eq!(d.shape(), &[1, 1, 2, 2]);
        assert_eq!(d.data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn codec_training_reduces_loss_and_is_deterministic() {
        // tiny images, tiny net: enough to watch the loss fall
        let images: Vec<Tensor> =
            (0..6).map(|i| block_constant_image(1, 2, 2, 100 + i)).collect();
        let run = |seed| train_codec(&images, [8, 8, 8], 60, 2, 3e-3, seed).unwrap();
        let a = run(5);
        let b = run(5);
        assert_eq!(a.losses, b.losses, "same seed must give identical trajectories");
        let head: f64 = a.losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = a.losses[a.losses.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "loss should fall: head {head} tail {tail}");
        assert!(train_codec(&[], [8, 8, 8], 1, 1, 1e-3, 0).is_err());
    }
}

//! End-to-end try-on: agnostic-image construction, condition assembly by
//! spatial concatenation, the denoising loop with classifier-free guidance,
//! latent split, decode, paste-back compositing — and the training loop
//! that fine-tunes the UNet on synthetic pairs.
//!
//! Layout conventions: the person latent occupies the TOP half of the
//! height-concatenated tensor, the garment latent the BOTTOM half. Masks
//! store 1 = region to regenerate; the keep-mask used internally is its
//! complement.

use crate::codec::{downsample_mask, Codec};
use crate::diffusion::{
    add_noise_batch, cfg_combine, ddim_step, ldm_loss, DreamLambda, NoiseSchedule, SamplerConfig,
};
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::params::ParamWalk;
use crate::rng::{Purpose, Stream};
use crate::synth::SamplePair;
use crate::tensor::{backward, ops, Tape, Tensor};
use crate::unet::{condition_dropout, unet_forward, TrainableSet, UNetParams, PACKED_CHANNELS};

/// A try-on request carries exactly three content inputs — person image,
/// garment reference, inpaint mask — plus sampler knobs. There is nowhere
/// to put pose maps, parsing maps, or text.
#[derive(Clone)]
pub struct TryOnRequest {
    /// `[1, 3, H, W]` in [-1, 1].
    pub person: Tensor,
    /// `[1, 3, H, W]` in [-1, 1]; in-shop garment or a second worn image.
    pub garment: Tensor,
    /// `[1, 1, H, W]` with values in {0, 1}; 1 = regenerate this pixel.
    pub mask: Tensor,
    pub sampler: SamplerConfig,
}

pub struct TryOnResult {
    /// Final composited image `[1, 3, H, W]`.
    pub image: Tensor,
    /// Decoded person half before paste-back.
    pub raw_decoded: Tensor,
    /// Intermediate latents, present when tracing was requested.
    pub step_latents: Option<Vec<Tensor>>,
}

fn check_binary_mask(mask: &Tensor) -> Result<()> {
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("mask", "mask must be binary (0/1)"));
    }
    Ok(())
}

/// Keep-mask application: zero the pixels under the inpaint region,
/// preserve the rest. `mask` is `[b, 1, H, W]`, image `[b, 3, H, W]`.
pub fn make_agnostic(person: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (ps, ms) = (person.shape(), mask.shape());
    if ps.len() != 4 || ms.len() != 4 || ms[1] != 1 || ps[0] != ms[0] || ps[2..] != ms[2..] {
        return Err(Error::ShapeMismatch {
            op: "make_agnostic",
            lhs: ps.to_vec(),
            rhs: ms.to_vec(),
        });
    }
    check_binary_mask(mask)?;
    let (b, c, pos) = (ps[0], ps[1], ps[2] * ps[3]);
    let mut data = person.data().to_vec();
    for n in 0..b {
        for ch in 0..c {
            let base = (n * c + ch) * pos;
            for p in 0..pos {
                if mask.data()[n * pos + p] == 1.0 {
                    data[base + p] = 0.0;
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, ps.to_vec()))
}

/// Encode both inputs with the one shared codec and stack them along the
/// height axis. Returns `(X_c [b,4,2h,w], m_c [b,1,2h,w])`; the garment
/// half of `m_c` is all zeros — that half is never inpainted.
pub fn build_condition(
    agnostic: &Tensor,
    garment: &Tensor,
    mask: &Tensor,
    codec: &Codec,
) -> Result<(Tensor, Tensor)> {
    if agnostic.shape() != garment.shape() {
        return Err(Error::ShapeMismatch {
            op: "build_condition",
            lhs: agnostic.shape().to_vec(),
            rhs: garment.shape().to_vec(),
        });
    }
    let x_m = codec.encode(agnostic)?;
    let x_g = codec.encode(garment)?;
    let x_c = ops::concat(&[&x_m, &x_g], 2)?;

    let m = downsample_mask(mask)?;
    let zeros = Tensor::zeros(m.shape());
    let m_c = ops::concat(&[&m, &zeros], 2)?;
    Ok((x_c, m_c))
}

/// Channel packing of Eq-style inputs: noise latent, mask, condition ->
/// `[b, 9, 2h, w]`.
pub fn pack_input(z: &Tensor, m_c: &Tensor, x_c: &Tensor) -> Result<Tensor> {
    let packed = ops::concat(&[z, m_c, x_c], 1)?;
    debug_assert_eq!(packed.shape()[1], PACKED_CHANNELS);
    Ok(packed)
}

/// Pixel-level paste-back: outside the mask the output IS the input person
/// image (bitwise); inside, the decoded content.
pub fn paste_back(person: &Tensor, decoded: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if person.shape() != decoded.shape() {
        return Err(Error::ShapeMismatch {
            op: "paste_back",
            lhs: person.shape().to_vec(),
            rhs: decoded.shape().to_vec(),
        });
    }
    let s = person.shape();
    let (b, c, pos) = (s[0], s[1], s[2] * s[3]);
    let mut data = person.data().to_vec();
    for n in 0..b {
        for ch in 0..c {
            let base = (n * c + ch) * pos;
            for p in 0..pos {
                if mask.data()[n * pos + p] == 1.0 {
                    data[base + p] = decoded.data()[base + p];
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, s.to_vec()))
}

fn validate_request(req: &TryOnRequest, unet: &UNetParams) -> Result<(usize, usize)> {
    let ps = req.person.shape();
    if ps.len() != 4 || ps[0] != 1 || ps[1] != 3 {
        return Err(Error::invalid("run_tryon", format!("person must be [1,3,H,W], got {ps:?}")));
    }
    if req.garment.shape() != ps {
        return Err(Error::ShapeMismatch {
            op: "run_tryon",
            lhs: ps.to_vec(),
            rhs: req.garment.shape().to_vec(),
        });
    }
    let (h, w) = (ps[2], ps[3]);
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::invalid("run_tryon", format!("extents {h}x{w} not divisible by 8")));
    }
    let div = unet.config.spatial_divisor();
    if (2 * h / 8) % div != 0 || (w / 8) % div != 0 {
        return Err(Error::invalid(
            "run_tryon",
            format!("latent extents {}x{} not divisible by {div}", 2 * h / 8, w / 8),
        ));
    }
    check_binary_mask(&req.mask)?;
    Ok((h, w))
}

/// Full inference. Deterministic for a fixed sampler seed.
pub fn run_tryon(
    req: &TryOnRequest,
    unet: &UNetParams,
    codec: &Codec,
    schedule: &NoiseSchedule,
) -> Result<TryOnResult> {
    run_tryon_inner(req, unet, codec, schedule, false)
}

/// As [`run_tryon`], additionally recording the latent after every step.
pub fn run_tryon_traced(
    req: &TryOnRequest,
    unet: &UNetParams,
    codec: &Codec,
    schedule: &NoiseSchedule,
) -> Result<TryOnResult> {
    run_tryon_inner(req, unet, codec, schedule, true)
}

fn run_tryon_inner(
    req: &TryOnRequest,
    unet: &UNetParams,
    codec: &Codec,
    schedule: &NoiseSchedule,
    trace: bool,
) -> Result<TryOnResult> {
    let (h, w) = validate_request(req, unet)?;
    let (lh, lw) = (h / 8, w / 8);

    let agnostic = make_agnostic(&req.person, &req.mask)?;
    let (x_c, m_c) = build_condition(&agnostic, &req.garment, &req.mask, codec)?;
    let x_uncond = Tensor::zeros(x_c.shape());

    let mut stream = Stream::derive(req.sampler.seed, Purpose::Sampler, 0);
    let mut z = Tensor::randn(&[1, 4, 2 * lh, lw], &mut stream);
    let mut latents = trace.then(Vec::new);

    let ts = schedule.sample_timesteps(req.sampler.steps);
    let s = req.sampler.guidance;
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied();
        let eps_cond = unet_forward(unet, &pack_input(&z, &m_c, &x_c)?, &[t])?;
        let eps = if s == 1.0 {
            eps_cond
        } else {
            let eps_uncond = unet_forward(unet, &pack_input(&z, &m_c, &x_uncond)?, &[t])?;
            cfg_combine(&eps_cond, &eps_uncond, s)?
        };
        let noise = if req.sampler.eta > 0.0 && t_prev.is_some() {
            Some(Tensor::randn(z.shape(), &mut stream))
        } else {
            None
        };
        z = ddim_step(&z, &eps, t, t_prev, schedule, req.sampler.eta, noise.as_ref())?;
        if let Some(l) = latents.as_mut() {
            l.push(z.clone());
        }
    }

    let halves = ops::split(&z, &[lh, lh], 2)?;
    let raw_decoded = codec.decode(&halves[0])?;
    let image = paste_back(&req.person, &raw_decoded, &req.mask)?;
    Ok(TryOnResult { image, raw_decoded, step_latents: latents })
}

// ── training ─────────────────────────────────────────────────────────

/// Fine-tuning hyperparameters.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub trainable: TrainableSet,
    pub dream: DreamLambda,
    pub dropout: f64,
    pub seed: u64,
    pub ckpt_every: u64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 4,
            lr: 1e-5,
            trainable: TrainableSet::SelfAttention,
            dream: DreamLambda::Finite(10.0),
            dropout: 0.1,
            seed: 0,
            ckpt_every: 500,
            weight_decay: 0.01,
        }
    }
}

/// Mutable training state: parameters, optimizer, step counter.
pub struct Trainer {
    pub unet: UNetParams,
    pub opt: AdamW,
    pub step: u64,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(unet: UNetParams, cfg: TrainConfig) -> Trainer {
        let opt = AdamW::new(cfg.lr, cfg.weight_decay);
        Trainer { unet, opt, step: 0, cfg }
    }
}

/// Batch tensors assembled from sample pairs.
pub fn batch_tensors(pairs: &[&SamplePair]) -> Result<(Tensor, Tensor, Tensor)> {
    fn stack(parts: Vec<Tensor>) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        ops::concat(&refs, 0)
    }
    Ok((
        stack(pairs.iter().map(|p| p.person.to_tensor()).collect())?,
        stack(pairs.iter().map(|p| p.garment.to_tensor()).collect())?,
        stack(pairs.iter().map(|p| p.mask.to_tensor()).collect())?,
    ))
}

/// One optimization step. All randomness derives from `(cfg.seed, purpose,
/// trainer.step)`, so resuming at step `k` replays the original trajectory.
///
/// The regression target covers the full concatenated latent — both the
/// person half and the garment half are supervised.
pub fn train_step(
    trainer: &mut Trainer,
    pairs: &[&SamplePair],
    codec: &Codec,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let step = trainer.step;
    let cfg = trainer.cfg.clone();
    let (gt, garment, mask) = batch_tensors(pairs)?;
    let b = pairs.len();

    let agnostic = make_agnostic(&gt, &mask)?;
    let (x_c, m_c) = build_condition(&agnostic, &garment, &mask, codec)?;
    let mut drop_stream = Stream::derive(cfg.seed, Purpose::CondDropout, step);
    let x_c = condition_dropout(&x_c, cfg.dropout, &mut drop_stream)?;

    // target latent: person and garment halves stacked
    let z_p = codec.encode(&gt)?;
    let z_g = codec.encode(&garment)?;
    let z0 = ops::concat(&[&z_p, &z_g], 2)?;

    let mut noise_stream = Stream::derive(cfg.seed, Purpose::Noise, step);
    let eps = Tensor::randn(z0.shape(), &mut noise_stream);
    let mut t_stream = Stream::derive(cfg.seed, Purpose::Timesteps, step);
    let ts: Vec<usize> = (0..b).map(|_| t_stream.below(schedule.len())).collect();

    // rectified or plain targets
    let (z_in, target) = match cfg.dream {
        DreamLambda::Disabled => (add_noise_batch(&z0, &eps, &ts, schedule)?, eps),
        DreamLambda::Finite(lambda) => {
            if lambda < 0.0 {
                return Err(Error::invalid("train_step", "lambda must be >= 0"));
            }
            let z_t = add_noise_batch(&z0, &eps, &ts, schedule)?;
            // gradient-free first pass
            let eps_theta = unet_forward(&trainer.unet, &pack_input(&z_t, &m_c, &x_c)?, &ts)?;
            let eps_hat = ops::add(&eps, &ops::scale(&eps_theta.detach(), lambda))?;
            let z_hat = add_noise_batch(&z0, &eps_hat, &ts, schedule)?;
            (z_hat, eps_hat)
        }
    };

    // tracked pass over the trainable subset only
    let tape = Tape::new();
    let set = cfg.trainable;
    let tracked = trainer.unet.map("", &mut |name, t| {
        if set.contains(name) {
            tape.watch(t)
        } else {
            t.clone()
        }
    });
    let pred = unet_forward(&tracked, &pack_input(&z_in, &m_c, &x_c)?, &ts)?;
    let loss = ldm_loss(&pred, &target)?;
    let loss_val = loss.item();
    if !loss_val.is_finite() {
        return Err(Error::NonFiniteLoss { step, value: loss_val });
    }

    let grads = backward(&loss)?;
    let tracked_map = tracked.to_map();
    trainer.opt.begin_step();
    let opt = &mut trainer.opt;
    trainer.unet = trainer.unet.map("", &mut |name, old| {
        match grads.wrt(&tracked_map[name]) {
            Some(g) => opt.update(name, old, g.data()),
            None => old.clone(),
        }
    });
    trainer.step += 1;
    Ok(loss_val)
}

/// Deterministic batch for a given step: an epoch-wise shuffled walk over
/// the dataset, derived statelessly from the seed.
pub fn batch_indices(seed: u64, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let start = step as usize * batch;
    let epoch_len = n.max(1);
    (0..batch)
        .map(|i| {
            let global = start + i;
            let epoch = (global / epoch_len) as u64;
            let offset = global % epoch_len;
            let mut s = Stream::derive(seed, Purpose::BatchIndices, epoch);
            s.permutation(epoch_len)[offset]
        })
        .collect()
}

/// Run training until `trainer.step == until_step`. Returns the per-step
/// losses of this run. `on_checkpoint` fires every `cfg.ckpt_every` steps
/// and once at the end.
pub fn train_loop(
    dataset: &[SamplePair],
    trainer: &mut Trainer,
    codec: &Codec,
    schedule: &NoiseSchedule,
    until_step: u64,
    mut on_checkpoint: impl FnMut(&Trainer) -> Result<()>,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::invalid("train_loop", "empty dataset"));
    }
    let mut losses = Vec::new();
    while trainer.step < until_step {
        let idx = batch_indices(trainer.cfg.seed, trainer.step, trainer.cfg.batch, dataset.len());
        let pairs: Vec<&SamplePair> = idx.into_iter().map(|i| &dataset[i]).collect();
        let loss = train_step(trainer, &pairs, codec, schedule)?;
        losses.push(loss);
        if trainer.cfg.ckpt_every > 0 && trainer.step % trainer.cfg.ckpt_every == 0 {
            on_checkpoint(trainer)?;
        }
    }
    on_checkpoint(trainer)?;
    Ok(losses)
}

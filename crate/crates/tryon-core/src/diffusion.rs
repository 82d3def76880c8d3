//! Forward diffusion, training objectives, and deterministic DDIM sampling.
//!
//! Timesteps are zero-based throughout: `t` ranges over `0..T` and
//! `alpha_bar(t)` is the cumulative product of `1 - beta` through index `t`
//! inclusive, so `alpha_bar(0) = 1 - beta[0]`.

use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};

/// Forward-process constants for `T` timesteps.
#[derive(Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Default training horizon.
pub const DEFAULT_T: usize = 1000;
/// Scaled-linear beta endpoints.
pub const DEFAULT_BETA_START: f64 = 0.00085;
pub const DEFAULT_BETA_END: f64 = 0.012;

impl NoiseSchedule {
    /// Scaled-linear schedule: beta is linear in sqrt-space between the
    /// endpoints, then squared.
    pub fn scaled_linear(beta_start: f64, beta_end: f64, t_total: usize) -> Result<NoiseSchedule> {
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(
                "make_schedule",
                format!("need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"),
            ));
        }
        if t_total == 0 {
            return Err(Error::invalid("make_schedule", "T must be positive"));
        }
        let (s0, s1) = (beta_start.sqrt(), beta_end.sqrt());
        let mut betas = Vec::with_capacity(t_total);
        for i in 0..t_total {
            let frac = if t_total == 1 { 0.0 } else { i as f64 / (t_total - 1) as f64 };
            let s = s0 + (s1 - s0) * frac;
            betas.push(s * s);
        }
        let mut alpha_bars = Vec::with_capacity(t_total);
        let mut prod = 1.0;
        for &b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::scaled_linear(DEFAULT_BETA_START, DEFAULT_BETA_END, DEFAULT_T)
            .expect("default schedule constants are valid")
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    /// Cumulative signal retention through step `t` (zero-based, inclusive).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Evenly spaced descending timesteps for sampling: starts at `T - 1`,
    /// ends at 0.
    pub fn sample_timesteps(&self, steps: usize) -> Vec<usize> {
        let t_total = self.len();
        let steps = steps.clamp(1, t_total);
        if steps == 1 {
            return vec![t_total - 1];
        }
        (0..steps)
            .map(|i| {
                let frac = i as f64 / (steps - 1) as f64;
                ((t_total - 1) as f64 * (1.0 - frac)).round() as usize
            })
            .collect()
    }
}

/// Sampler knobs: step count, guidance strength, DDIM eta, seed.
#[derive(Clone, Debug)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 50, guidance: 2.5, eta: 0.0, seed: 0 }
    }
}

/// DREAM rectification strength. `Disabled` means the plain objective (the
/// lambda -> infinity row of the ablation grid).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DreamLambda {
    Finite(f64),
    Disabled,
}

impl DreamLambda {
    pub fn parse(s: &str) -> Result<DreamLambda> {
        match s.trim() {
            "inf" | "INF" | "Inf" | "infinity" => Ok(DreamLambda::Disabled),
            other => {
                let v: f64 = other
                    .parse()
                    .map_err(|_| Error::Config(format!("bad dream lambda {other:?}")))?;
                if v < 0.0 {
                    return Err(Error::Config(format!("dream lambda must be >= 0, got {v}")));
                }
                Ok(DreamLambda::Finite(v))
            }
        }
    }
}

impl std::fmt::Display for DreamLambda {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DreamLambda::Finite(v) => write!(f, "{v}"),
            DreamLambda::Disabled => write!(f, "inf"),
        }
    }
}

/// `z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps`.
pub fn add_noise(z0: &Tensor, eps: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "add_noise",
            lhs: z0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    if t >= schedule.len() {
        return Err(Error::invalid("add_noise", format!("t {t} out of range 0..{}", schedule.len())));
    }
    let ab = schedule.alpha_bar(t);
    ops::add(&ops::scale(z0, ab.sqrt()), &ops::scale(eps, (1.0 - ab).sqrt()))
}

/// Per-sample variant of [`add_noise`]: `ts[n]` applies to batch element `n`.
pub fn add_noise_batch(
    z0: &Tensor,
    eps: &Tensor,
    ts: &[usize],
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "add_noise",
            lhs: z0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let b = z0.shape().first().copied().unwrap_or(0);
    if ts.len() != b {
        return Err(Error::invalid("add_noise", "one timestep per sample required"));
    }
    let per = z0.numel() / b.max(1);
    let mut data = vec![0.0; z0.numel()];
    for (n, &t) in ts.iter().enumerate() {
        if t >= schedule.len() {
            return Err(Error::invalid("add_noise", format!("t {t} out of range")));
        }
        let ab = schedule.alpha_bar(t);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        for i in n * per..(n + 1) * per {
            data[i] = sa * z0.data()[i] + sb * eps.data()[i];
        }
    }
    Ok(Tensor::from_vec(data, z0.shape().to_vec()))
}

/// Mean squared error between predicted and true noise — the plain training
/// objective.
pub fn ldm_loss(eps_pred: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if eps_pred.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "ldm_loss",
            lhs: eps_pred.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    ops::mse(eps_pred, eps)
}

/// Rectified targets: a gradient-free model pass predicts `eps_theta` at the
/// plainly noised latent, then `eps_hat = eps + lambda * eps_theta` and
/// `z_hat_t` re-noises `z0` with `eps_hat`. Returns `(z_hat_t, eps_hat)`;
/// the training loss regresses the model at `z_hat_t` onto `eps_hat`.
pub fn dream_targets(
    z0: &Tensor,
    eps: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    model: &dyn Fn(&Tensor, usize) -> Result<Tensor>,
    lambda: f64,
) -> Result<(Tensor, Tensor)> {
    if lambda < 0.0 {
        return Err(Error::invalid("dream_targets", format!("lambda must be >= 0, got {lambda}")));
    }
    let z_t = add_noise(z0, eps, t, schedule)?;
    // First pass treats the prediction as data: inputs are untracked, so
    // nothing is recorded.
    let eps_theta = model(&z_t.detach(), t)?.detach();
    let eps_hat = ops::add(eps, &ops::scale(&eps_theta, lambda))?;
    let z_hat_t = add_noise(z0, &eps_hat, t, schedule)?;
    Ok((z_hat_t, eps_hat))
}

/// One deterministic (eta = 0) or stochastic DDIM update from `t` to
/// `t_prev`. `t_prev_ab_one` conventions: passing `t_prev = None` targets the
/// clean sample (`alpha_bar = 1`), used for the final step to 0 ... the
/// caller passes `Some(t_prev)` for intermediate steps.
pub fn ddim_step(
    z_t: &Tensor,
    eps_pred: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    schedule: &NoiseSchedule,
    eta: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    if z_t.shape() != eps_pred.shape() {
        return Err(Error::ShapeMismatch {
            op: "ddim_step",
            lhs: z_t.shape().to_vec(),
            rhs: eps_pred.shape().to_vec(),
        });
    }
    if let Some(tp) = t_prev {
        if tp >= t {
            return Err(Error::invalid("ddim_step", format!("timesteps must decrease: {t} -> {tp}")));
        }
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = t_prev.map(|tp| schedule.alpha_bar(tp)).unwrap_or(1.0);

    // predicted clean latent
    let z0_pred = ops::scale(
        &ops::sub(z_t, &ops::scale(eps_pred, (1.0 - ab_t).sqrt()))?,
        1.0 / ab_t.sqrt(),
    );

    let sigma = if eta > 0.0 {
        eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt()
    } else {
        0.0
    };
    let dir_coeff = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut z_prev = ops::add(&ops::scale(&z0_pred, ab_prev.sqrt()), &ops::scale(eps_pred, dir_coeff))?;
    if sigma > 0.0 {
        let n = noise.ok_or_else(|| Error::invalid("ddim_step", "eta > 0 needs a noise tensor"))?;
        z_prev = ops::add(&z_prev, &ops::scale(n, sigma))?;
    }
    Ok(z_prev)
}

/// Classifier-free guidance: `uncond + s * (cond - uncond)`. `s = 1` returns
/// the conditional prediction exactly.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, s: f64) -> Result<Tensor> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::ShapeMismatch {
            op: "cfg_combine",
            lhs: eps_cond.shape().to_vec(),
            rhs: eps_uncond.shape().to_vec(),
        });
    }
    if s == 1.0 {
        return Ok(eps_cond.clone());
    }
    ops::add(eps_uncond, &ops::scale(&ops::sub(eps_cond, eps_uncond)?, s))
}

//! Noise schedule, forward corruption, guided ancestral step and the
//! one-step clean-image estimate.
//!
//! Timesteps are 1-based: `t = 1..=T` index the noise levels, and `t = 0`
//! is the clean end of the chain with `alpha_bar(0) = 1`.

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::rng::RngStream;

/// Anything that predicts the forward noise `ε` from a noisy image.
///
/// `z` is `[n, c, h, w]`; the same timestep applies to every sample.
pub trait NoisePredictor {
    fn predict_noise(&self, z: &Tensor, t: usize) -> Result<Tensor>;
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn predict_noise(&self, z: &Tensor, t: usize) -> Result<Tensor> {
        (**self).predict_noise(z, t)
    }
}

/// Variance schedule `β_1..β_T` with its cumulative products and the fixed
/// posterior variances used as the reverse-process covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    // index 0 holds the clean end of the chain
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

impl Schedule {
    pub const DEFAULT_STEPS: usize = 200;
    pub const DEFAULT_BETA_START: f64 = 1e-4;
    pub const DEFAULT_BETA_END: f64 = 0.05;

    /// Linearly spaced betas from `beta_start` to `beta_end` over `steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Schedule(format!("need at least 2 steps, got {steps}")));
        }
        let betas = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect::<Vec<_>>();
        Self::from_betas(&betas)
    }

    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Schedule("empty".into()));
        }
        for (i, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Schedule(format!("beta_{} = {b} outside (0, 1)", i + 1)));
            }
            if i > 0 && b < betas[i - 1] {
                return Err(Error::Schedule(format!("beta decreases at step {}", i + 1)));
            }
        }
        let mut beta = Vec::with_capacity(betas.len() + 1);
        beta.push(0.0);
        beta.extend_from_slice(betas);
        let mut alpha_bar = Vec::with_capacity(beta.len());
        alpha_bar.push(1.0);
        for &b in &beta[1..] {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * (1.0 - b));
        }
        let last = *alpha_bar.last().unwrap();
        if last >= 0.01 {
            return Err(Error::Schedule(format!(
                "alpha_bar_T = {last:.5} is not below 0.01; the chain does not reach noise"
            )));
        }
        let mut posterior_var = vec![0.0; beta.len()];
        for t in 1..beta.len() {
            posterior_var[t] = (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t];
        }
        Ok(Self { beta, alpha_bar, posterior_var })
    }

    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            Err(Error::TimestepOutOfRange { t, max: self.steps() })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`; zero at `t = 1`.
    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var[t]
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Self::linear(Self::DEFAULT_STEPS, Self::DEFAULT_BETA_START, Self::DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

/// `√ᾱ_t · x + √(1 − ᾱ_t) · ε` for a given `ε`. At `t = 0` this is `x`.
pub fn forward_diffuse_with(schedule: &Schedule, x: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    schedule.check(t)?;
    if t == 0 {
        return Ok(x.clone());
    }
    let a = schedule.alpha_bar(t);
    let (ca, cn) = (a.sqrt() as f32, (1.0 - a).sqrt() as f32);
    Ok(x.zip_map(eps, |xv, e| ca * xv + cn * e)?)
}

/// Corrupts `x` to noise level `t`, returning the noisy image and the exact
/// noise that was used.
pub fn forward_diffuse(schedule: &Schedule, x: &Tensor, t: usize, rng: &RngStream) -> Result<(Tensor, Tensor)> {
    schedule.check(t)?;
    let eps = rng.normal(x.shape().to_vec());
    let z = forward_diffuse_with(schedule, x, t, &eps)?;
    Ok((z, eps))
}

/// DDPM posterior mean `μ_θ(z_t)` computed from a noise prediction.
pub fn posterior_mean(schedule: &Schedule, z: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    schedule.check(t)?;
    if t == 0 {
        return Err(Error::TimestepOutOfRange { t, max: schedule.steps() });
    }
    let beta = schedule.beta(t);
    let inv_sqrt_alpha = (1.0 / (1.0 - beta).sqrt()) as f32;
    let eps_coef = (beta / (1.0 - schedule.alpha_bar(t)).sqrt()) as f32;
    Ok(z.zip_map(eps, |zv, e| inv_sqrt_alpha * (zv - eps_coef * e))?)
}

/// One ancestral step `z_t → z_{t−1}` whose mean is shifted by
/// `−Σ_t · gradient`, with `Σ_t = β̃_t`. No noise is added at `t = 1`.
pub fn guided_reverse_step<P: NoisePredictor + ?Sized>(
    schedule: &Schedule,
    z: &Tensor,
    t: usize,
    eps_net: &P,
    gradient: &Tensor,
    rng: &RngStream,
) -> Result<Tensor> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::TimestepOutOfRange { t, max: schedule.steps() });
    }
    if gradient.shape() != z.shape() {
        return Err(Error::InvalidArgument(format!(
            "gradient shape {:?} does not match state {:?}",
            gradient.shape(),
            z.shape()
        )));
    }
    if !gradient.is_finite() {
        return Err(Error::NonFinite { what: "gradient", t });
    }
    let eps = eps_net.predict_noise(z, t)?;
    let mean = posterior_mean(schedule, z, t, &eps)?;
    if !mean.is_finite() {
        return Err(Error::NonFinite { what: "posterior mean", t });
    }
    let var = schedule.posterior_var(t) as f32;
    let shifted = mean.zip_map(gradient, |m, g| m - var * g)?;
    if t == 1 || var == 0.0 {
        return Ok(shifted);
    }
    let std = var.sqrt();
    let noise = rng.normal(z.shape().to_vec());
    Ok(shifted.zip_map(&noise, |m, n| m + std * n)?)
}

/// One-step clean-image estimate from `z_s` at level `s`:
/// `(z_s − √(1 − ᾱ_s) ε_θ(z_s, s)) / √ᾱ_s`.
///
/// The predictor is queried at every level including `s = 0`, where the
/// noise coefficient vanishes and the estimate equals `z_0`.
pub fn tweedie_estimate<P: NoisePredictor + ?Sized>(schedule: &Schedule, z: &Tensor, s: usize, eps_net: &P) -> Result<Tensor> {
    schedule.check(s)?;
    let a = schedule.alpha_bar(s);
    if a <= 0.0 {
        return Err(Error::Schedule(format!("alpha_bar({s}) = {a} is not positive")));
    }
    let eps = eps_net.predict_noise(z, s)?;
    tweedie_from_noise(schedule, z, s, &eps)
}

pub fn tweedie_from_noise(schedule: &Schedule, z: &Tensor, s: usize, eps: &Tensor) -> Result<Tensor> {
    schedule.check(s)?;
    let a = schedule.alpha_bar(s);
    if s == 0 {
        return Ok(z.clone());
    }
    let (cn, inv) = ((1.0 - a).sqrt() as f32, (1.0 / a.sqrt()) as f32);
    let out = z.zip_map(eps, |zv, e| (zv - cn * e) * inv)?;
    if !out.is_finite() {
        return Err(Error::NonFinite { what: "clean estimate", t: s });
    }
    Ok(out)
}

/// Unguided ancestral sampling from `z` at level `t` down to level 0.
/// Queries the predictor exactly `t` times.
pub fn denoise_to_clean<P: NoisePredictor + ?Sized>(
    schedule: &Schedule,
    z: &Tensor,
    t: usize,
    eps_net: &P,
    rng: &RngStream,
) -> Result<Tensor> {
    schedule.check(t)?;
    let zero = Tensor::zeros(z.shape().to_vec());
    let mut cur = z.clone();
    for u in (1..=t).rev() {
        cur = guided_reverse_step(schedule, &cur, u, eps_net, &zero, &rng.substream(u as u64))?;
    }
    Ok(cur)
}

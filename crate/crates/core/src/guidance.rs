//! Counterfactual loss, its gradient in noisy space, and the class-gradient
//! saliency map that drives the masks.
//!
//! The joint loss on the current clean estimate `x_t` is
//!
//! ```text
//! L = λ_c·(−log C(y | x_t)) + λ_p·‖f(x_t) − f(x)‖² / dim f + λ_l·mean|x_t − x|
//! ```
//!
//! with `f` the frozen [`FeatureNet`]. The guided step uses
//! `∇_{z_t} = s/√ᾱ_t · ∇_{x_t} L`; the saliency map is
//! `G_t = |∇_{x_t} L_class| / √ᾱ_t`, averaged over channels.

use crate::diffusion::Schedule;
use crate::error::{Error, Result};
use crate::models::{Classifier, FeatureNet, FEATURE_DIM, NUM_CLASSES};
use crate::ndgrad::{Graph, Tensor, Var};

/// Classification weights tried in order until the prediction flips.
pub const LAMBDA_C_SCHEDULE: [f32; 3] = [8.0, 10.0, 15.0];

/// Floor applied to `C(y | x_t)` before taking the log.
pub const PROB_FLOOR: f32 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    pub lambda_c: f32,
    pub lambda_p: f32,
    pub lambda_l: f32,
    /// Overall guidance scale `s`.
    pub scale: f32,
    pub target: usize,
    /// First reverse step `τ`.
    pub tau: usize,
    /// Fraction of pixels kept in the noisy-state mask.
    pub k: f32,
    /// Fraction of the noisy-state mask kept in the clean-estimate mask.
    pub rho: f32,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lambda_c: LAMBDA_C_SCHEDULE[0],
            lambda_p: 30.0,
            lambda_l: 0.05,
            scale: 8.0,
            target: 1,
            tau: 60,
            k: 0.1,
            rho: 0.5,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        for (name, v) in [("lambda_c", self.lambda_c), ("lambda_p", self.lambda_p), ("lambda_l", self.lambda_l), ("s", self.scale)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a finite value ≥ 0, got {v}"));
            }
        }
        if self.target >= NUM_CLASSES {
            return bad(format!("target class {} out of range", self.target));
        }
        if self.tau < 1 || self.tau > steps {
            return bad(format!("tau must lie in 1..={steps}, got {}", self.tau));
        }
        if !(self.k > 0.0 && self.k <= 1.0) {
            return bad(format!("k must lie in (0, 1], got {}", self.k));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho must lie in (0, 1], got {}", self.rho));
        }
        Ok(())
    }
}

/// Unweighted loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub class: f32,
    pub perceptual: f32,
    pub l1: f32,
}

impl LossTerms {
    pub fn total(&self, cfg: &GuidanceConfig) -> f32 {
        cfg.lambda_c * self.class + cfg.lambda_p * self.perceptual + cfg.lambda_l * self.l1
    }
}

/// The two networks the loss needs.
#[derive(Debug, Clone, Copy)]
pub struct LossNets<'a> {
    pub classifier: &'a Classifier,
    pub featnet: &'a FeatureNet,
}

struct Recorded {
    xt: Var,
    class: Var,
    rest: Var,
    perceptual: Var,
    l1: Var,
    clamped: bool,
}

/// Records the three terms. The classification term comes first on the tape
/// so its backward sweep never visits the feature network.
fn record(g: &mut Graph, x_t: &Tensor, x: &Tensor, cfg: &GuidanceConfig, nets: LossNets) -> Result<Recorded> {
    if x_t.shape() != x.shape() {
        return Err(Error::InvalidArgument(format!("x_t {:?} vs x {:?}", x_t.shape(), x.shape())));
    }
    if x.shape().first() != Some(&1) {
        return Err(Error::InvalidArgument("guidance works on a single image".into()));
    }
    if cfg.target >= NUM_CLASSES {
        return Err(Error::InvalidArgument(format!("target class {}", cfg.target)));
    }
    let xt = g.input(x_t.clone());
    let logits = nets.classifier.logits_on(g, xt)?;
    let lp = g.log_softmax(logits)?;
    let lpy = g.gather(lp, &[cfg.target])?;
    let lpy = g.sum(lpy)?;
    let floor = PROB_FLOOR.ln();
    let clamped = g.value(lpy).item() < floor;
    let class = if clamped {
        log::warn!("C(y|x_t) below {PROB_FLOOR:e}; classification term clamped");
        g.constant(Tensor::scalar(-floor))
    } else {
        g.scale(lpy, -1.0)?
    };

    let x_c = g.constant(x.clone());
    let fx = nets.featnet.features_on(g, x_c)?;
    let fxt = nets.featnet.features_on(g, xt)?;
    let d = g.sub(fxt, fx)?;
    let sq = g.square(d)?;
    let s = g.sum(sq)?;
    let perceptual = g.scale(s, 1.0 / FEATURE_DIM as f32)?;
    let diff = g.sub(xt, x_c)?;
    let ad = g.abs(diff)?;
    let l1 = g.mean(ad)?;
    let wp = g.scale(perceptual, cfg.lambda_p)?;
    let wl = g.scale(l1, cfg.lambda_l)?;
    let rest = g.add(wp, wl)?;
    Ok(Recorded { xt, class, rest, perceptual, l1, clamped })
}

/// Joint loss value and its unweighted terms.
pub fn joint_loss(x_t: &Tensor, x: &Tensor, cfg: &GuidanceConfig, nets: LossNets) -> Result<(f32, LossTerms)> {
    let mut g = Graph::new();
    let r = record(&mut g, x_t, x, cfg, nets)?;
    let terms = LossTerms {
        class: g.value(r.class).item(),
        perceptual: g.value(r.perceptual).item(),
        l1: g.value(r.l1).item(),
    };
    Ok((terms.total(cfg), terms))
}

/// Everything one reverse step needs from the loss, from a single
/// recording of the tape.
#[derive(Debug, Clone)]
pub struct GuidanceSignal {
    /// `s/√ᾱ_t · ∇_{x_t} L`
    pub grad_z: Tensor,
    /// `|∇_{x_t} L_class| / √ᾱ_t`, channel-averaged, shape `[1, H, W]`.
    pub saliency: Tensor,
    pub terms: LossTerms,
    /// The probability floor was hit.
    pub clamped: bool,
}

fn check_t(schedule: &Schedule, t: usize) -> Result<()> {
    if t > schedule.steps() {
        return Err(Error::TimestepOutOfRange { t, max: schedule.steps() });
    }
    Ok(())
}

/// Computes the noisy-space gradient and the saliency map together. The
/// class gradient is swept separately from the perceptual and L1 part, so
/// the saliency map never depends on `λ_p` or `λ_l`.
pub fn guidance_signal(
    x_t: &Tensor,
    x: &Tensor,
    cfg: &GuidanceConfig,
    t: usize,
    schedule: &Schedule,
    nets: LossNets,
) -> Result<GuidanceSignal> {
    check_t(schedule, t)?;
    let mut g = Graph::new();
    let r = record(&mut g, x_t, x, cfg, nets)?;
    let terms = LossTerms {
        class: g.value(r.class).item(),
        perceptual: g.value(r.perceptual).item(),
        l1: g.value(r.l1).item(),
    };
    let g_class = g.backward(r.class)?.wrt(r.xt);
    let g_rest = g.backward(r.rest)?.wrt(r.xt);
    let inv = 1.0 / schedule.alpha_bar(t).sqrt() as f32;
    let coef = cfg.scale * inv;
    let grad_z = g_class.zip_map(&g_rest, |c, o| coef * (cfg.lambda_c * c + o))?;
    if !grad_z.is_finite() {
        return Err(Error::NonFinite { what: "guidance gradient", t });
    }
    let saliency = channel_mean_abs(&g_class, inv);
    Ok(GuidanceSignal { grad_z, saliency, terms, clamped: r.clamped })
}

/// `∇_{z_t} = s/√ᾱ_t · ∇_{x_t} L`.
pub fn noisy_gradient(
    x_t: &Tensor,
    x: &Tensor,
    cfg: &GuidanceConfig,
    t: usize,
    schedule: &Schedule,
    nets: LossNets,
) -> Result<Tensor> {
    Ok(guidance_signal(x_t, x, cfg, t, schedule, nets)?.grad_z)
}

/// `G_t = |∇_{x_t} L_class / √ᾱ_t|` averaged over channels, `[1, H, W]`.
pub fn class_saliency(x_t: &Tensor, cfg: &GuidanceConfig, t: usize, schedule: &Schedule, classifier: &Classifier) -> Result<Tensor> {
    check_t(schedule, t)?;
    let mut g = Graph::new();
    let xt = g.input(x_t.clone());
    let logits = classifier.logits_on(&mut g, xt)?;
    let lp = g.log_softmax(logits)?;
    let lpy = g.gather(lp, &[cfg.target])?;
    let lpy = g.sum(lpy)?;
    if g.value(lpy).item() < PROB_FLOOR.ln() {
        log::warn!("C(y|x_t) below {PROB_FLOOR:e}; saliency is zero");
        return Ok(Tensor::zeros(plane_shape(x_t.shape())));
    }
    let class = g.scale(lpy, -1.0)?;
    let grad = g.backward(class)?.wrt(xt);
    Ok(channel_mean_abs(&grad, 1.0 / schedule.alpha_bar(t).sqrt() as f32))
}

fn plane_shape(s: &[usize]) -> Vec<usize> {
    vec![1, s[s.len() - 2], s[s.len() - 1]]
}

fn channel_mean_abs(grad: &Tensor, coef: f32) -> Tensor {
    let s = grad.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let plane = h * w;
    Tensor::from_fn(plane_shape(s), |i| {
        let acc: f32 = (0..c).map(|ch| (coef * grad.data()[ch * plane + i]).abs()).sum();
        acc / c as f32
    })
}

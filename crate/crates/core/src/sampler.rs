//! Counterfactual samplers.
//!
//! Every variant starts from `z_τ = z̃_τ` (the input corrupted to level `τ`)
//! and `x_τ = x`, then walks `t = τ..1`:
//!
//! 1. guidance gradient and saliency from the current clean estimate `x_t`;
//! 2. masks for this step;
//! 3. guided ancestral step, blended with a fresh corruption of the input:
//!    `z_{t−1} = M^z ⊙ guided + (1 − M^z) ⊙ z̃_{t−1}`;
//! 4. one-step clean estimate `x̂_0` of `z_{t−1}`;
//! 5. `x_{t−1} = M^x ⊙ x̂_0 + (1 − M^x) ⊙ x`.
//!
//! The counterfactual is `z_0`. Blends are selections, not arithmetic, so
//! unmasked pixels are copied bit for bit.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use crate::diffusion::{denoise_to_clean, forward_diffuse, guided_reverse_step, tweedie_estimate, NoisePredictor, Schedule};
use crate::error::{Error, Result};
use crate::guidance::{guidance_signal, GuidanceConfig, LossNets, LossTerms, LAMBDA_C_SCHEDULE};
use crate::masks::{self, DualMask};
use crate::models::{Classifier, FeatureNet};
use crate::ndgrad::Tensor;
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    MaskDime,
    NoMask,
    FixedMask,
    PixelDiffMask,
    DimeNested,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::MaskDime, Variant::NoMask, Variant::FixedMask, Variant::PixelDiffMask, Variant::DimeNested];

    pub fn name(self) -> &'static str {
        match self {
            Variant::MaskDime => "maskdime",
            Variant::NoMask => "no_mask",
            Variant::FixedMask => "fixed_mask",
            Variant::PixelDiffMask => "pixel_diff_mask",
            Variant::DimeNested => "dime_nested",
        }
    }

    /// ε-net evaluations for one attempt starting at `τ`.
    pub fn eps_evals(self, tau: usize) -> usize {
        match self {
            Variant::DimeNested => tau * (tau + 1) / 2 + tau,
            _ => 2 * tau,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub guidance: GuidanceConfig,
    pub variant: Variant,
    /// Classification weights tried in order; the run stops at the first
    /// flip.
    pub lambda_schedule: Vec<f32>,
    /// Keep full per-step tensors (needed for heatmaps).
    pub retain_states: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            guidance: GuidanceConfig::default(),
            variant: Variant::MaskDime,
            lambda_schedule: LAMBDA_C_SCHEDULE.to_vec(),
            retain_states: false,
        }
    }
}

/// Read-only model bundle shared by all trajectories.
#[derive(Debug, Clone, Copy)]
pub struct Nets<'a, E: ?Sized> {
    pub eps: &'a E,
    pub classifier: &'a Classifier,
    pub featnet: &'a FeatureNet,
    pub schedule: &'a Schedule,
}

impl<E: ?Sized> Nets<'_, E> {
    fn loss(&self) -> LossNets<'_> {
        LossNets { classifier: self.classifier, featnet: self.featnet }
    }
}

/// Full tensors of one step, kept only when state retention is on.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStates {
    pub z_t: Tensor,
    pub x_t: Tensor,
    /// Raw guided sample before blending.
    pub guided: Tensor,
    /// Fresh corruption `z̃_{t−1}` of the input.
    pub z_ref: Tensor,
    pub z_next: Tensor,
    /// Clean estimate of `z_{t−1}` before blending.
    pub x0_hat: Tensor,
    pub x_next: Tensor,
    pub mask: DualMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    /// `C(y | x_t)` for the target class.
    pub p_target: f32,
    pub loss: LossTerms,
    pub mz_count: usize,
    pub mx_count: usize,
    pub wall: Duration,
    pub states: Option<StepStates>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub sample_id: u64,
    pub variant: Variant,
    pub tau: usize,
    pub scale: f32,
    /// Classification weight of the reported attempt.
    pub lambda_c: f32,
    pub attempts: usize,
    /// The input was already classified as the target; nothing was run.
    pub skipped: bool,
    pub flipped: bool,
    pub p_before: f32,
    pub p_after: f32,
    pub z_tau: Tensor,
    pub counterfactual: Tensor,
    pub steps: Vec<StepRecord>,
    /// ε-net evaluations of the reported attempt.
    pub eps_evals: usize,
    /// ε-net evaluations over all attempts.
    pub eps_evals_total: usize,
    pub wall: Duration,
}

impl Trajectory {
    /// Everything except wall-clock timings, for determinism checks.
    pub fn same_result(&self, other: &Trajectory) -> bool {
        let strip = |t: &Trajectory| {
            let mut t = t.clone();
            t.wall = Duration::ZERO;
            for s in &mut t.steps {
                s.wall = Duration::ZERO;
            }
            t
        };
        strip(self) == strip(other)
    }
}

struct Counting<'a, E: ?Sized> {
    inner: &'a E,
    count: Cell<usize>,
}

impl<E: NoisePredictor + ?Sized> NoisePredictor for Counting<'_, E> {
    fn predict_noise(&self, z: &Tensor, t: usize) -> Result<Tensor> {
        self.count.set(self.count.get() + 1);
        self.inner.predict_noise(z, t)
    }
}

fn select(mask: &Tensor, on: &Tensor, off: &Tensor) -> Result<Tensor> {
    let m = mask.data();
    let plane = m.len();
    if on.shape() != off.shape() || on.len() % plane != 0 {
        return Err(Error::InvalidArgument(format!("blend shapes {:?} / {:?} / {:?}", mask.shape(), on.shape(), off.shape())));
    }
    Ok(Tensor::from_fn(on.shape().to_vec(), |i| if m[i % plane] > 0.5 { on.data()[i] } else { off.data()[i] }))
}

fn finite(t: &Tensor, what: &'static str, step: usize) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { what, t: step })
    }
}

struct Attempt {
    z_tau: Tensor,
    z0: Tensor,
    steps: Vec<StepRecord>,
    evals: usize,
}

fn run_attempt<E: NoisePredictor + ?Sized>(
    x: &Tensor,
    cfg: &SamplerConfig,
    guidance: &GuidanceConfig,
    nets: &Nets<'_, E>,
    stream: RngStream,
) -> Result<Attempt> {
    let schedule = nets.schedule;
    let tau = guidance.tau;
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let eps = Counting { inner: nets.eps, count: Cell::new(0) };
    let (z_tau, _) = forward_diffuse(schedule, x, tau, &stream.substream(0))?;
    let mut z = z_tau.clone();
    let mut x_t = x.clone();
    let mut last_x0 = x.clone();
    let mut frozen: Option<DualMask> = None;
    let mut steps = Vec::with_capacity(tau);

    for t in (1..=tau).rev() {
        let start = Instant::now();
        if cfg.variant == Variant::DimeNested {
            x_t = denoise_to_clean(schedule, &z, t, &eps, &stream.derive(&[3, t as u64]))?;
            finite(&x_t, "nested clean estimate", t)?;
        }
        let signal = guidance_signal(&x_t, x, guidance, t, schedule, nets.loss())?;
        let mask = match cfg.variant {
            Variant::MaskDime => masks::build_dual_mask(&signal.saliency, guidance.k, guidance.rho)?,
            Variant::NoMask | Variant::DimeNested => DualMask::full(h, w),
            Variant::FixedMask => match &frozen {
                Some(m) => m.clone(),
                None => {
                    let m = masks::fixed_mask(&signal.saliency, guidance.k)?;
                    frozen = Some(m.clone());
                    m
                }
            },
            Variant::PixelDiffMask => {
                let (core, dil) = masks::pixel_diff_mask(&last_x0, x, guidance.k)?;
                DualMask::single(core, dil, guidance.k)
            }
        };
        let guided = guided_reverse_step(schedule, &z, t, &eps, &signal.grad_z, &stream.derive(&[1, t as u64]))?;
        finite(&guided, "guided sample", t)?;
        let (z_next, z_ref, x0_hat, x_next) = if cfg.variant == Variant::DimeNested {
            (guided.clone(), guided.clone(), x_t.clone(), x_t.clone())
        } else {
            let (z_ref, _) = forward_diffuse(schedule, x, t - 1, &stream.derive(&[2, t as u64]))?;
            let z_next = select(&mask.mz, &guided, &z_ref)?;
            let x0_hat = tweedie_estimate(schedule, &z_next, t - 1, &eps)?;
            let x_next = select(&mask.mx, &x0_hat, x)?;
            (z_next, z_ref, x0_hat, x_next)
        };
        let record = StepRecord {
            t,
            p_target: (-signal.terms.class).exp(),
            loss: signal.terms,
            mz_count: masks::count_ones(&mask.mz),
            mx_count: masks::count_ones(&mask.mx),
            wall: start.elapsed(),
            states: cfg.retain_states.then(|| StepStates {
                z_t: z.clone(),
                x_t: x_t.clone(),
                guided,
                z_ref,
                z_next: z_next.clone(),
                x0_hat: x0_hat.clone(),
                x_next: x_next.clone(),
                mask,
            }),
        };
        steps.push(record);
        z = z_next;
        x_t = x_next;
        last_x0 = x0_hat;
    }
    Ok(Attempt { z_tau, z0: z, steps, evals: eps.count.get() })
}

/// Runs one variant on one image. `stream` should be the per-sample stream;
/// attempts derive their own children from it so variants run with the same
/// stream share their noise.
pub fn run<E: NoisePredictor + ?Sized>(
    x: &Tensor,
    sample_id: u64,
    cfg: &SamplerConfig,
    nets: &Nets<'_, E>,
    stream: RngStream,
) -> Result<Trajectory> {
    cfg.guidance.validate(nets.schedule.steps())?;
    if cfg.lambda_schedule.is_empty() {
        return Err(Error::InvalidArgument("empty lambda_c schedule".into()));
    }
    if x.shape().len() != 4 || x.shape()[0] != 1 {
        return Err(Error::InvalidArgument(format!("expected one [1, C, H, W] image, got {:?}", x.shape())));
    }
    let started = Instant::now();
    let target = cfg.guidance.target;
    let p_before = nets.classifier.class_prob(x, target)?;
    let predicted = nets.classifier.predict(x)?[0];
    let mut traj = Trajectory {
        sample_id,
        variant: cfg.variant,
        tau: cfg.guidance.tau,
        scale: cfg.guidance.scale,
        lambda_c: cfg.lambda_schedule[0],
        attempts: 0,
        skipped: predicted == target,
        flipped: false,
        p_before,
        p_after: p_before,
        z_tau: x.clone(),
        counterfactual: x.clone(),
        steps: Vec::new(),
        eps_evals: 0,
        eps_evals_total: 0,
        wall: Duration::ZERO,
    };
    if traj.skipped {
        traj.wall = started.elapsed();
        return Ok(traj);
    }
    for (i, &lambda_c) in cfg.lambda_schedule.iter().enumerate() {
        let guidance = GuidanceConfig { lambda_c, ..cfg.guidance.clone() };
        let attempt = run_attempt(x, cfg, &guidance, nets, stream.substream(i as u64))?;
        let p_after = nets.classifier.class_prob(&attempt.z0, target)?;
        let flipped = nets.classifier.predict(&attempt.z0)?[0] == target;
        traj.attempts = i + 1;
        traj.lambda_c = lambda_c;
        traj.flipped = flipped;
        traj.p_after = p_after;
        traj.z_tau = attempt.z_tau;
        traj.counterfactual = attempt.z0;
        traj.steps = attempt.steps;
        traj.eps_evals = attempt.evals;
        traj.eps_evals_total += attempt.evals;
        if flipped {
            break;
        }
    }
    traj.wall = started.elapsed();
    Ok(traj)
}

/// Per-step `|z_{t−1} − z_t|`, channel-averaged and scaled to `[0, 1]` by
/// the step maximum.
pub fn update_heatmaps(traj: &Trajectory) -> Result<Vec<Tensor>> {
    traj.steps
        .iter()
        .map(|step| {
            let s = step.states.as_ref().ok_or(Error::StatesNotRetained)?;
            update_heatmap(&s.z_t, &s.z_next)
        })
        .collect()
}

/// One frame of [`update_heatmaps`].
pub fn update_heatmap(z_t: &Tensor, z_next: &Tensor) -> Result<Tensor> {
    let d = masks::channel_mean_abs_diff(z_next, z_t)?;
    let m = d.abs_max();
    Ok(if m > 0.0 { d.scale(1.0 / m) } else { d })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct ZeroNoise;
    impl NoisePredictor for ZeroNoise {
        fn predict_noise(&self, z: &Tensor, _t: usize) -> Result<Tensor> {
            Ok(Tensor::zeros(z.shape().to_vec()))
        }
    }

    fn setup() -> (Classifier, FeatureNet, Schedule) {
        (Classifier::init(11), FeatureNet::new(12), Schedule::default())
    }

    fn image() -> Tensor {
        RngStream::new(3).normal(vec![1, 1, 32, 32]).scale(0.3)
    }

    /// A target the untrained classifier does not predict for `image()`.
    fn cfg(clf: &Classifier, variant: Variant, tau: usize) -> SamplerConfig {
        let pred = clf.predict(&image()).unwrap()[0];
        SamplerConfig {
            guidance: GuidanceConfig { tau, target: 1 - pred, ..Default::default() },
            variant,
            lambda_schedule: vec![8.0],
            retain_states: true,
        }
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("dime".parse::<Variant>().is_err());
    }

    #[test]
    fn eval_counts_match_closed_form() {
        let (c, f, s) = setup();
        let nets = Nets { eps: &ZeroNoise, classifier: &c, featnet: &f, schedule: &s };
        for v in Variant::ALL {
            let tr = run(&image(), 0, &cfg(&c, v, 6), &nets, RngStream::new(1)).unwrap();
            assert_eq!(tr.eps_evals, v.eps_evals(6), "{v}");
            assert_eq!(tr.steps.len(), 6);
        }
        assert_eq!(Variant::DimeNested.eps_evals(60) as f64 / Variant::MaskDime.eps_evals(60) as f64, 15.75);
    }

    #[test]
    fn blends_and_initialization_are_exact() {
        let (c, f, s) = setup();
        let nets = Nets { eps: &ZeroNoise, classifier: &c, featnet: &f, schedule: &s };
        let x = image();
        let tr = run(&x, 0, &cfg(&c, Variant::MaskDime, 8), &nets, RngStream::new(2)).unwrap();
        let (z_tau, _) = forward_diffuse(&s, &x, 8, &RngStream::new(2).substream(0).substream(0)).unwrap();
        assert_eq!(tr.z_tau, z_tau);
        let first = tr.steps[0].states.as_ref().unwrap();
        assert_eq!(first.z_t, z_tau);
        assert_eq!(first.x_t, x);
        for step in &tr.steps {
            let st = step.states.as_ref().unwrap();
            for i in 0..x.len() {
                if st.mask.mz.data()[i] < 0.5 {
                    assert_eq!(st.z_next.data()[i].to_bits(), st.z_ref.data()[i].to_bits());
                }
                if st.mask.mx.data()[i] < 0.5 {
                    assert_eq!(st.x_next.data()[i].to_bits(), x.data()[i].to_bits());
                }
            }
        }
        assert_eq!(tr.counterfactual, tr.steps.last().unwrap().states.as_ref().unwrap().z_next);
    }

    #[test]
    fn deterministic_given_seed() {
        let (c, f, s) = setup();
        let nets = Nets { eps: &ZeroNoise, classifier: &c, featnet: &f, schedule: &s };
        let a = run(&image(), 4, &cfg(&c, Variant::MaskDime, 5), &nets, RngStream::new(9)).unwrap();
        let b = run(&image(), 4, &cfg(&c, Variant::MaskDime, 5), &nets, RngStream::new(9)).unwrap();
        assert!(a.same_result(&b));
    }

    #[test]
    fn fixed_masks_never_change() {
        let (c, f, s) = setup();
        let nets = Nets { eps: &ZeroNoise, classifier: &c, featnet: &f, schedule: &s };
        let tr = run(&image(), 0, &cfg(&c, Variant::FixedMask, 6), &nets, RngStream::new(3)).unwrap();
        let first = &tr.steps[0].states.as_ref().unwrap().mask;
        for st in &tr.steps {
            assert_eq!(&st.states.as_ref().unwrap().mask, first);
        }
    }

    #[test]
    fn already_target_is_skipped() {
        let (c, f, s) = setup();
        let nets = Nets { eps: &ZeroNoise, classifier: &c, featnet: &f, schedule: &s };
        let mut sc = cfg(&c, Variant::MaskDime, 5);
        sc.guidance.target = 1 - sc.guidance.target;
        let tr = run(&image(), 0, &sc, &nets, RngStream::new(1)).unwrap();
        assert!(tr.skipped);
        assert_eq!(tr.eps_evals_total, 0);
        assert_eq!(tr.counterfactual, image());
    }

    #[test]
    fn heatmaps_need_states_and_are_normalized() {
        let (c, f, s) = setup();
        let nets = Nets { eps: &ZeroNoise, classifier: &c, featnet: &f, schedule: &s };
        let mut sc = cfg(&c, Variant::MaskDime, 4);
        let tr = run(&image(), 0, &sc, &nets, RngStream::new(1)).unwrap();
        let maps = update_heatmaps(&tr).unwrap();
        assert_eq!(maps.len(), 4);
        for m in &maps {
            assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(m.abs_max(), 1.0);
        }
        sc.retain_states = false;
        let tr = run(&image(), 0, &sc, &nets, RngStream::new(1)).unwrap();
        assert_eq!(update_heatmaps(&tr).unwrap_err().kind(), "states_not_retained");
    }

    #[test]
    fn full_masks_match_unmasked_variant() {
        let (c, f, s) = setup();
        let nets = Nets { eps: &ZeroNoise, classifier: &c, featnet: &f, schedule: &s };
        let mut full = cfg(&c, Variant::MaskDime, 5);
        full.guidance.k = 1.0;
        full.guidance.rho = 1.0;
        let a = run(&image(), 0, &full, &nets, RngStream::new(5)).unwrap();
        let b = run(&image(), 0, &cfg(&c, Variant::NoMask, 5), &nets, RngStream::new(5)).unwrap();
        assert_eq!(a.counterfactual, b.counterfactual);
    }
}

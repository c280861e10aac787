//! The three networks: the noise predictor, the target classifier and a
//! frozen random-feature network used for perceptual distances.
//!
//! Every model is a named parameter table plus a forward function that
//! records onto an [`ndgrad::Graph`](crate::ndgrad::Graph). Parameters are
//! bound either as constants (inference, guidance) or as differentiable
//! leaves (training).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffusion::{NoisePredictor, Schedule};
use crate::error::{Error, Result};
use crate::ndgrad::{GradError, Graph, Tensor, Var};
use crate::persist::{Checkpoint, ModelKind};
use crate::rng::RngStream;

pub const TIME_EMBED_DIM: usize = 64;
pub const PENULTIMATE_DIM: usize = 64;
pub const FEATURE_DIM: usize = 128;
pub const NUM_CLASSES: usize = 2;

type Layout = Vec<(&'static str, Vec<usize>)>;

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
}

impl Params {
    /// He-normal weights, zero biases. Entries whose name ends in `.b` are
    /// biases; `zero_init` names are zero as well.
    fn init(layout: &Layout, stream: RngStream, zero_init: &[&str]) -> Self {
        let entries = layout
            .iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let t = if name.ends_with(".b") || zero_init.contains(name) {
                    Tensor::zeros(shape.clone())
                } else {
                    let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
                    let fan_in = if shape.len() == 2 { shape[0] } else { fan_in };
                    let std = (2.0 / fan_in as f32).sqrt();
                    stream.substream(i as u64).normal(shape.clone()).scale(std)
                };
                (name.to_string(), t)
            })
            .collect();
        Self { entries }
    }

    fn from_checkpoint(ck: &Checkpoint, kind: ModelKind, layout: &Layout) -> Result<Self> {
        if ck.kind != kind {
            return Err(Error::ModelShape(format!("expected a {kind:?} checkpoint, found {:?}", ck.kind)));
        }
        if ck.params.len() != layout.len() {
            return Err(Error::ModelShape(format!(
                "expected {} parameters, found {}",
                layout.len(),
                ck.params.len()
            )));
        }
        let mut entries = Vec::with_capacity(layout.len());
        for (name, shape) in layout {
            let t = ck.get(name).ok_or_else(|| Error::ModelShape(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ModelShape(format!("{name}: expected {shape:?}, found {:?}", t.shape())));
            }
            entries.push((name.to_string(), t.clone()));
        }
        Ok(Self { entries })
    }

    fn to_checkpoint(&self, kind: ModelKind) -> Checkpoint {
        Checkpoint { kind, params: self.entries.clone() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> Bound<'_> {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| if trainable { g.input(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { params: self, vars }
    }
}

struct Bound<'a> {
    params: &'a Params,
    vars: Vec<Var>,
}

impl Bound<'_> {
    fn get(&self, name: &str) -> Var {
        let i = self
            .params
            .entries
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }

    fn conv(&self, g: &mut Graph, x: Var, layer: &str) -> Result<Var, GradError> {
        let w = self.get(&format!("{layer}.w"));
        let b = self.get(&format!("{layer}.b"));
        g.conv2d(x, w, Some(b), 1, 1)
    }

    fn dense(&self, g: &mut Graph, x: Var, layer: &str) -> Result<Var, GradError> {
        let w = self.get(&format!("{layer}.w"));
        let b = self.get(&format!("{layer}.b"));
        let y = g.matmul(x, w)?;
        g.bias_channels(y, b)
    }
}

fn check_image(x: &[usize]) -> Result<()> {
    let s = crate::synthdata::IMAGE_SIZE;
    if x.len() != 4 || x[1] != 1 || x[2] != s || x[3] != s {
        return Err(Error::ModelShape(format!("expected [n, 1, {s}, {s}] input, got {x:?}")));
    }
    Ok(())
}

/// Standard sinusoidal embedding: `sin(t·f_i)` in the first half and
/// `cos(t·f_i)` in the second, `f_i = 10000^(−i/half)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * f;
        out[i] = a.sin() as f32;
        out[half + i] = a.cos() as f32;
    }
    out
}

// ---------------------------------------------------------------------------
// noise predictor

/// Two-level encoder/decoder with additive skips. Widths 32 → 64 → 64 at
/// 32², 16² and 8²; the timestep embedding enters every level as a
/// per-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonNet {
    params: Params,
}

const EPS_WIDTH: usize = 32;

fn eps_layout() -> Layout {
    let (w0, w1) = (EPS_WIDTH, 2 * EPS_WIDTH);
    let e = TIME_EMBED_DIM;
    vec![
        ("temb.w", vec![e, e]),
        ("temb.b", vec![e]),
        ("in.w", vec![w0, 1, 3, 3]),
        ("in.b", vec![w0]),
        ("d0.w", vec![w0, w0, 3, 3]),
        ("d0.b", vec![w0]),
        ("d0t.w", vec![e, w0]),
        ("d0t.b", vec![w0]),
        ("d1.w", vec![w1, w0, 3, 3]),
        ("d1.b", vec![w1]),
        ("d1t.w", vec![e, w1]),
        ("d1t.b", vec![w1]),
        ("mid.w", vec![w1, w1, 3, 3]),
        ("mid.b", vec![w1]),
        ("midt.w", vec![e, w1]),
        ("midt.b", vec![w1]),
        ("u1.w", vec![w1, w1, 3, 3]),
        ("u1.b", vec![w1]),
        ("u1t.w", vec![e, w1]),
        ("u1t.b", vec![w1]),
        ("u0a.w", vec![w0, w1, 3, 3]),
        ("u0a.b", vec![w0]),
        ("u0.w", vec![w0, w0, 3, 3]),
        ("u0.b", vec![w0]),
        ("u0t.w", vec![e, w0]),
        ("u0t.b", vec![w0]),
        ("out.w", vec![1, w0, 3, 3]),
        ("out.b", vec![1]),
    ]
}

impl EpsilonNet {
    pub fn init(seed: u64) -> Self {
        Self { params: Params::init(&eps_layout(), RngStream::new(seed).substream(0xE95), &["out.w"]) }
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.params.to_checkpoint(ModelKind::Epsilon)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self { params: Params::from_checkpoint(ck, ModelKind::Epsilon, &eps_layout())? })
    }

    fn forward(&self, g: &mut Graph, p: &Bound, z: Var, ts: &[usize]) -> Result<Var, GradError> {
        let n = ts.len();
        let emb: Vec<f32> = ts.iter().flat_map(|&t| timestep_embedding(t, TIME_EMBED_DIM)).collect();
        let emb = g.constant(Tensor::new(vec![n, TIME_EMBED_DIM], emb)?);
        let h = p.dense(g, emb, "temb")?;
        let temb = g.relu(h)?;

        let level = |g: &mut Graph, x: Var, layer: &str| -> Result<Var, GradError> {
            let y = p.conv(g, x, layer)?;
            let tb = p.dense(g, temb, &format!("{layer}t"))?;
            let y = g.bias_channels(y, tb)?;
            g.relu(y)
        };

        let x = p.conv(g, z, "in")?;
        let h0 = level(g, x, "d0")?;
        let x = g.avg_pool(h0, 2)?;
        let h1 = level(g, x, "d1")?;
        let x = g.avg_pool(h1, 2)?;
        let h2 = level(g, x, "mid")?;
        let x = g.upsample(h2, 2)?;
        let x = g.add(x, h1)?;
        let u1 = level(g, x, "u1")?;
        let x = p.conv(g, u1, "u0a")?;
        let x = g.upsample(x, 2)?;
        let x = g.add(x, h0)?;
        let u0 = level(g, x, "u0")?;
        p.conv(g, u0, "out")
    }

    /// ε prediction for a batch `[n, 1, H, W]` where sample `i` sits at
    /// noise level `ts[i]`.
    pub fn predict_batch(&self, z: &Tensor, ts: &[usize]) -> Result<Tensor> {
        check_image(z.shape())?;
        if ts.len() != z.shape()[0] {
            return Err(Error::InvalidArgument(format!("{} timesteps for batch of {}", ts.len(), z.shape()[0])));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let out = self.forward(&mut g, &p, zv, ts)?;
        Ok(g.value(out).clone())
    }
}

impl NoisePredictor for EpsilonNet {
    fn predict_noise(&self, z: &Tensor, t: usize) -> Result<Tensor> {
        let n = z.shape().first().copied().unwrap_or(0);
        self.predict_batch(z, &vec![t; n])
    }
}

// ---------------------------------------------------------------------------
// classifier

/// Three conv–relu–avgpool blocks (16, 32, 64 channels) and a two-layer
/// dense head; the hidden dense layer is the penultimate feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    params: Params,
}

fn classifier_layout() -> Layout {
    let s = crate::synthdata::IMAGE_SIZE / 8;
    vec![
        ("c1.w", vec![16, 1, 3, 3]),
        ("c1.b", vec![16]),
        ("c2.w", vec![32, 16, 3, 3]),
        ("c2.b", vec![32]),
        ("c3.w", vec![64, 32, 3, 3]),
        ("c3.b", vec![64]),
        ("fc1.w", vec![64 * s * s, PENULTIMATE_DIM]),
        ("fc1.b", vec![PENULTIMATE_DIM]),
        ("fc2.w", vec![PENULTIMATE_DIM, NUM_CLASSES]),
        ("fc2.b", vec![NUM_CLASSES]),
    ]
}

impl Classifier {
    pub fn init(seed: u64) -> Self {
        Self { params: Params::init(&classifier_layout(), RngStream::new(seed).substream(0xC1A5), &[]) }
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.params.to_checkpoint(ModelKind::Classifier)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self { params: Params::from_checkpoint(ck, ModelKind::Classifier, &classifier_layout())? })
    }

    /// Builds a classifier with an explicit parameter table, for fixtures.
    pub fn from_params(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let ck = Checkpoint { kind: ModelKind::Classifier, params: entries };
        Self::from_checkpoint(&ck)
    }

    fn trunk(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, GradError> {
        let mut h = x;
        for layer in ["c1", "c2", "c3"] {
            h = p.conv(g, h, layer)?;
            h = g.relu(h)?;
            h = g.avg_pool(h, 2)?;
        }
        let n = g.shape(h)[0];
        let flat = g.value(h).len() / n;
        let h = g.reshape(h, vec![n, flat])?;
        let h = p.dense(g, h, "fc1")?;
        g.relu(h)
    }

    fn head(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, GradError> {
        let h = self.trunk(g, p, x)?;
        p.dense(g, h, "fc2")
    }

    /// Records the logits `[n, 2]` of `x` onto `g` with frozen weights.
    pub fn logits_on(&self, g: &mut Graph, x: Var) -> Result<Var> {
        check_image(g.shape(x))?;
        let p = self.params.bind(g, false);
        Ok(self.head(g, &p, x)?)
    }

    /// Softmax probabilities `[n, 2]`.
    pub fn probs(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let l = self.logits_on(&mut g, xv)?;
        let p = g.softmax(l)?;
        Ok(g.value(p).clone())
    }

    /// `p(y | x)` for a single image.
    pub fn class_prob(&self, x: &Tensor, y: usize) -> Result<f32> {
        if y >= NUM_CLASSES {
            return Err(Error::InvalidArgument(format!("class {y}")));
        }
        let p = self.probs(x)?;
        if p.shape()[0] != 1 {
            return Err(Error::InvalidArgument("class_prob takes a single image".into()));
        }
        Ok(p.data()[y])
    }

    /// Argmax class per image.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let p = self.probs(x)?;
        Ok(p.data().chunks(NUM_CLASSES).map(|r| if r[1] > r[0] { 1 } else { 0 }).collect())
    }

    /// Penultimate activations `[n, 64]`.
    pub fn penultimate(&self, x: &Tensor) -> Result<Tensor> {
        check_image(x.shape())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let h = self.trunk(&mut g, &p, xv)?;
        Ok(g.value(h).clone())
    }

    /// `∇_x log p(y | x)` for a single image.
    pub fn input_grad_log_prob(&self, x: &Tensor, y: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let l = self.logits_on(&mut g, xv)?;
        let lp = g.log_softmax(l)?;
        let sel = g.gather(lp, &[y])?;
        let s = g.sum(sel)?;
        Ok(g.backward(s)?.wrt(xv))
    }
}

// ---------------------------------------------------------------------------
// frozen feature network

/// Two conv–relu–maxpool blocks (16 then 8 channels), 2×2 average pooling
/// to an 8×4×4 grid, and per-channel removal of the spatial mean. The
/// centring drops the level every non-negative activation map shares, so
/// the 128 values describe where structure sits. Weights are drawn once
/// from the seed and never updated.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNet {
    params: Params,
    seed: u64,
}

const FEAT_CHANNELS: usize = 8;
const FEAT_GRID: usize = 4;

fn featnet_layout() -> Layout {
    vec![
        ("f1.w", vec![16, 1, 3, 3]),
        ("f1.b", vec![16]),
        ("f2.w", vec![FEAT_CHANNELS, 16, 3, 3]),
        ("f2.b", vec![FEAT_CHANNELS]),
    ]
}

impl FeatureNet {
    pub fn new(seed: u64) -> Self {
        Self { params: Params::init(&featnet_layout(), RngStream::new(seed).substream(0xFEA7), &[]), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Records features `[n, 128]` of `x` onto `g`.
    pub fn features_on(&self, g: &mut Graph, x: Var) -> Result<Var> {
        check_image(g.shape(x))?;
        let p = self.params.bind(g, false);
        let mut h = x;
        for layer in ["f1", "f2"] {
            h = p.conv(g, h, layer)?;
            h = g.relu(h)?;
            h = g.max_pool(h, 2)?;
        }
        let pool = g.shape(h)[2] / FEAT_GRID;
        let h = g.avg_pool(h, pool)?;
        let n = g.shape(h)[0];
        let cells = FEAT_GRID * FEAT_GRID;
        let rows = g.reshape(h, vec![n * FEAT_CHANNELS, cells])?;
        let inv = 1.0 / cells as f32;
        let centre = g.constant(Tensor::from_fn(vec![cells, cells], |i| {
            if i / cells == i % cells {
                1.0 - inv
            } else {
                -inv
            }
        }));
        let centred = g.matmul(rows, centre)?;
        Ok(g.reshape(centred, vec![n, FEATURE_DIM])?)
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let f = self.features_on(&mut g, xv)?;
        Ok(g.value(f).clone())
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

// ---------------------------------------------------------------------------
// training

struct Adam {
    lr: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: i32,
}

impl Adam {
    const B1: f32 = 0.9;
    const B2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    fn new(params: &Params, lr: f32) -> Self {
        let zeros = || params.entries.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self { lr, m: zeros(), v: zeros(), step: 0 }
    }

    fn update(&mut self, params: &mut Params, grads: &[Tensor], lr_scale: f32) {
        self.step += 1;
        let c1 = 1.0 - Self::B1.powi(self.step);
        let c2 = 1.0 - Self::B2.powi(self.step);
        let lr = self.lr * lr_scale;
        for (i, (_, p)) in params.entries.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, gr)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = Self::B1 * m[j] + (1.0 - Self::B1) * gr;
                v[j] = Self::B2 * v[j] + (1.0 - Self::B2) * gr * gr;
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

struct Momentum {
    lr: f32,
    mu: f32,
    vel: Vec<Vec<f32>>,
}

impl Momentum {
    fn new(params: &Params, lr: f32, mu: f32) -> Self {
        Self { lr, mu, vel: params.entries.iter().map(|(_, t)| vec![0.0; t.len()]).collect() }
    }

    fn update(&mut self, params: &mut Params, grads: &[Tensor]) {
        for (i, (_, p)) in params.entries.iter_mut().enumerate() {
            let vel = &mut self.vel[i];
            for (j, (w, gr)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                vel[j] = self.mu * vel[j] + gr;
                *w -= self.lr * vel[j];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl TrainConfig {
    pub fn epsilon_default() -> Self {
        Self { epochs: 24, batch_size: 32, learning_rate: 2e-3, seed: 1 }
    }

    pub fn classifier_default() -> Self {
        Self { epochs: 4, batch_size: 32, learning_rate: 0.01, seed: 2 }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!("bad training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean loss over the last epoch.
    pub final_loss: f32,
    pub epoch_losses: Vec<f32>,
}

fn diverged(step: usize, loss: f32) -> Error {
    Error::Diverged { step, loss }
}

fn batches(n: usize, batch: usize, stream: RngStream, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream.derive(&[0x5A, epoch as u64]).rng());
    idx.chunks(batch).map(|c| c.to_vec()).collect()
}

fn stack(images: &[&Tensor]) -> Result<Tensor> {
    let parts: Vec<Tensor> = images.iter().map(|t| (*t).clone()).collect();
    Ok(Tensor::stack_first(&parts)?)
}

/// Fits ε_θ by mean squared error against the true forward noise, with `t`
/// uniform in `1..=T`. Learning rate follows a cosine decay to 10%.
pub fn train_epsilon(images: &[Tensor], schedule: &Schedule, cfg: &TrainConfig) -> Result<(EpsilonNet, TrainReport)> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::NoSamples);
    }
    for im in images {
        check_image(im.shape())?;
    }
    let stream = RngStream::new(cfg.seed);
    let mut net = EpsilonNet::init(cfg.seed);
    let mut opt = Adam::new(&net.params, cfg.learning_rate);
    let per_epoch = images.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0f64;
        for (bi, batch) in batches(images.len(), cfg.batch_size, stream, epoch).into_iter().enumerate() {
            let mut rng = stream.derive(&[0x7E, epoch as u64, bi as u64]).rng();
            let ts: Vec<usize> = batch.iter().map(|_| rng.gen_range(1..=schedule.steps())).collect();
            let x = stack(&batch.iter().map(|&i| &images[i]).collect::<Vec<_>>())?;
            let eps = Tensor::from_fn(x.shape().to_vec(), |_| rng.sample::<f32, _>(StandardNormal));
            let plane = x.len() / batch.len();
            let mut z = x.clone();
            for (s, &t) in ts.iter().enumerate() {
                let (a, b) = (schedule.alpha_bar(t).sqrt() as f32, (1.0 - schedule.alpha_bar(t)).sqrt() as f32);
                let range = s * plane..(s + 1) * plane;
                for (o, (xv, ev)) in z.data_mut()[range.clone()].iter_mut().zip(x.data()[range.clone()].iter().zip(&eps.data()[range])) {
                    *o = a * xv + b * ev;
                }
            }
            let mut g = Graph::new();
            let p = net.params.bind(&mut g, true);
            let zv = g.constant(z);
            let out = net.forward(&mut g, &p, zv, &ts).map_err(|_| diverged(step, f32::NAN))?;
            let target = g.constant(eps);
            let d = g.sub(out, target)?;
            let sq = g.square(d)?;
            let loss = g.mean(sq)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(diverged(step, lv));
            }
            let mut grads = g.backward(loss).map_err(|_| diverged(step, lv))?;
            let grads: Vec<Tensor> = p.vars.iter().map(|&v| grads.take(v)).collect();
            let progress = step as f32 / total.max(1) as f32;
            let scale = 0.1 + 0.9 * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos());
            opt.update(&mut net.params, &grads, scale);
            sum += lv as f64;
            step += 1;
        }
        let mean = (sum / per_epoch as f64) as f32;
        log::info!("epsilon epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
    }
    let final_loss = *epoch_losses.last().unwrap();
    Ok((net, TrainReport { steps: step, final_loss, epoch_losses }))
}

/// Minimum held-out accuracy accepted from [`train_classifier`].
pub const REQUIRED_ACCURACY: f64 = 0.98;

/// Cross-entropy training with SGD and momentum 0.9. Fails with
/// [`Error::AccuracyTooLow`] if held-out accuracy is below
/// [`REQUIRED_ACCURACY`].
pub fn train_classifier(
    train: &[(Tensor, usize)],
    held_out: &[(Tensor, usize)],
    cfg: &TrainConfig,
) -> Result<(Classifier, TrainReport, f64)> {
    cfg.validate()?;
    if train.is_empty() || held_out.is_empty() {
        return Err(Error::NoSamples);
    }
    let counts = train.iter().fold([0usize; NUM_CLASSES], |mut c, (_, y)| {
        c[(*y).min(NUM_CLASSES - 1)] += 1;
        c
    });
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::InvalidArgument(format!("unbalanced training labels {counts:?}")));
    }
    let stream = RngStream::new(cfg.seed);
    let mut clf = Classifier::init(cfg.seed);
    let mut opt = Momentum::new(&clf.params, cfg.learning_rate, 0.9);
    let mut step = 0usize;
    let mut epoch_losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0f64;
        let bs = batches(train.len(), cfg.batch_size, stream, epoch);
        let nb = bs.len();
        for batch in bs {
            let x = stack(&batch.iter().map(|&i| &train[i].0).collect::<Vec<_>>())?;
            let ys: Vec<usize> = batch.iter().map(|&i| train[i].1).collect();
            let mut g = Graph::new();
            let p = clf.params.bind(&mut g, true);
            let xv = g.constant(x);
            let logits = clf.head(&mut g, &p, xv).map_err(|_| diverged(step, f32::NAN))?;
            let lp = g.log_softmax(logits)?;
            let sel = g.gather(lp, &ys)?;
            let m = g.mean(sel)?;
            let loss = g.scale(m, -1.0)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(diverged(step, lv));
            }
            let mut grads = g.backward(loss)?;
            let grads: Vec<Tensor> = p.vars.iter().map(|&v| grads.take(v)).collect();
            opt.update(&mut clf.params, &grads);
            sum += lv as f64;
            step += 1;
        }
        let mean = (sum / nb as f64) as f32;
        log::info!("classifier epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
    }
    let accuracy = accuracy(&clf, held_out)?;
    log::info!("classifier held-out accuracy {accuracy:.4}");
    if accuracy < REQUIRED_ACCURACY {
        return Err(Error::AccuracyTooLow { accuracy, required: REQUIRED_ACCURACY });
    }
    let final_loss = *epoch_losses.last().unwrap();
    Ok((clf, TrainReport { steps: step, final_loss, epoch_losses }, accuracy))
}

pub fn accuracy(clf: &Classifier, data: &[(Tensor, usize)]) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in data.chunks(64) {
        let x = stack(&chunk.iter().map(|(t, _)| t).collect::<Vec<_>>())?;
        let pred = clf.predict(&x)?;
        correct += pred.iter().zip(chunk).filter(|(p, (_, y))| *p == y).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

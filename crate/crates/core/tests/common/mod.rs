//! Shared test support: f64 reference forward passes written with plain
//! loops (no tape, no im2col), finite-difference helpers, and a trained-model
//! fixture cached under the cargo target directory.

#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;
use std::sync::OnceLock;

use maskdiff::cli::Models;
use maskdiff::config::RunConfig;
use maskdiff::guidance::GuidanceConfig;
use maskdiff::models::{self, Classifier, EpsilonNet, FeatureNet, Params};
use maskdiff::persist;
use maskdiff::synthdata::{self, Dataset, Sample};

// ---------------------------------------------------------------------------
// reference forward

fn param<'a>(p: &'a Params, name: &str) -> (Vec<usize>, Vec<f64>) {
    let (_, t) = p.iter().find(|(n, _)| *n == name).unwrap_or_else(|| panic!("no parameter {name}"));
    (t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect())
}

/// 3×3 convolution, stride 1, zero padding 1. `x` is `[c, h, w]`.
pub fn conv3(x: &[f64], c: usize, h: usize, w: usize, p: &Params, layer: &str) -> (Vec<f64>, usize) {
    let (ws, wt) = param(p, &format!("{layer}.w"));
    let (_, b) = param(p, &format!("{layer}.b"));
    let co = ws[0];
    assert_eq!(ws[1], c);
    let mut y = vec![0.0; co * h * w];
    for o in 0..co {
        for i in 0..h {
            for j in 0..w {
                let mut acc = b[o];
                for ci in 0..c {
                    for di in 0..3 {
                        for dj in 0..3 {
                            let (ii, jj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                continue;
                            }
                            acc += wt[((o * c + ci) * 3 + di) * 3 + dj] * x[(ci * h + ii as usize) * w + jj as usize];
                        }
                    }
                }
                y[(o * h + i) * w + j] = acc;
            }
        }
    }
    (y, co)
}

/// Branch choices of the piecewise-smooth parts (ReLU signs, max-pool
/// winners, signs of `x_t − x`). Equal traces at both probe points mean a
/// central difference did not straddle a kink.
pub type Trace = Vec<u8>;

pub fn relu(x: &mut [f64], trace: &mut Trace) {
    for v in x {
        trace.push((*v > 0.0) as u8);
        *v = v.max(0.0);
    }
}

/// Non-overlapping `k×k` average or max pooling.
pub fn pool(x: &[f64], c: usize, h: usize, w: usize, k: usize, max: bool, trace: &mut Trace) -> Vec<f64> {
    let (ho, wo) = (h / k, w / k);
    let mut y = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let vals: Vec<f64> = (0..k * k).map(|q| x[(ch * h + i * k + q / k) * w + j * k + q % k]).collect();
                y[(ch * ho + i) * wo + j] = if max {
                    let (arg, m) = vals.iter().enumerate().fold((0, f64::NEG_INFINITY), |a, (q, &v)| if v > a.1 { (q, v) } else { a });
                    trace.push(arg as u8);
                    m
                } else {
                    vals.iter().sum::<f64>() / (k * k) as f64
                };
            }
        }
    }
    y
}

pub fn dense(x: &[f64], p: &Params, layer: &str) -> Vec<f64> {
    let (ws, wt) = param(p, &format!("{layer}.w"));
    let (_, b) = param(p, &format!("{layer}.b"));
    let (n_in, n_out) = (ws[0], ws[1]);
    assert_eq!(x.len(), n_in);
    (0..n_out).map(|o| b[o] + (0..n_in).map(|i| x[i] * wt[i * n_out + o]).sum::<f64>()).collect()
}

pub fn classifier_logits(clf: &Classifier, x: &[f64], trace: &mut Trace) -> Vec<f64> {
    let p = clf.params();
    let (mut h, mut c, mut s) = (x.to_vec(), 1, 32);
    for layer in ["c1", "c2", "c3"] {
        let (mut y, co) = conv3(&h, c, s, s, p, layer);
        relu(&mut y, trace);
        h = pool(&y, co, s, s, 2, false, trace);
        c = co;
        s /= 2;
    }
    let mut hid = dense(&h, p, "fc1");
    relu(&mut hid, trace);
    dense(&hid, p, "fc2")
}

/// `−log softmax(logits)[target]`.
pub fn class_loss(clf: &Classifier, x: &[f64], target: usize, trace: &mut Trace) -> f64 {
    let l = classifier_logits(clf, x, trace);
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + l.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - l[target]
}

pub fn features(f: &FeatureNet, x: &[f64], trace: &mut Trace) -> Vec<f64> {
    let p = f.params();
    let (mut h, mut c, mut s) = (x.to_vec(), 1, 32);
    for layer in ["f1", "f2"] {
        let (mut y, co) = conv3(&h, c, s, s, p, layer);
        relu(&mut y, trace);
        h = pool(&y, co, s, s, 2, true, trace);
        c = co;
        s /= 2;
    }
    let h = pool(&h, c, s, s, s / 4, false, trace);
    let mut out = Vec::with_capacity(c * 16);
    for ch in h.chunks(16) {
        let mean = ch.iter().sum::<f64>() / 16.0;
        out.extend(ch.iter().map(|v| v - mean));
    }
    out
}

/// Returns `(L_class, L)` with
/// `L = λ_c·L_class + λ_p·‖f(x_t) − f(x)‖²/128 + λ_l·mean|x_t − x|`.
/// `fx` are the features of `x`.
pub fn joint_loss(clf: &Classifier, fnet: &FeatureNet, x_t: &[f64], x: &[f64], fx: &[f64], cfg: &GuidanceConfig, trace: &mut Trace) -> (f64, f64) {
    let a = features(fnet, x_t, trace);
    let perceptual = a.iter().zip(fx).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / a.len() as f64;
    let mut l1 = 0.0;
    for (u, v) in x_t.iter().zip(x) {
        trace.push((u > v) as u8);
        l1 += (u - v).abs();
    }
    l1 /= x.len() as f64;
    let class = class_loss(clf, x_t, cfg.target, trace);
    (class, cfg.lambda_c as f64 * class + cfg.lambda_p as f64 * perceptual + cfg.lambda_l as f64 * l1)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn to_f64(t: &maskdiff::ndgrad::Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

// ---------------------------------------------------------------------------
// trained fixture

pub struct Fixture {
    pub cfg: RunConfig,
    pub data: Dataset,
    pub models: Models,
}

impl Fixture {
    /// Eval images of the source class.
    pub fn source_eval(&self) -> Vec<Sample> {
        maskdiff::cli::select_eval(&self.cfg, self.data.eval.clone())
    }
}

fn cache_dir(cfg: &RunConfig) -> PathBuf {
    let mut h = DefaultHasher::new();
    cfg.to_text().hash(&mut h);
    env!("CARGO_PKG_VERSION").hash(&mut h);
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("maskdiff-fixture-{:016x}", h.finish()))
}

/// Default configuration, trained once and cached on disk. Retrains when
/// the cache is missing or no longer matches the model layout.
pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = RunConfig::default();
        let data = synthdata::generate(&cfg.dataset_spec()).expect("dataset");
        let dir = cache_dir(&cfg);
        let (eps_path, clf_path) = (dir.join("eps.mdck"), dir.join("classifier.mdck"));
        let schedule = cfg.schedule().unwrap();

        let eps = match persist::load_checkpoint(&eps_path).and_then(|c| EpsilonNet::from_checkpoint(&c)) {
            Ok(n) => n,
            Err(_) => {
                eprintln!("training epsilon net for the test fixture (one-off, cached in {})", dir.display());
                let images: Vec<_> = data.train.iter().map(|s| s.image.clone()).collect();
                let (net, _) = models::train_epsilon(&images, &schedule, &cfg.ddpm_train()).expect("epsilon training");
                persist::save_checkpoint(&eps_path, &net.to_checkpoint()).unwrap();
                net
            }
        };
        let classifier = match persist::load_checkpoint(&clf_path).and_then(|c| Classifier::from_checkpoint(&c)) {
            Ok(c) => c,
            Err(_) => {
                let pairs = |v: &[Sample]| v.iter().map(|s| (s.image.clone(), s.label)).collect::<Vec<_>>();
                let (clf, _, _) =
                    models::train_classifier(&pairs(&data.train), &pairs(&data.eval), &cfg.clf_train()).expect("classifier training");
                persist::save_checkpoint(&clf_path, &clf.to_checkpoint()).unwrap();
                clf
            }
        };
        let featnet = FeatureNet::new(cfg.featnet_seed());
        Fixture { cfg, data, models: Models { eps, classifier, featnet, schedule } }
    })
}

pub fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

// ---------------------------------------------------------------------------
// gradient check of the guidance loss

#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub instances: usize,
    /// Worst norm-wise relative error of `∇_{z_t}` of the joint loss over
    /// the probed pixels, against `s/√ᾱ_t` times the central differences.
    pub joint: f64,
    /// Same for `∇ L_class` alone.
    pub class: f64,
    /// Worst relative mismatch between the library and reference loss
    /// values.
    pub value: f64,
    pub probes: usize,
    /// Probes discarded because they straddled a kink.
    pub straddled: usize,
}

/// Pixels probed per instance.
pub const PROBES: usize = 8;

/// Random small instances: freshly initialised networks, random images and
/// weights, random level `t`. Each instance probes random pixels with
/// central differences of step `h`; probes whose two points fall on
/// different smooth pieces are redrawn.
pub fn check_guidance_gradients(instances: usize, seed: u64, h: f64) -> GradCheck {
    use maskdiff::diffusion::Schedule;
    use maskdiff::guidance::{guidance_signal, joint_loss as lib_joint_loss, LossNets};
    use maskdiff::ndgrad::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    let schedule = Schedule::default();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck { instances, ..Default::default() };
    for _ in 0..instances {
        let clf = Classifier::init(rng.gen());
        let fnet = FeatureNet::new(rng.gen());
        let x: Vec<f32> = (0..1024).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x_t: Vec<f32> = x.iter().map(|v| v + 0.3 * rng.sample::<f32, _>(StandardNormal)).collect();
        let cfg = GuidanceConfig {
            lambda_c: rng.gen_range(0.5..15.0),
            lambda_p: rng.gen_range(0.0..30.0),
            lambda_l: rng.gen_range(0.0..0.1),
            scale: rng.gen_range(1.0..10.0),
            target: rng.gen_range(0..2),
            ..GuidanceConfig::default()
        };
        let t = rng.gen_range(0..=schedule.steps());
        let shape = vec![1, 1, 32, 32];
        let (xt_t, x_tn) = (Tensor::new(shape.clone(), x_t.clone()).unwrap(), Tensor::new(shape, x.clone()).unwrap());
        let nets = LossNets { classifier: &clf, featnet: &fnet };
        let (xd, xtd): (Vec<f64>, Vec<f64>) = (x.iter().map(|&v| v as f64).collect(), x_t.iter().map(|&v| v as f64).collect());
        let fx = features(&fnet, &xd, &mut Trace::new());

        let mut base = Trace::new();
        let (_, ref_value) = joint_loss(&clf, &fnet, &xtd, &xd, &fx, &cfg, &mut base);
        let (lib_value, _) = lib_joint_loss(&xt_t, &x_tn, &cfg, nets).unwrap();
        out.value = out.value.max(rel_err(lib_value as f64, ref_value));

        let coef = cfg.scale as f64 / schedule.alpha_bar(t).sqrt();
        let grad_joint = to_f64(&guidance_signal(&xt_t, &x_tn, &cfg, t, &schedule, nets).unwrap().grad_z);
        let class_cfg = GuidanceConfig { lambda_c: 1.0, lambda_p: 0.0, lambda_l: 0.0, scale: 1.0, ..cfg.clone() };
        let grad_class = to_f64(&guidance_signal(&xt_t, &x_tn, &class_cfg, 0, &schedule, nets).unwrap().grad_z);

        let (mut an_j, mut fd_j, mut an_c, mut fd_c) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut tries = 0;
        while an_j.len() < PROBES {
            tries += 1;
            assert!(tries < 50 * PROBES, "no smooth probes found");
            let i = rng.gen_range(0..1024);
            let mut p = xtd.clone();
            p[i] += h;
            let mut tp = Trace::new();
            let (cp, jp) = joint_loss(&clf, &fnet, &p, &xd, &fx, &cfg, &mut tp);
            p[i] -= 2.0 * h;
            let mut tm = Trace::new();
            let (cm, jm) = joint_loss(&clf, &fnet, &p, &xd, &fx, &cfg, &mut tm);
            out.probes += 1;
            if tp != base || tm != base {
                out.straddled += 1;
                continue;
            }
            an_j.push(grad_joint[i]);
            fd_j.push(coef * (jp - jm) / (2.0 * h));
            an_c.push(grad_class[i]);
            fd_c.push((cp - cm) / (2.0 * h));
        }
        out.joint = out.joint.max(norm_rel_err(&an_j, &fd_j));
        out.class = out.class.max(norm_rel_err(&an_c, &fd_c));
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn norm_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / n(a).max(n(b)).max(1e-12)
}

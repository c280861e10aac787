//! Command-line front end. Each subcommand is also a plain function so the
//! pipeline can be driven from code.
//!
//! Output directory layout:
//!
//! ```text
//! config.txt            resolved configuration
//! records.jsonl         one trajectory record per explained image
//! timings.tsv           wall-clock per image (kept out of the records)
//! cf/NNNNN.{mdtf,pgm}   counterfactuals
//! diversity/NNNNN_R.mdtf
//! states/NNNNN/tTTT_{z,znext,mz,mx}.mdtf   with --retain-states
//! heatmaps/NNNNN/tTTT.pgm, tTTT_{mz,mx}.pbm
//! report.txt            metrics
//! ablation.tsv, baselines.tsv, efficiency.tsv
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::diffusion::Schedule;
use crate::error::{Error, Result};
use crate::metrics::{self, EvalPair, MetricReport};
use crate::models::{self, Classifier, EpsilonNet, FeatureNet};
use crate::ndgrad::Tensor;
use crate::persist;
use crate::sampler::{self, Nets, SamplerConfig, Trajectory, Variant};
use crate::synthdata::{self, Sample};

#[derive(Debug, Parser)]
#[command(name = "maskdiff", version, about = "Masked diffusion counterfactuals on a synthetic image domain")]
pub struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for per-image work.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Sampler variant, overriding the config.
    #[arg(long, global = true)]
    pub variant: Option<Variant>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Keep per-step tensors so `heatmap` can run afterwards.
    #[arg(long, global = true)]
    pub retain_states: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Train the noise-prediction network.
    TrainDdpm,
    /// Train the classifier to be explained.
    TrainClf,
    /// Produce counterfactuals for eval images of the source class.
    Explain,
    /// Compare mask variants on shared seeds.
    Ablate,
    /// Score the records written by `explain`.
    Eval,
    /// Render per-step update heatmaps from retained states.
    Heatmap,
}

/// Resolved settings for one invocation.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub cfg: RunConfig,
    pub jobs: usize,
    pub retain_states: bool,
}

impl Ctx {
    pub fn new(cfg: RunConfig) -> Self {
        Self { cfg, jobs: 1, retain_states: false }
    }

    fn out(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.cfg.out_dir.join(rel)
    }
}

impl Cli {
    /// Loads the config and applies flag and environment overrides.
    pub fn context(&self) -> Result<Ctx> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        }
        .with_env_seed()?;
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if self.jobs == 0 {
            return Err(Error::InvalidArgument("--jobs must be at least 1".into()));
        }
        Ok(Ctx { cfg, jobs: self.jobs, retain_states: self.retain_states })
    }
}

/// Runs one subcommand and returns a short summary for stdout.
pub fn execute(command: Command, ctx: &Ctx) -> Result<String> {
    match command {
        Command::GenData => gen_data(ctx),
        Command::TrainDdpm => train_ddpm(ctx),
        Command::TrainClf => train_clf(ctx),
        Command::Explain => explain(ctx),
        Command::Ablate => ablate(ctx),
        Command::Eval => eval(ctx).map(|r| format!("flip_rate {:.4} over {} samples", r.flip_rate, r.samples)),
        Command::Heatmap => heatmap(ctx).map(|n| format!("wrote {n} heatmap frames")),
    }
}

/// Maps `f` over `items` on `jobs` threads. Results keep the input order, so
/// output does not depend on `jobs`.
pub fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                let failed = r.is_err();
                *slots[i].lock().unwrap() = Some(r);
                if failed {
                    next.store(items.len(), Ordering::Relaxed);
                }
            });
        }
    });
    let mut out = Vec::with_capacity(items.len());
    for slot in slots {
        match slot.into_inner().unwrap() {
            Some(r) => out.push(r?),
            None => break,
        }
    }
    Ok(out)
}

pub fn gen_data(ctx: &Ctx) -> Result<String> {
    let ds = synthdata::generate(&ctx.cfg.dataset_spec())?;
    synthdata::write_dir_atomic(&ds, &ctx.cfg.data_dir)?;
    Ok(format!("wrote {} train and {} eval samples to {}", ds.train.len(), ds.eval.len(), ctx.cfg.data_dir.display()))
}

pub fn train_ddpm(ctx: &Ctx) -> Result<String> {
    let ds = synthdata::read_dir(&ctx.cfg.data_dir)?;
    let images: Vec<Tensor> = ds.train.into_iter().map(|s| s.image).collect();
    let (net, report) = models::train_epsilon(&images, &ctx.cfg.schedule()?, &ctx.cfg.ddpm_train())?;
    persist::save_checkpoint(&ctx.cfg.eps_checkpoint, &net.to_checkpoint())?;
    Ok(format!("trained epsilon net: {} steps, final loss {:.5}", report.steps, report.final_loss))
}

pub fn train_clf(ctx: &Ctx) -> Result<String> {
    let ds = synthdata::read_dir(&ctx.cfg.data_dir)?;
    let pairs = |v: Vec<Sample>| v.into_iter().map(|s| (s.image, s.label)).collect::<Vec<_>>();
    let (clf, report, acc) = models::train_classifier(&pairs(ds.train), &pairs(ds.eval), &ctx.cfg.clf_train())?;
    persist::save_checkpoint(&ctx.cfg.classifier_checkpoint, &clf.to_checkpoint())?;
    Ok(format!("trained classifier: {} steps, final loss {:.5}, held-out accuracy {acc:.4}", report.steps, report.final_loss))
}

/// Trained models plus the fixed feature network.
pub struct Models {
    pub eps: EpsilonNet,
    pub classifier: Classifier,
    pub featnet: FeatureNet,
    pub schedule: Schedule,
}

impl Models {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            eps: EpsilonNet::from_checkpoint(&persist::load_checkpoint(&cfg.eps_checkpoint)?)?,
            classifier: Classifier::from_checkpoint(&persist::load_checkpoint(&cfg.classifier_checkpoint)?)?,
            featnet: FeatureNet::new(cfg.featnet_seed()),
            schedule: cfg.schedule()?,
        })
    }

    pub fn nets(&self) -> Nets<'_, EpsilonNet> {
        Nets { eps: &self.eps, classifier: &self.classifier, featnet: &self.featnet, schedule: &self.schedule }
    }
}

/// Eval images of the source class, capped by `limit`.
pub fn select_eval(cfg: &RunConfig, eval: Vec<Sample>) -> Vec<Sample> {
    let mut v: Vec<Sample> = eval.into_iter().filter(|s| s.label == cfg.source).collect();
    if cfg.limit > 0 {
        v.truncate(cfg.limit);
    }
    v
}

/// Runs one sampler configuration over `samples` with per-image streams from
/// `cfg`, so different configurations see the same noise.
pub fn run_samples(
    cfg: &RunConfig,
    sampler_cfg: &SamplerConfig,
    models: &Models,
    samples: &[Sample],
    jobs: usize,
) -> Result<Vec<Trajectory>> {
    let nets = models.nets();
    par_map(samples, jobs, |s| {
        let id = s.id as u64;
        sampler::run(&s.image, id, sampler_cfg, &nets, cfg.sample_stream(id))
    })
}

pub fn eval_pairs(cfg: &RunConfig, samples: &[Sample], trajs: &[Trajectory]) -> Vec<EvalPair> {
    samples
        .iter()
        .zip(trajs)
        .map(|(s, t)| EvalPair {
            id: s.id as u64,
            original: s.image.clone(),
            counterfactual: t.counterfactual.clone(),
            source: cfg.source,
            target: cfg.target,
            causal_mask: Some(s.causal_mask.clone()),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLine {
    pub t: usize,
    pub p_target: f32,
    pub loss_class: f32,
    pub loss_perceptual: f32,
    pub loss_l1: f32,
    pub mz: usize,
    pub mx: usize,
}

/// One line of `records.jsonl`. Wall-clock time is deliberately absent so
/// repeated runs give identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: u64,
    pub variant: String,
    pub source: usize,
    pub target: usize,
    pub tau: usize,
    pub s: f32,
    pub k: f32,
    pub rho: f32,
    pub lambda_c: f32,
    pub attempts: usize,
    pub skipped: bool,
    pub flipped: bool,
    pub p_before: f32,
    pub p_after: f32,
    pub eps_evals: usize,
    pub eps_evals_total: usize,
    pub counterfactual: String,
    pub steps: Vec<StepLine>,
}

impl Record {
    fn new(cfg: &RunConfig, sc: &SamplerConfig, t: &Trajectory, cf_path: String) -> Self {
        Self {
            id: t.sample_id,
            variant: t.variant.to_string(),
            source: cfg.source,
            target: cfg.target,
            tau: t.tau,
            s: t.scale,
            k: sc.guidance.k,
            rho: sc.guidance.rho,
            lambda_c: t.lambda_c,
            attempts: t.attempts,
            skipped: t.skipped,
            flipped: t.flipped,
            p_before: t.p_before,
            p_after: t.p_after,
            eps_evals: t.eps_evals,
            eps_evals_total: t.eps_evals_total,
            counterfactual: cf_path,
            steps: t
                .steps
                .iter()
                .map(|s| StepLine {
                    t: s.t,
                    p_target: s.p_target,
                    loss_class: s.loss.class,
                    loss_perceptual: s.loss.perceptual,
                    loss_l1: s.loss.l1,
                    mz: s.mz_count,
                    mx: s.mx_count,
                })
                .collect(),
        }
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn save_states(dir: &Path, t: &Trajectory) -> Result<()> {
    for step in &t.steps {
        let s = step.states.as_ref().ok_or(Error::StatesNotRetained)?;
        let base = format!("t{:03}", step.t);
        persist::save_tensor(&dir.join(format!("{base}_z.mdtf")), &s.z_t)?;
        persist::save_tensor(&dir.join(format!("{base}_znext.mdtf")), &s.z_next)?;
        persist::save_tensor(&dir.join(format!("{base}_mz.mdtf")), &s.mask.mz)?;
        persist::save_tensor(&dir.join(format!("{base}_mx.mdtf")), &s.mask.mx)?;
    }
    Ok(())
}

pub fn explain(ctx: &Ctx) -> Result<String> {
    let cfg = &ctx.cfg;
    let models = Models::load(cfg)?;
    let samples = select_eval(cfg, synthdata::read_dir(&cfg.data_dir)?.eval);
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    let sc = cfg.sampler(ctx.retain_states);
    let trajs = run_samples(cfg, &sc, &models, &samples, ctx.jobs)?;

    let mut records = String::new();
    let mut timings = String::from("id\twall_ms\n");
    for t in &trajs {
        let rel = format!("cf/{:05}.mdtf", t.sample_id);
        persist::save_tensor(&ctx.out(&rel), &t.counterfactual)?;
        persist::save_image_pgm(&ctx.out(format!("cf/{:05}.pgm", t.sample_id)), &t.counterfactual)?;
        if ctx.retain_states && !t.skipped {
            save_states(&ctx.out(format!("states/{:05}", t.sample_id)), t)?;
        }
        let line = serde_json::to_string(&Record::new(cfg, &sc, t, rel))
            .map_err(|e| Error::InvalidArgument(format!("record encoding: {e}")))?;
        records.push_str(&line);
        records.push('\n');
        let _ = writeln!(timings, "{}\t{:.3}", t.sample_id, ms(t.wall));
    }
    persist::write_atomic(&ctx.out("records.jsonl"), records.as_bytes())?;
    persist::write_atomic(&ctx.out("timings.tsv"), timings.as_bytes())?;
    persist::write_atomic(&ctx.out("config.txt"), cfg.to_text().as_bytes())?;

    // Repeated runs with fresh noise on a few images, for the diversity score.
    let div_cfg = SamplerConfig { retain_states: false, ..sc };
    let chosen: Vec<&Sample> = samples
        .iter()
        .zip(&trajs)
        .filter(|(_, t)| !t.skipped)
        .map(|(s, _)| s)
        .take(if cfg.diversity_runs >= 2 { cfg.diversity_samples } else { 0 })
        .collect();
    let jobs: Vec<(&Sample, usize)> =
        chosen.iter().flat_map(|&s| (0..cfg.diversity_runs).map(move |r| (s, r))).collect();
    let nets = models.nets();
    let runs = par_map(&jobs, ctx.jobs, |&(s, r)| {
        let id = s.id as u64;
        sampler::run(&s.image, id, &div_cfg, &nets, cfg.diversity_stream(id, r))
    })?;
    for ((s, r), t) in jobs.iter().zip(&runs) {
        persist::save_tensor(&ctx.out(format!("diversity/{:05}_{r}.mdtf", s.id)), &t.counterfactual)?;
    }

    let flipped = trajs.iter().filter(|t| t.flipped || t.skipped).count();
    Ok(format!(
        "explained {} images with {}: {flipped} reach the target class; records in {}",
        trajs.len(),
        sc.variant,
        ctx.out("records.jsonl").display()
    ))
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Malformed { path: path.into(), reason: format!("line {}: {e}", i + 1) })
        })
        .collect()
}

fn diversity_groups(dir: &Path) -> Result<Vec<Vec<PathBuf>>> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(Vec::new());
    };
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".mdtf"))
        .collect();
    names.sort();
    let mut groups: Vec<(String, Vec<PathBuf>)> = Vec::new();
    for n in names {
        let id = n.split('_').next().unwrap_or("").to_string();
        match groups.last_mut() {
            Some((last, v)) if *last == id => v.push(dir.join(&n)),
            _ => groups.push((id, vec![dir.join(&n)])),
        }
    }
    Ok(groups.into_iter().map(|(_, v)| v).collect())
}

pub fn eval(ctx: &Ctx) -> Result<MetricReport> {
    let cfg = &ctx.cfg;
    let records = read_records(&ctx.out("records.jsonl"))?;
    if records.is_empty() {
        return Err(Error::NoSamples);
    }
    let models = Models::load(cfg)?;
    let ds = synthdata::read_dir(&cfg.data_dir)?;
    let mut pairs = Vec::with_capacity(records.len());
    for r in &records {
        let s = ds
            .eval
            .iter()
            .find(|s| s.id as u64 == r.id)
            .ok_or_else(|| Error::InvalidArgument(format!("record {} has no eval image", r.id)))?;
        pairs.push(EvalPair {
            id: r.id,
            original: s.image.clone(),
            counterfactual: persist::load_tensor(&ctx.out(&r.counterfactual))?,
            source: r.source,
            target: r.target,
            causal_mask: Some(s.causal_mask.clone()),
        });
    }
    let mut report = metrics::evaluate(&pairs, &models.classifier, &models.featnet, cfg.sfid_repeats, cfg.sfid_seed())?;
    let mut sigmas = Vec::new();
    for group in diversity_groups(&ctx.out("diversity"))? {
        let runs = group.iter().map(|p| persist::load_tensor(p)).collect::<Result<Vec<_>>>()?;
        if runs.len() >= 2 {
            sigmas.push(metrics::diversity_sigma(&runs, &models.featnet)?);
        }
    }
    if !sigmas.is_empty() {
        report.sigma_l = Some(sigmas.iter().sum::<f64>() / sigmas.len() as f64);
    }
    persist::write_atomic(&ctx.out("report.txt"), report.to_text().as_bytes())?;
    Ok(report)
}

/// Rows of the ablation table: label, variant, guidance scale, ρ.
pub fn ablation_rows(cfg: &RunConfig) -> [(&'static str, Variant, f32, f32); 5] {
    [
        ("no_mask(s=1)", Variant::NoMask, 1.0, cfg.rho),
        ("no_mask(s=8)", Variant::NoMask, 8.0, cfg.rho),
        ("fixed_mask", Variant::FixedMask, cfg.s, cfg.rho),
        ("mask(rho=1)", Variant::MaskDime, cfg.s, 1.0),
        ("maskdime(rho=0.5)", Variant::MaskDime, cfg.s, 0.5),
    ]
}

const TABLE_HEADER: &str = "row\tvariant\ts\trho\tsamples\tflip_rate\tcout\tproxy_fid\tproxy_sfid\tl1\tlocality_median\teps_evals_mean\n";

fn table_row(label: &str, sc: &SamplerConfig, report: &MetricReport, trajs: &[Trajectory]) -> String {
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.6}"));
    let sfid = opt(report.proxy_sfid.as_ref().map(|r| r.mean));
    let loc = opt(report.locality_median);
    let fid = opt(report.proxy_fid);
    let evals = trajs.iter().map(|t| t.eps_evals_total).sum::<usize>() as f64 / trajs.len() as f64;
    format!(
        "{label}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{fid}\t{sfid}\t{:.6}\t{loc}\t{evals:.2}\n",
        sc.variant, sc.guidance.scale, sc.guidance.rho, report.samples, report.flip_rate, report.cout, report.l1
    )
}

pub fn ablate(ctx: &Ctx) -> Result<String> {
    let cfg = &ctx.cfg;
    let models = Models::load(cfg)?;
    let samples = select_eval(cfg, synthdata::read_dir(&cfg.data_dir)?.eval);
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    let score = |sc: &SamplerConfig, samples: &[Sample]| -> Result<(MetricReport, Vec<Trajectory>)> {
        let trajs = run_samples(cfg, sc, &models, samples, ctx.jobs)?;
        let pairs = eval_pairs(cfg, samples, &trajs);
        let report = metrics::evaluate(&pairs, &models.classifier, &models.featnet, cfg.sfid_repeats, cfg.sfid_seed())?;
        Ok((report, trajs))
    };

    let mut table = String::from(TABLE_HEADER);
    for (label, variant, s, rho) in ablation_rows(cfg) {
        let mut sc = cfg.sampler(false);
        sc.variant = variant;
        sc.guidance.scale = s;
        sc.guidance.rho = rho;
        let (report, trajs) = score(&sc, &samples)?;
        table.push_str(&table_row(label, &sc, &report, &trajs));
    }
    persist::write_atomic(&ctx.out("ablation.tsv"), table.as_bytes())?;

    // Extra baselines: a pixel-difference mask, and the nested sampler on a
    // small subset since it costs (τ + 1)/4 + 1/2 times more.
    let nested = &samples[..cfg.nested_samples.min(samples.len())];
    let mut baselines = String::from(TABLE_HEADER);
    for (variant, subset) in [(Variant::PixelDiffMask, &samples[..]), (Variant::DimeNested, nested)] {
        if subset.is_empty() {
            continue;
        }
        let sc = SamplerConfig { variant, ..cfg.sampler(false) };
        let (report, trajs) = score(&sc, subset)?;
        baselines.push_str(&table_row(variant.name(), &sc, &report, &trajs));
    }
    persist::write_atomic(&ctx.out("baselines.tsv"), baselines.as_bytes())?;

    // Cost of a single attempt, counted and timed on the same images.
    let mut eff = String::from("variant\tsamples\teps_evals_per_attempt\teps_evals_measured\twall_ms_per_attempt\n");
    let mut walls = Vec::new();
    let mut counts = Vec::new();
    for variant in [Variant::MaskDime, Variant::DimeNested] {
        let sc = SamplerConfig { variant, lambda_schedule: cfg.lambda_c[..1].to_vec(), ..cfg.sampler(false) };
        let trajs: Vec<Trajectory> =
            run_samples(cfg, &sc, &models, nested, 1)?.into_iter().filter(|t| !t.skipped).collect();
        let n = trajs.len().max(1) as f64;
        let measured = trajs.iter().map(|t| t.eps_evals).sum::<usize>() as f64 / n;
        let wall = trajs.iter().map(|t| ms(t.wall)).sum::<f64>() / n;
        let _ = writeln!(eff, "{variant}\t{}\t{}\t{measured:.2}\t{wall:.3}", trajs.len(), variant.eps_evals(cfg.tau));
        walls.push(wall);
        counts.push(variant.eps_evals(cfg.tau) as f64);
    }
    let _ = writeln!(eff, "ratio\t\t{:.4}\t\t{:.3}", counts[1] / counts[0], walls[1] / walls[0].max(f64::MIN_POSITIVE));
    persist::write_atomic(&ctx.out("efficiency.tsv"), eff.as_bytes())?;
    Ok(format!("ablation over {} images written to {}", samples.len(), ctx.out("ablation.tsv").display()))
}

fn state_steps(dir: &Path) -> Result<Vec<usize>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ts: Vec<usize> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let n = e.file_name().to_string_lossy().into_owned();
            n.strip_suffix("_znext.mdtf")?.strip_prefix('t')?.parse().ok()
        })
        .collect();
    ts.sort_unstable_by(|a, b| b.cmp(a));
    Ok(ts)
}

/// Writes one heatmap frame and both masks per retained step. Returns the
/// number of frames.
pub fn heatmap(ctx: &Ctx) -> Result<usize> {
    let states = ctx.out("states");
    let mut dirs: Vec<(String, PathBuf)> = match fs::read_dir(&states) {
        Ok(entries) => entries
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
            .collect(),
        Err(_) => Vec::new(),
    };
    dirs.sort();
    let mut frames = 0;
    for (name, dir) in dirs {
        let out = ctx.out("heatmaps").join(&name);
        for t in state_steps(&dir)? {
            let base = format!("t{t:03}");
            let z = persist::load_tensor(&dir.join(format!("{base}_z.mdtf")))?;
            let z_next = persist::load_tensor(&dir.join(format!("{base}_znext.mdtf")))?;
            let heat = sampler::update_heatmap(&z, &z_next)?;
            persist::write_atomic(&out.join(format!("{base}.pgm")), &persist::encode_pgm(&heat, 0.0, 1.0)?)?;
            for m in ["mz", "mx"] {
                let mask = persist::load_tensor(&dir.join(format!("{base}_{m}.mdtf")))?;
                persist::save_mask_pbm(&out.join(format!("{base}_{m}.pbm")), &mask)?;
            }
            frames += 1;
        }
    }
    if frames == 0 {
        return Err(Error::StatesNotRetained);
    }
    Ok(frames)
}

/// Entry point used by the binary: one summary line on success, one
/// `error: <kind>: <message>` line and exit code 1 on failure.
pub fn main_with(cli: Cli) -> std::process::ExitCode {
    let result = cli.context().and_then(|ctx| execute(cli.command, &ctx));
    match result {
        Ok(msg) => {
            println!("{msg}");
            std::process::ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}: {e}", e.kind());
            std::process::ExitCode::FAILURE
        }
    }
}

//! Run configuration: UTF-8 text, one `key = value` per line, `#` starts a
//! comment. Every key is optional; unknown keys are rejected.
//!
//! ```text
//! seed = 7
//! tau = 60
//! lambda_c = 8, 10, 15
//! variant = maskdime
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::diffusion::Schedule;
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, LAMBDA_C_SCHEDULE};
use crate::models::TrainConfig;
use crate::rng::RngStream;
use crate::sampler::{SamplerConfig, Variant};
use crate::synthdata::DatasetSpec;

/// Environment variable that replaces the configured master seed.
pub const SEED_ENV: &str = "MASKDIFF_SEED";

// Tags mixing the master seed into per-purpose seeds.
const TAG_DATA: u64 = 1;
const TAG_DDPM: u64 = 2;
const TAG_CLF: u64 = 3;
const TAG_FEATNET: u64 = 4;
const TAG_SAMPLER: u64 = 5;
const TAG_DIVERSITY: u64 = 6;
const TAG_SFID: u64 = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub eps_checkpoint: PathBuf,
    pub classifier_checkpoint: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Number of diffusion steps `T`.
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub s: f32,
    pub k: f32,
    pub rho: f32,
    pub tau: usize,
    pub lambda_c: Vec<f32>,
    pub lambda_p: f32,
    pub lambda_l: f32,
    pub source: usize,
    pub target: usize,
    pub variant: Variant,
    pub n_train: usize,
    pub n_eval: usize,
    pub ddpm_epochs: usize,
    pub ddpm_batch: usize,
    pub ddpm_lr: f32,
    pub clf_epochs: usize,
    pub clf_batch: usize,
    pub clf_lr: f32,
    /// Upper bound on explained images; 0 means all eligible.
    pub limit: usize,
    pub sfid_repeats: usize,
    pub diversity_runs: usize,
    pub diversity_samples: usize,
    /// Images given to the nested baseline in `ablate`.
    pub nested_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GuidanceConfig::default();
        let ddpm = TrainConfig::epsilon_default();
        let clf = TrainConfig::classifier_default();
        let data = DatasetSpec::default();
        Self {
            data_dir: "data".into(),
            eps_checkpoint: "models/eps.mdck".into(),
            classifier_checkpoint: "models/classifier.mdck".into(),
            out_dir: "out".into(),
            seed: 7,
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.05,
            s: g.scale,
            k: g.k,
            rho: g.rho,
            tau: g.tau,
            lambda_c: LAMBDA_C_SCHEDULE.to_vec(),
            lambda_p: g.lambda_p,
            lambda_l: g.lambda_l,
            source: 0,
            target: g.target,
            variant: Variant::MaskDime,
            n_train: data.n_train,
            n_eval: data.n_eval,
            ddpm_epochs: ddpm.epochs,
            ddpm_batch: ddpm.batch_size,
            ddpm_lr: ddpm.learning_rate,
            clf_epochs: clf.epochs,
            clf_batch: clf.batch_size,
            clf_lr: clf.learning_rate,
            limit: 0,
            sfid_repeats: 10,
            diversity_runs: 5,
            diversity_samples: 4,
            nested_samples: 4,
        }
    }
}

fn num<T: FromStr>(v: &str, line: usize) -> Result<T> {
    v.parse().map_err(|_| Error::Config { line, reason: format!("cannot parse {v:?}") })
}

fn list(v: &str, line: usize) -> Result<Vec<f32>> {
    let out = v.split(',').map(|p| num::<f32>(p.trim(), line)).collect::<Result<Vec<_>>>()?;
    if out.is_empty() {
        return Err(Error::Config { line, reason: "empty list".into() });
    }
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| Error::Config { line, reason: format!("expected `key = value`, got {body:?}") })?;
            let (key, v) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config { line, reason: format!("duplicate key {key:?}") });
            }
            match key {
                "data_dir" => c.data_dir = v.into(),
                "eps_checkpoint" => c.eps_checkpoint = v.into(),
                "classifier_checkpoint" => c.classifier_checkpoint = v.into(),
                "out_dir" => c.out_dir = v.into(),
                "seed" => c.seed = num(v, line)?,
                "steps" => c.steps = num(v, line)?,
                "beta_start" => c.beta_start = num(v, line)?,
                "beta_end" => c.beta_end = num(v, line)?,
                "s" => c.s = num(v, line)?,
                "k" => c.k = num(v, line)?,
                "rho" => c.rho = num(v, line)?,
                "tau" => c.tau = num(v, line)?,
                "lambda_c" => c.lambda_c = list(v, line)?,
                "lambda_p" => c.lambda_p = num(v, line)?,
                "lambda_l" => c.lambda_l = num(v, line)?,
                "source" => c.source = num(v, line)?,
                "target" => c.target = num(v, line)?,
                "variant" => {
                    c.variant = v.parse().map_err(|_| Error::Config { line, reason: format!("unknown variant {v:?}") })?
                }
                "n_train" => c.n_train = num(v, line)?,
                "n_eval" => c.n_eval = num(v, line)?,
                "ddpm_epochs" => c.ddpm_epochs = num(v, line)?,
                "ddpm_batch" => c.ddpm_batch = num(v, line)?,
                "ddpm_lr" => c.ddpm_lr = num(v, line)?,
                "clf_epochs" => c.clf_epochs = num(v, line)?,
                "clf_batch" => c.clf_batch = num(v, line)?,
                "clf_lr" => c.clf_lr = num(v, line)?,
                "limit" => c.limit = num(v, line)?,
                "sfid_repeats" => c.sfid_repeats = num(v, line)?,
                "diversity_runs" => c.diversity_runs = num(v, line)?,
                "diversity_samples" => c.diversity_samples = num(v, line)?,
                "nested_samples" => c.nested_samples = num(v, line)?,
                _ => return Err(Error::Config { line, reason: format!("unknown key {key:?}") }),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies [`SEED_ENV`] if set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::Config { line: 0, reason });
        if self.source == self.target {
            return bad(format!("source and target are both {}", self.source));
        }
        if self.lambda_c.is_empty() {
            return bad("lambda_c is empty".into());
        }
        if self.n_eval == 0 || self.n_train == 0 {
            return bad("dataset sizes must be positive".into());
        }
        let schedule = self.schedule().map_err(|e| Error::Config { line: 0, reason: e.to_string() })?;
        for &lambda_c in &self.lambda_c {
            GuidanceConfig { lambda_c, ..self.guidance() }
                .validate(schedule.steps())
                .map_err(|e| Error::Config { line: 0, reason: e.to_string() })?;
        }
        Ok(())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let lambda_c: Vec<String> = self.lambda_c.iter().map(|v| v.to_string()).collect();
        let rows: [(&str, String); 31] = [
            ("data_dir", self.data_dir.display().to_string()),
            ("eps_checkpoint", self.eps_checkpoint.display().to_string()),
            ("classifier_checkpoint", self.classifier_checkpoint.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("seed", self.seed.to_string()),
            ("steps", self.steps.to_string()),
            ("beta_start", self.beta_start.to_string()),
            ("beta_end", self.beta_end.to_string()),
            ("s", self.s.to_string()),
            ("k", self.k.to_string()),
            ("rho", self.rho.to_string()),
            ("tau", self.tau.to_string()),
            ("lambda_c", lambda_c.join(", ")),
            ("lambda_p", self.lambda_p.to_string()),
            ("lambda_l", self.lambda_l.to_string()),
            ("source", self.source.to_string()),
            ("target", self.target.to_string()),
            ("variant", self.variant.to_string()),
            ("n_train", self.n_train.to_string()),
            ("n_eval", self.n_eval.to_string()),
            ("ddpm_epochs", self.ddpm_epochs.to_string()),
            ("ddpm_batch", self.ddpm_batch.to_string()),
            ("ddpm_lr", self.ddpm_lr.to_string()),
            ("clf_epochs", self.clf_epochs.to_string()),
            ("clf_batch", self.clf_batch.to_string()),
            ("clf_lr", self.clf_lr.to_string()),
            ("limit", self.limit.to_string()),
            ("sfid_repeats", self.sfid_repeats.to_string()),
            ("diversity_runs", self.diversity_runs.to_string()),
            ("diversity_samples", self.diversity_samples.to_string()),
            ("nested_samples", self.nested_samples.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::linear(self.steps, self.beta_start, self.beta_end)
    }

    /// Guidance settings with the first classification weight.
    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            lambda_c: self.lambda_c.first().copied().unwrap_or(LAMBDA_C_SCHEDULE[0]),
            lambda_p: self.lambda_p,
            lambda_l: self.lambda_l,
            scale: self.s,
            target: self.target,
            tau: self.tau,
            k: self.k,
            rho: self.rho,
        }
    }

    pub fn sampler(&self, retain_states: bool) -> SamplerConfig {
        SamplerConfig {
            guidance: self.guidance(),
            variant: self.variant,
            lambda_schedule: self.lambda_c.clone(),
            retain_states,
        }
    }

    fn master(&self) -> RngStream {
        RngStream::new(self.seed)
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_train: self.n_train,
            n_eval: self.n_eval,
            seed: self.master().substream(TAG_DATA).key(),
            ..DatasetSpec::default()
        }
    }

    pub fn ddpm_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.ddpm_epochs,
            batch_size: self.ddpm_batch,
            learning_rate: self.ddpm_lr,
            seed: self.master().substream(TAG_DDPM).key(),
        }
    }

    pub fn clf_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.clf_epochs,
            batch_size: self.clf_batch,
            learning_rate: self.clf_lr,
            seed: self.master().substream(TAG_CLF).key(),
        }
    }

    pub fn featnet_seed(&self) -> u64 {
        self.master().substream(TAG_FEATNET).key()
    }

    /// Stream for one eval image; shared by every variant.
    pub fn sample_stream(&self, id: u64) -> RngStream {
        self.master().derive(&[TAG_SAMPLER, id])
    }

    pub fn diversity_stream(&self, id: u64, run: usize) -> RngStream {
        self.master().derive(&[TAG_DIVERSITY, id, run as u64])
    }

    pub fn sfid_seed(&self) -> u64 {
        self.master().substream(TAG_SFID).key()
    }
}

//! Evaluation of original/counterfactual pairs.
//!
//! Distribution-level scores (Fréchet distance, representation similarity,
//! diversity) use the frozen [`FeatureNet`], not the classifier being
//! explained.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::masks::{channel_mean_abs_diff, rank_desc};
use crate::models::{cosine, Classifier, FeatureNet};
use crate::ndgrad::Tensor;
use crate::rng::RngStream;

/// Stages of the insertion curve in [`cout`].
pub const COUT_STAGES: usize = 32;
/// Diagonal loading added to covariances estimated from too few samples.
pub const SHRINKAGE: f64 = 1e-6;
/// Minimum dataset size for [`sfid_protocol`].
pub const SFID_MIN_SAMPLES: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub id: u64,
    pub original: Tensor,
    pub counterfactual: Tensor,
    pub source: usize,
    pub target: usize,
    pub causal_mask: Option<Tensor>,
}

impl EvalPair {
    fn check(&self) -> Result<()> {
        if self.original.shape() != self.counterfactual.shape() {
            return Err(Error::InvalidArgument(format!(
                "pair {}: {:?} vs {:?}",
                self.id,
                self.original.shape(),
                self.counterfactual.shape()
            )));
        }
        Ok(())
    }
}

/// Fraction of pairs whose counterfactual is classified as the target.
pub fn flip_rate(pairs: &[EvalPair], classifier: &Classifier) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::NoSamples);
    }
    let mut hits = 0usize;
    for p in pairs {
        p.check()?;
        hits += (classifier.predict(&p.counterfactual)?[0] == p.target) as usize;
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Insertion-curve score in `[−1, 1]`.
///
/// Pixels are ranked by channel-averaged `|x_cf − x|` (largest first, ties
/// by raster order) and copied from the counterfactual into the original in
/// `stages` equal groups. At each of the `stages + 1` points the curve
/// records `p(target) − p(source)`; the score is its trapezoid area over
/// the stage index normalized to `[0, 1]`.
pub fn cout(pair: &EvalPair, classifier: &Classifier, stages: usize) -> Result<f64> {
    pair.check()?;
    if stages == 0 {
        return Err(Error::InvalidArgument("cout needs at least one stage".into()));
    }
    let curve = cout_curve(pair, classifier, stages)?;
    let area: f64 = curve.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum::<f64>() / stages as f64;
    Ok(area.clamp(-1.0, 1.0))
}

/// The `stages + 1` values `p(target) − p(source)` along the insertion path.
pub fn cout_curve(pair: &EvalPair, classifier: &Classifier, stages: usize) -> Result<Vec<f64>> {
    let diff = channel_mean_abs_diff(&pair.counterfactual, &pair.original)?;
    insertion_curve(pair, classifier, stages, &diff)
}

/// Insertion curve with pixels ordered by an arbitrary `[1, H, W]` score,
/// largest first. Only the ordering of `score` matters.
pub fn insertion_curve(pair: &EvalPair, classifier: &Classifier, stages: usize, score: &Tensor) -> Result<Vec<f64>> {
    pair.check()?;
    let (x, cf) = (&pair.original, &pair.counterfactual);
    let order = rank_desc(score.data());
    let n = order.len();
    let c = x.shape()[1];
    if c * n != x.len() {
        return Err(Error::InvalidArgument(format!("score {:?} vs image {:?}", score.shape(), x.shape())));
    }
    let mut images = Vec::with_capacity(stages + 1);
    let mut cur = x.clone().into_data();
    let mut done = 0usize;
    images.push(Tensor::new(x.shape().to_vec(), cur.clone())?);
    for k in 1..=stages {
        let upto = k * n / stages;
        for &pix in &order[done..upto] {
            for ch in 0..c {
                cur[ch * n + pix] = cf.data()[ch * n + pix];
            }
        }
        done = upto;
        images.push(Tensor::new(x.shape().to_vec(), cur.clone())?);
    }
    let probs = classifier.probs(&Tensor::stack_first(&images)?)?;
    let k = probs.shape()[1];
    Ok(probs
        .data()
        .chunks(k)
        .map(|r| r[pair.target] as f64 - r[pair.source] as f64)
        .collect())
}

fn mean_cov(rows: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len();
    let d = rows[0].len();
    let mut mu = DVector::zeros(d);
    for r in rows {
        mu += DVector::from_column_slice(r);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        let c = DVector::from_column_slice(r) - &mu;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    if n < d + 1 {
        for i in 0..d {
            cov[(i, i)] += SHRINKAGE;
        }
    }
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let vals = e.eigenvalues.map(|v| if v < 1e-10 { 0.0 } else { v.sqrt() });
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2 (Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2})`.
pub fn frechet(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::NotEnoughSamples(format!("frechet needs ≥ 2 per side, got {} and {}", a.len(), b.len())));
    }
    let d = a[0].len();
    if d == 0 || a.iter().chain(b).any(|r| r.len() != d) {
        return Err(Error::InvalidArgument("feature rows differ in length".into()));
    }
    let (mu_a, cov_a) = mean_cov(a);
    let (mu_b, cov_b) = mean_cov(b);
    let diff = (&mu_a - &mu_b).norm_squared();
    let s = sym_sqrt(&cov_a);
    let mut inner = &s * &cov_b * &s;
    inner = (&inner + inner.transpose()) * 0.5;
    let e = SymmetricEigen::new(inner);
    let cross: f64 = e.eigenvalues.iter().map(|&v| if v < 1e-10 { 0.0 } else { v.sqrt() }).sum();
    Ok((diff + cov_a.trace() + cov_b.trace() - 2.0 * cross).max(0.0))
}

pub fn feature_rows(images: &[Tensor], featnet: &FeatureNet) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let f = featnet.features(&Tensor::stack_first(chunk)?)?;
        let d = f.shape()[1];
        out.extend(f.data().chunks(d).map(|r| r.iter().map(|v| *v as f64).collect::<Vec<_>>()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SfidResult {
    pub mean: f64,
    pub sd: f64,
    pub repeats: usize,
    /// Only one repeat was run; `sd` is reported as 0.
    pub single_repeat: bool,
}

/// Split-half Fréchet protocol. Each repeat draws a random disjoint split;
/// counterfactuals of the first half are compared against the untouched
/// originals of the second half. `counterfactuals[i]` must belong to
/// `originals[i]`.
pub fn sfid_protocol(
    originals: &[Tensor],
    counterfactuals: &[Tensor],
    featnet: &FeatureNet,
    repeats: usize,
    seed: u64,
) -> Result<SfidResult> {
    let n = originals.len();
    if counterfactuals.len() != n {
        return Err(Error::InvalidArgument(format!("{n} originals, {} counterfactuals", counterfactuals.len())));
    }
    if n < SFID_MIN_SAMPLES {
        return Err(Error::NotEnoughSamples(format!("split protocol needs ≥ {SFID_MIN_SAMPLES} samples, got {n}")));
    }
    if repeats == 0 {
        return Err(Error::InvalidArgument("zero repeats".into()));
    }
    let fo = feature_rows(originals, featnet)?;
    let fc = feature_rows(counterfactuals, featnet)?;
    let stream = RngStream::new(seed);
    let mut vals = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut stream.substream(r as u64).rng());
        let (a, b) = idx.split_at(n / 2);
        let cf_a: Vec<Vec<f64>> = a.iter().map(|&i| fc[i].clone()).collect();
        let orig_b: Vec<Vec<f64>> = b.iter().map(|&i| fo[i].clone()).collect();
        vals.push(frechet(&cf_a, &orig_b)?);
    }
    let mean = vals.iter().sum::<f64>() / repeats as f64;
    let sd = if repeats > 1 {
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(SfidResult { mean, sd, repeats, single_repeat: repeats == 1 })
}

/// Share of the total edit `Σ|x_cf − x|` that falls inside the causal mask.
/// An unedited pair scores 1 (see [`has_edit`]).
pub fn locality(pair: &EvalPair) -> Result<f64> {
    pair.check()?;
    let mask = pair.causal_mask.as_ref().ok_or(Error::MissingCausalMask)?;
    let (inside, total) = edit_split(pair, mask)?;
    Ok(if total == 0.0 { 1.0 } else { inside / total })
}

/// Same ratio over the complement of the causal mask.
pub fn anti_locality(pair: &EvalPair) -> Result<f64> {
    pair.check()?;
    let mask = pair.causal_mask.as_ref().ok_or(Error::MissingCausalMask)?;
    let (inside, total) = edit_split(pair, mask)?;
    Ok(if total == 0.0 { 0.0 } else { (total - inside) / total })
}

pub fn has_edit(pair: &EvalPair) -> bool {
    pair.original.data() != pair.counterfactual.data()
}

fn edit_split(pair: &EvalPair, mask: &Tensor) -> Result<(f64, f64)> {
    let m = mask.data();
    let plane = m.len();
    if plane == 0 || pair.original.len() % plane != 0 {
        return Err(Error::InvalidArgument(format!("mask {:?} vs image {:?}", mask.shape(), pair.original.shape())));
    }
    let (mut inside, mut total) = (0.0f64, 0.0f64);
    for (i, (a, b)) in pair.original.data().iter().zip(pair.counterfactual.data()).enumerate() {
        let d = (b - a).abs() as f64;
        total += d;
        if m[i % plane] > 0.5 {
            inside += d;
        }
    }
    Ok((inside, total))
}

/// Mean absolute pixel change.
pub fn l1_distance(pair: &EvalPair) -> Result<f64> {
    pair.check()?;
    let n = pair.original.len() as f64;
    Ok(pair.original.data().iter().zip(pair.counterfactual.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / n)
}

/// Mean pairwise feature-space L2 distance between counterfactuals of the
/// same input from independent runs.
pub fn diversity_sigma(runs: &[Tensor], featnet: &FeatureNet) -> Result<f64> {
    if runs.is_empty() {
        return Err(Error::NoSamples);
    }
    if runs.len() < 2 {
        return Err(Error::NotEnoughSamples("diversity needs ≥ 2 runs".into()));
    }
    let f = feature_rows(runs, featnet)?;
    let (mut sum, mut pairs) = (0.0f64, 0usize);
    for i in 0..f.len() {
        for j in i + 1..f.len() {
            sum += f[i].iter().zip(&f[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// Cosine similarity of frozen features of original and counterfactual.
pub fn s3_proxy(pair: &EvalPair, featnet: &FeatureNet) -> Result<f64> {
    pair.check()?;
    let f = featnet.features(&Tensor::stack_first(&[pair.original.clone(), pair.counterfactual.clone()])?)?;
    let d = f.shape()[1];
    cosine(&f.data()[..d], &f.data()[d..])
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairScores {
    pub id: u64,
    pub flipped: bool,
    pub cout: f64,
    pub l1: f64,
    pub locality: Option<f64>,
    pub s3: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub samples: usize,
    pub flip_rate: f64,
    pub cout: f64,
    /// Absent with fewer than two pairs.
    pub proxy_fid: Option<f64>,
    pub proxy_sfid: Option<SfidResult>,
    pub l1: f64,
    pub locality_mean: Option<f64>,
    pub locality_median: Option<f64>,
    /// Pairs without any edit, scored 1 by the locality convention.
    pub unedited: usize,
    pub s3_proxy: f64,
    pub sigma_l: Option<f64>,
    pub per_pair: Vec<PairScores>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Scores every pair and the set as a whole. The split protocol is skipped
/// (reported as n/a) when there are fewer than [`SFID_MIN_SAMPLES`] pairs.
pub fn evaluate(
    pairs: &[EvalPair],
    classifier: &Classifier,
    featnet: &FeatureNet,
    sfid_repeats: usize,
    seed: u64,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::NoSamples);
    }
    let mut per_pair = Vec::with_capacity(pairs.len());
    for p in pairs {
        per_pair.push(PairScores {
            id: p.id,
            flipped: classifier.predict(&p.counterfactual)?[0] == p.target,
            cout: cout(p, classifier, COUT_STAGES)?,
            l1: l1_distance(p)?,
            locality: if p.causal_mask.is_some() { Some(locality(p)?) } else { None },
            s3: s3_proxy(p, featnet)?,
        });
    }
    let n = pairs.len() as f64;
    let originals: Vec<Tensor> = pairs.iter().map(|p| p.original.clone()).collect();
    let cfs: Vec<Tensor> = pairs.iter().map(|p| p.counterfactual.clone()).collect();
    let proxy_fid = if pairs.len() >= 2 {
        Some(frechet(&feature_rows(&cfs, featnet)?, &feature_rows(&originals, featnet)?)?)
    } else {
        None
    };
    let proxy_sfid = if pairs.len() >= SFID_MIN_SAMPLES {
        Some(sfid_protocol(&originals, &cfs, featnet, sfid_repeats, seed)?)
    } else {
        None
    };
    let mut locs: Vec<f64> = per_pair.iter().filter_map(|s| s.locality).collect();
    let (locality_mean, locality_median) = if locs.is_empty() {
        (None, None)
    } else {
        (Some(locs.iter().sum::<f64>() / locs.len() as f64), Some(median(&mut locs)))
    };
    Ok(MetricReport {
        samples: pairs.len(),
        flip_rate: per_pair.iter().filter(|s| s.flipped).count() as f64 / n,
        cout: per_pair.iter().map(|s| s.cout).sum::<f64>() / n,
        proxy_fid,
        proxy_sfid,
        l1: per_pair.iter().map(|s| s.l1).sum::<f64>() / n,
        locality_mean,
        locality_median,
        unedited: pairs.iter().filter(|p| !has_edit(p)).count(),
        s3_proxy: per_pair.iter().map(|s| s.s3).sum::<f64>() / n,
        sigma_l: None,
        per_pair,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"))
}

impl MetricReport {
    /// `key = value` lines, a blank line, then a tab-separated table with one
    /// row per pair.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples = {}", self.samples);
        let _ = writeln!(s, "flip_rate = {:.6}", self.flip_rate);
        let _ = writeln!(s, "cout = {:.6}", self.cout);
        let _ = writeln!(s, "proxy_fid = {}", opt(self.proxy_fid));
        let _ = writeln!(s, "proxy_sfid_mean = {}", opt(self.proxy_sfid.as_ref().map(|r| r.mean)));
        let _ = writeln!(s, "proxy_sfid_sd = {}", opt(self.proxy_sfid.as_ref().map(|r| r.sd)));
        let _ = writeln!(s, "proxy_sfid_repeats = {}", self.proxy_sfid.as_ref().map_or(0, |r| r.repeats));
        let _ = writeln!(s, "l1 = {:.6}", self.l1);
        let _ = writeln!(s, "locality_mean = {}", opt(self.locality_mean));
        let _ = writeln!(s, "locality_median = {}", opt(self.locality_median));
        let _ = writeln!(s, "unedited = {}", self.unedited);
        let _ = writeln!(s, "s3_proxy = {:.6}", self.s3_proxy);
        let _ = writeln!(s, "sigma_l = {}", opt(self.sigma_l));
        let _ = writeln!(s, "mnac = n/a");
        let _ = writeln!(s, "cd = n/a");
        let _ = writeln!(s);
        let _ = writeln!(s, "id\tflip\tcout\tl1\tlocality\ts3");
        for p in &self.per_pair {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.6}\t{:.6}\t{}\t{:.6}",
                p.id,
                p.flipped as u8,
                p.cout,
                p.l1,
                opt(p.locality),
                p.s3
            );
        }
        s
    }
}

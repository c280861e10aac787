//! Synthetic "toy-face" images with a binary attribute whose causal pixels
//! are known.
//!
//! Every image is a dark background with a few soft blobs and pixel noise.
//! Class 1 additionally carries a bright horizontal bar in the lower third
//! (the "smile"). The causal mask of a class-1 image is the bar it carries;
//! for a class-0 image it is the full region the bar generator can reach.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::persist;
use crate::rng::RngStream;

pub const IMAGE_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Eval => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "eval" => Some(Split::Eval),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub split: Split,
    /// `[1, 1, 32, 32]`, values in `[-1, 1]`.
    pub image: Tensor,
    pub label: usize,
    /// Binary, same shape as `image`.
    pub causal_mask: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
    pub background_level: f32,
    pub noise_sigma: f32,
    pub blob_count: (usize, usize),
    pub blob_sigma: (f32, f32),
    pub blob_amplitude: (f32, f32),
    pub bar_length: usize,
    pub bar_row: usize,
    pub bar_col: usize,
    pub jitter: usize,
    pub thickness: (usize, usize),
    pub intensity: (f32, f32),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_eval: 512,
            seed: 7,
            background_level: -0.5,
            noise_sigma: 0.05,
            blob_count: (2, 4),
            blob_sigma: (3.0, 6.0),
            blob_amplitude: (0.15, 0.35),
            bar_length: 16,
            bar_row: 23,
            bar_col: 8,
            jitter: 2,
            thickness: (2, 3),
            intensity: (0.6, 0.9),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Bar {
    row: usize,
    col: usize,
    thickness: usize,
    intensity: f32,
}

impl DatasetSpec {
    /// Rows and columns (inclusive) that any bar can touch.
    pub fn bar_envelope(&self) -> ((usize, usize), (usize, usize)) {
        let rows = (self.bar_row - self.jitter, self.bar_row + self.jitter + self.thickness.1 - 1);
        let cols = (self.bar_col - self.jitter, self.bar_col + self.jitter + self.bar_length - 1);
        (rows, cols)
    }

    fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(Error::InvalidArgument("dataset counts must be positive".into()));
        }
        let ((_, r1), (_, c1)) = self.bar_envelope();
        if self.bar_row < self.jitter || self.bar_col < self.jitter || r1 >= IMAGE_SIZE || c1 >= IMAGE_SIZE {
            return Err(Error::InvalidArgument("bar geometry leaves the image".into()));
        }
        Ok(())
    }

    fn sample_bar(&self, rng: &mut impl Rng) -> Bar {
        let j = self.jitter as i64;
        let dr = rng.gen_range(-j..=j);
        let dc = rng.gen_range(-j..=j);
        Bar {
            row: (self.bar_row as i64 + dr) as usize,
            col: (self.bar_col as i64 + dc) as usize,
            thickness: rng.gen_range(self.thickness.0..=self.thickness.1),
            intensity: rng.gen_range(self.intensity.0..=self.intensity.1),
        }
    }

    /// Generates one sample. Depends only on `(seed, split, id)`.
    pub fn sample(&self, split: Split, id: usize) -> Sample {
        let n = IMAGE_SIZE;
        let stream = RngStream::new(self.seed).derive(&[split.tag(), id as u64]);
        let mut rng = stream.rng();
        let label = id % 2;

        let mut img = vec![self.background_level; n * n];
        let blobs = rng.gen_range(self.blob_count.0..=self.blob_count.1);
        for _ in 0..blobs {
            let cy: f32 = rng.gen_range(0.0..n as f32);
            let cx: f32 = rng.gen_range(0.0..n as f32);
            let sigma: f32 = rng.gen_range(self.blob_sigma.0..=self.blob_sigma.1);
            let mag: f32 = rng.gen_range(self.blob_amplitude.0..=self.blob_amplitude.1);
            let amp = if rng.gen_bool(0.5) { mag } else { -mag };
            for i in 0..n {
                for j in 0..n {
                    let d2 = (i as f32 + 0.5 - cy).powi(2) + (j as f32 + 0.5 - cx).powi(2);
                    img[i * n + j] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }

        let bar = self.sample_bar(&mut rng);
        let mut mask = vec![0.0f32; n * n];
        if label == 1 {
            for i in bar.row..bar.row + bar.thickness {
                for j in bar.col..bar.col + self.bar_length {
                    img[i * n + j] = bar.intensity;
                    mask[i * n + j] = 1.0;
                }
            }
        } else {
            let ((r0, r1), (c0, c1)) = self.bar_envelope();
            for i in r0..=r1 {
                for j in c0..=c1 {
                    mask[i * n + j] = 1.0;
                }
            }
        }

        let noise = stream.substream(1).normal(vec![n * n]);
        for (v, e) in img.iter_mut().zip(noise.data()) {
            *v = (*v + self.noise_sigma * e).clamp(-1.0, 1.0);
        }
        Sample {
            id,
            split,
            image: Tensor::from_parts(vec![1, 1, n, n], img),
            label,
            causal_mask: Tensor::from_parts(vec![1, 1, n, n], mask),
        }
    }

    pub fn generate_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.validate()?;
        let count = match split {
            Split::Train => self.n_train,
            Split::Eval => self.n_eval,
        };
        Ok((0..count).map(|id| self.sample(split, id)).collect())
    }
}

/// Training and evaluation samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    Ok(Dataset {
        train: spec.generate_split(Split::Train)?,
        eval: spec.generate_split(Split::Eval)?,
    })
}

const MANIFEST: &str = "manifest.tsv";

fn file_stem(s: &Sample) -> String {
    format!("{}_{:05}", s.split.name(), s.id)
}

/// Writes `manifest.tsv` plus one image and one mask tensor file per sample.
pub fn write_dir(dataset: &Dataset, dir: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut manifest = String::from("id\tsplit\tlabel\timage\tmask\n");
    for s in dataset.train.iter().chain(&dataset.eval) {
        let stem = file_stem(s);
        let img = format!("images/{stem}.mdtf");
        let mask = format!("masks/{stem}.mdtf");
        persist::save_tensor(&dir.join(&img), &s.image)?;
        persist::save_tensor(&dir.join(&mask), &s.causal_mask)?;
        manifest.push_str(&format!("{}\t{}\t{}\t{img}\t{mask}\n", s.id, s.split.name(), s.label));
    }
    persist::write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
}

pub fn read_dir(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |reason: String| Error::Malformed { path: path.clone(), reason };
    let mut out = Dataset { train: Vec::new(), eval: Vec::new() };
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad(format!("line {}: expected 5 fields", ln + 1)));
        }
        let id = f[0].parse().map_err(|_| bad(format!("line {}: bad id", ln + 1)))?;
        let split = Split::parse(f[1]).ok_or_else(|| bad(format!("line {}: bad split", ln + 1)))?;
        let label = f[2].parse().map_err(|_| bad(format!("line {}: bad label", ln + 1)))?;
        let sample = Sample {
            id,
            split,
            label,
            image: persist::load_tensor(&dir.join(f[3]))?,
            causal_mask: persist::load_tensor(&dir.join(f[4]))?,
        };
        match split {
            Split::Train => out.train.push(sample),
            Split::Eval => out.eval.push(sample),
        }
    }
    Ok(out)
}

/// Writes the whole dataset through a temporary directory; no partial dataset
/// is left behind on failure.
pub fn write_dir_atomic(dataset: &Dataset, dir: &Path) -> Result<()> {
    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    write_dir(dataset, &tmp)?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec { n_train: 100, n_eval: 20, ..Default::default() }
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = DatasetSpec { seed: 8, ..small() };
        assert_ne!(generate(&small()).unwrap().train[0], generate(&other).unwrap().train[0]);
    }

    #[test]
    fn balanced_and_in_range() {
        let d = generate(&small()).unwrap();
        let ones = d.train.iter().filter(|s| s.label == 1).count() as f64;
        let frac = ones / d.train.len() as f64;
        assert!((0.45..=0.55).contains(&frac));
        for s in d.train.iter().chain(&d.eval) {
            assert!(s.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            assert_eq!(s.image.shape(), &[1, 1, 32, 32]);
        }
    }

    #[test]
    fn mask_coverage_between_3_and_15_percent() {
        let d = generate(&small()).unwrap();
        for s in &d.train {
            let cover = s.causal_mask.sum() / s.causal_mask.len() as f32;
            assert!((0.03..=0.15).contains(&cover), "{cover}");
            assert!(s.causal_mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn bar_pixels_lie_in_mask() {
        let spec = small();
        for id in 0..40 {
            let s = spec.sample(Split::Train, id);
            let ((r0, r1), (c0, c1)) = spec.bar_envelope();
            for (i, &m) in s.causal_mask.data().iter().enumerate() {
                if m > 0.0 {
                    let (r, c) = (i / IMAGE_SIZE, i % IMAGE_SIZE);
                    assert!(r >= r0 && r <= r1 && c >= c0 && c <= c1);
                    assert!(r >= IMAGE_SIZE * 2 / 3 - 1, "bar must sit in the lower third");
                }
            }
        }
    }

    #[test]
    fn empty_counts_rejected() {
        let spec = DatasetSpec { n_train: 0, ..small() };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn directory_roundtrip() {
        let d = generate(&DatasetSpec { n_train: 6, n_eval: 4, ..Default::default() }).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("data");
        write_dir_atomic(&d, &dir).unwrap();
        assert_eq!(read_dir(&dir).unwrap(), d);
    }
}

//! Top-k selection masks and binary dilation.
//!
//! Selection sorts pixels by value, largest first, with ties going to the
//! earlier raster index. The number of selected pixels is `k·H·W` rounded
//! half up and never less than one. Dilation uses a square window with zero
//! padding at the borders.

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

pub const DILATION_KERNEL: usize = 5;

/// Noisy-state mask `mz` and clean-estimate mask `mx ⊆ mz`, after dilation,
/// together with the selections they were dilated from.
#[derive(Debug, Clone, PartialEq)]
pub struct DualMask {
    pub mz: Tensor,
    pub mx: Tensor,
    pub mz_core: Tensor,
    pub mx_core: Tensor,
    pub k: f32,
    pub rho: f32,
}

impl DualMask {
    /// Both levels set everywhere.
    pub fn full(h: usize, w: usize) -> Self {
        let ones = Tensor::ones(vec![1, h, w]);
        Self { mz: ones.clone(), mx: ones.clone(), mz_core: ones.clone(), mx_core: ones, k: 1.0, rho: 1.0 }
    }

    /// Both levels equal to `mask` (already dilated).
    pub fn single(core: Tensor, mask: Tensor, k: f32) -> Self {
        Self { mz: mask.clone(), mx: mask, mz_core: core.clone(), mx_core: core, k, rho: 1.0 }
    }
}

fn plane(t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().product::<usize>() != 1 {
        return Err(Error::InvalidArgument(format!("expected a single plane, got {s:?}")));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

/// `round(frac·n)` with halves rounded up, clamped to `[1, n]`.
pub fn selection_count(frac: f64, n: usize) -> usize {
    ((frac * n as f64 + 0.5).floor() as usize).clamp(1, n.max(1))
}

/// Pixel indices ordered by descending value, ties by ascending index.
pub fn rank_desc(values: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

fn select(values: &[f32], order: &[usize], count: usize, h: usize, w: usize) -> Tensor {
    let mut out = vec![0.0; values.len()];
    for &i in &order[..count] {
        out[i] = 1.0;
    }
    Tensor::new(vec![1, h, w], out).expect("plane shape")
}

/// The `count` largest values of a single-plane map as a `[1, H, W]` mask.
pub fn top_count(map: &Tensor, count: usize) -> Result<Tensor> {
    let (h, w) = plane(map)?;
    let count = count.min(h * w);
    Ok(select(map.data(), &rank_desc(map.data()), count, h, w))
}

fn check_fraction(name: &str, v: f32) -> Result<()> {
    if !(v > 0.0 && v <= 1.0) {
        return Err(Error::InvalidArgument(format!("{name} must lie in (0, 1], got {v}")));
    }
    Ok(())
}

/// Selects the top `k` fraction of `saliency` for `mz` and the top `ρ·k`
/// fraction for `mx`, then dilates both.
pub fn build_dual_mask(saliency: &Tensor, k: f32, rho: f32) -> Result<DualMask> {
    check_fraction("k", k)?;
    check_fraction("rho", rho)?;
    let (h, w) = plane(saliency)?;
    let n = h * w;
    let order = rank_desc(saliency.data());
    let nz = selection_count(k as f64, n);
    let nx = selection_count(rho as f64 * k as f64, n);
    let mz_core = select(saliency.data(), &order, nz, h, w);
    let mx_core = select(saliency.data(), &order, nx, h, w);
    Ok(DualMask {
        mz: dilate(&mz_core, DILATION_KERNEL)?,
        mx: dilate(&mx_core, DILATION_KERNEL)?,
        mz_core,
        mx_core,
        k,
        rho,
    })
}

/// Binary dilation with an odd square window, zero-padded.
pub fn dilate(mask: &Tensor, kernel: usize) -> Result<Tensor> {
    if kernel % 2 == 0 {
        return Err(Error::InvalidArgument(format!("dilation kernel must be odd, got {kernel}")));
    }
    let (h, w) = plane(mask)?;
    let r = kernel / 2;
    let m = mask.data();
    let mut rows = vec![0.0f32; h * w];
    for i in 0..h {
        for j in 0..w {
            let lo = j.saturating_sub(r);
            let hi = (j + r).min(w - 1);
            if (lo..=hi).any(|c| m[i * w + c] > 0.5) {
                rows[i * w + j] = 1.0;
            }
        }
    }
    let mut out = vec![0.0f32; h * w];
    for i in 0..h {
        let lo = i.saturating_sub(r);
        let hi = (i + r).min(h - 1);
        for j in 0..w {
            if (lo..=hi).any(|rr| rows[rr * w + j] > 0.5) {
                out[i * w + j] = 1.0;
            }
        }
    }
    Ok(Tensor::new(mask.shape().to_vec(), out)?)
}

/// Channel-averaged `|a − b|` of `[1, C, H, W]` images as `[1, H, W]`.
pub fn channel_mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() || a.shape().len() != 4 || a.shape()[0] != 1 {
        return Err(Error::InvalidArgument(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (c, h, w) = (a.shape()[1], a.shape()[2], a.shape()[3]);
    let p = h * w;
    Ok(Tensor::from_fn(vec![1, h, w], |i| {
        (0..c).map(|ch| (a.data()[ch * p + i] - b.data()[ch * p + i]).abs()).sum::<f32>() / c as f32
    }))
}

/// Top-k of the channel-averaged pixel difference, dilated. Returns the
/// selection and its dilation.
pub fn pixel_diff_mask(x0_hat: &Tensor, x: &Tensor, k: f32) -> Result<(Tensor, Tensor)> {
    check_fraction("k", k)?;
    let d = channel_mean_abs_diff(x0_hat, x)?;
    let (h, w) = plane(&d)?;
    let core = top_count(&d, selection_count(k as f64, h * w))?;
    let dil = dilate(&core, DILATION_KERNEL)?;
    Ok((core, dil))
}

/// The noisy-state mask at `τ` with no shrinkage; the sampler keeps it for
/// every later step.
pub fn fixed_mask(saliency_tau: &Tensor, k: f32) -> Result<DualMask> {
    let m = build_dual_mask(saliency_tau, k, 1.0)?;
    Ok(DualMask::single(m.mz_core, m.mz, k))
}

pub fn count_ones(mask: &Tensor) -> usize {
    mask.data().iter().filter(|v| **v > 0.5).count()
}

/// `|a ∩ b| / |a ∪ b|`, 1 for two empty masks.
pub fn iou(a: &Tensor, b: &Tensor) -> f64 {
    let (mut inter, mut uni) = (0usize, 0usize);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (x, y) = (*x > 0.5, *y > 0.5);
        inter += (x && y) as usize;
        uni += (x || y) as usize;
    }
    if uni == 0 {
        1.0
    } else {
        inter as f64 / uni as f64
    }
}

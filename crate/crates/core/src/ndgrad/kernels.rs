//! Raw loops behind the graph ops. Everything here works on plain slices in
//! NCHW layout and has a fixed accumulation order.

/// `c = a · b + beta · c` for row-major-addressed operands with explicit
/// strides (`rs*`, `cs*`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
) {
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(m == 0 || n == 0 || c.len() > (m - 1) * rsc + (n - 1));
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Some(Self { cin, h, w, kh, kw, stride, pad, ho, wo })
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfold one sample `[cin, h, w]` into `[cin·kh·kw, ho·wo]`.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let np = g.out_pixels();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * np..(row + 1) * np];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, d) in out_row.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *d = if jj < 0 || jj >= g.w as isize { 0.0 } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[cin, h, w]`.
pub(crate) fn col2im(col: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let np = g.out_pixels();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * np..(row + 1) * np];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            dst[jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution over a batch. `w` is `[cout, cin, kh, kw]`.
pub(crate) fn conv2d_forward(x: &[f32], n: usize, g: &ConvGeom, w: &[f32], cout: usize, bias: Option<&[f32]>) -> Vec<f32> {
    let kdim = g.col_rows();
    let np = g.out_pixels();
    let in_per = g.cin * g.h * g.w;
    let out_per = cout * np;
    let mut out = vec![0.0f32; n * out_per];
    let mut col = vec![0.0f32; kdim * np];
    for s in 0..n {
        im2col(&x[s * in_per..(s + 1) * in_per], g, &mut col);
        let o = &mut out[s * out_per..(s + 1) * out_per];
        if let Some(b) = bias {
            for (c, chunk) in o.chunks_mut(np).enumerate() {
                chunk.fill(b[c]);
            }
        }
        gemm(cout, kdim, np, w, kdim, 1, &col, np, 1, if bias.is_some() { 1.0 } else { 0.0 }, o, np);
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Option<Vec<f32>>,
    pub db: Option<Vec<f32>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f32],
    n: usize,
    g: &ConvGeom,
    w: &[f32],
    cout: usize,
    dy: &[f32],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads {
    let kdim = g.col_rows();
    let np = g.out_pixels();
    let in_per = g.cin * g.h * g.w;
    let out_per = cout * np;
    let mut dx = need_dx.then(|| vec![0.0f32; n * in_per]);
    let mut dw = need_dw.then(|| vec![0.0f32; cout * kdim]);
    let db = need_db.then(|| {
        let mut db = vec![0.0f32; cout];
        for s in 0..n {
            for (c, chunk) in dy[s * out_per..(s + 1) * out_per].chunks(np).enumerate() {
                db[c] += chunk.iter().sum::<f32>();
            }
        }
        db
    });
    let mut col = vec![0.0f32; kdim * np];
    for s in 0..n {
        let dys = &dy[s * out_per..(s + 1) * out_per];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[s * in_per..(s + 1) * in_per], g, &mut col);
            // dw[cout, kdim] += dy[cout, np] · colᵀ[np, kdim]
            gemm(cout, np, kdim, dys, np, 1, &col, 1, np, 1.0, dw, kdim);
        }
        if let Some(dx) = dx.as_mut() {
            // dcol[kdim, np] = wᵀ[kdim, cout] · dy[cout, np]
            gemm(kdim, cout, np, w, 1, kdim, dys, np, 1, 0.0, &mut col, np);
            col2im(&col, g, &mut dx[s * in_per..(s + 1) * in_per]);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Non-overlapping `k×k` average pooling over `[planes, h, w]`.
pub(crate) fn avg_pool(x: &[f32], planes: usize, h: usize, w: usize, k: usize) -> Vec<f32> {
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f32;
    let mut out = vec![0.0f32; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oi in 0..ho {
            for oj in 0..wo {
                let mut acc = 0.0f32;
                for di in 0..k {
                    let row = &src[(oi * k + di) * w + oj * k..(oi * k + di) * w + oj * k + k];
                    for v in row {
                        acc += v;
                    }
                }
                dst[oi * wo + oj] = acc * inv;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(dy: &[f32], planes: usize, h: usize, w: usize, k: usize) -> Vec<f32> {
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f32;
    let mut dx = vec![0.0f32; planes * h * w];
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                dx[p * h * w + i * w + j] = dy[p * ho * wo + (i / k) * wo + j / k] * inv;
            }
        }
    }
    dx
}

/// Non-overlapping `k×k` max pooling. Returns values and the flat input
/// index of each window's maximum (first maximum in raster order).
pub(crate) fn max_pool(x: &[f32], planes: usize, h: usize, w: usize, k: usize) -> (Vec<f32>, Vec<u32>) {
    let (ho, wo) = (h / k, w / k);
    let mut out = vec![0.0f32; planes * ho * wo];
    let mut arg = vec![0u32; planes * ho * wo];
    for p in 0..planes {
        for oi in 0..ho {
            for oj in 0..wo {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0usize;
                for di in 0..k {
                    for dj in 0..k {
                        let idx = p * h * w + (oi * k + di) * w + oj * k + dj;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[p * ho * wo + oi * wo + oj] = best;
                arg[p * ho * wo + oi * wo + oj] = best_idx as u32;
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour upsampling by an integer factor.
pub(crate) fn upsample(x: &[f32], planes: usize, h: usize, w: usize, k: usize) -> Vec<f32> {
    let (ho, wo) = (h * k, w * k);
    let mut out = vec![0.0f32; planes * ho * wo];
    for p in 0..planes {
        for i in 0..ho {
            for j in 0..wo {
                out[p * ho * wo + i * wo + j] = x[p * h * w + (i / k) * w + j / k];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(dy: &[f32], planes: usize, h: usize, w: usize, k: usize) -> Vec<f32> {
    let (ho, wo) = (h * k, w * k);
    let mut dx = vec![0.0f32; planes * h * w];
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0f32;
                for di in 0..k {
                    for dj in 0..k {
                        acc += dy[p * ho * wo + (i * k + di) * wo + j * k + dj];
                    }
                }
                dx[p * h * w + i * w + j] = acc;
            }
        }
    }
    dx
}

use super::kernels::{self, ConvGeom};
use super::{GradError, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Matmul(Var, Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, n: usize, cout: usize },
    BiasChannels { x: Var, b: Var },
    AvgPool { x: Var, k: usize },
    MaxPool { x: Var, arg: Vec<u32> },
    Upsample { x: Var, k: usize },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    Concat { a: Var, b: Var },
    Reshape(Var),
    Gather { x: Var, idx: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-owner tape of tensor operations supporting reverse-mode
/// differentiation of a scalar loss.
///
/// Nodes are appended in evaluation order, so the tape is acyclic by
/// construction. Every op checks its inputs' shapes and rejects non-finite
/// outputs.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar loss with respect to the graph's leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, or zeros of the right shape when the loss does not
    /// depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> GradError {
    GradError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn acc(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(t) => {
            for (a, d) in t.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op, parents: &[Var]) -> Result<Var, GradError> {
        if !value.is_finite() {
            return Err(GradError::NonFinite(op));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op: node_op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Result<Var, GradError> {
        let value = self.value(x).map(f);
        self.push(name, value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let value = self.value(a).add(self.value(b)).map_err(|_| mismatch("add", self.value(a), self.value(b)))?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let value = self.value(a).sub(self.value(b)).map_err(|_| mismatch("sub", self.value(a), self.value(b)))?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .map_err(|_| mismatch("mul", self.value(a), self.value(b)))?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var, GradError> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Result<Var, GradError> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0f32; m * n];
        kernels::gemm(m, k, n, ta.data(), k, 1, tb.data(), n, 1, 0.0, &mut out, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::Matmul(a, b), &[a, b])
    }

    /// 2-D convolution with zero padding. `x: [n, cin, h, w]`,
    /// `w: [cout, cin, kh, kw]`, optional `b: [cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var, GradError> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(mismatch("conv2d", tx, tw));
        }
        let cout = ws[0];
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(mismatch("conv2d.bias", tw, self.value(b)));
            }
        }
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], ws[3], stride, pad)
            .ok_or_else(|| mismatch("conv2d", tx, tw))?;
        let n = xs[0];
        let out = kernels::conv2d_forward(tx.data(), n, &geom, tw.data(), cout, b.map(|b| self.value(b).data()));
        let value = Tensor::from_parts(vec![n, cout, geom.ho, geom.wo], out);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push("conv2d", value, Op::Conv2d { x, w, b, geom, n, cout }, &parents)
    }

    /// Adds a per-channel bias to `[n, c, ...]`. `b` is `[c]` (shared) or
    /// `[n, c]` (per sample).
    pub fn bias_channels(&mut self, x: Var, b: Var) -> Result<Var, GradError> {
        let (tx, tb) = (self.value(x), self.value(b));
        let xs = tx.shape();
        if xs.len() < 2 {
            return Err(mismatch("bias_channels", tx, tb));
        }
        let (n, c) = (xs[0], xs[1]);
        let per_sample = match tb.shape() {
            [bc] if *bc == c => false,
            [bn, bc] if *bn == n && *bc == c => true,
            _ => return Err(mismatch("bias_channels", tx, tb)),
        };
        let plane: usize = xs[2..].iter().product();
        let mut data = tx.data().to_vec();
        for s in 0..n {
            for ch in 0..c {
                let bias = if per_sample { tb.data()[s * c + ch] } else { tb.data()[ch] };
                let off = (s * c + ch) * plane;
                for v in &mut data[off..off + plane] {
                    *v += bias;
                }
            }
        }
        let value = Tensor::from_parts(xs.to_vec(), data);
        self.push("bias_channels", value, Op::BiasChannels { x, b }, &[x, b])
    }

    fn spatial(&self, name: &'static str, x: Var, k: usize) -> Result<(usize, usize, usize, usize), GradError> {
        let s = self.value(x).shape();
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return Err(GradError::InvalidArgument(format!("{name}: shape {s:?} with window {k}")));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var, GradError> {
        let (n, c, h, w) = self.spatial("avg_pool", x, k)?;
        let out = kernels::avg_pool(self.value(x).data(), n * c, h, w, k);
        self.push("avg_pool", Tensor::from_parts(vec![n, c, h / k, w / k], out), Op::AvgPool { x, k }, &[x])
    }

    pub fn max_pool(&mut self, x: Var, k: usize) -> Result<Var, GradError> {
        let (n, c, h, w) = self.spatial("max_pool", x, k)?;
        let (out, arg) = kernels::max_pool(self.value(x).data(), n * c, h, w, k);
        self.push("max_pool", Tensor::from_parts(vec![n, c, h / k, w / k], out), Op::MaxPool { x, arg }, &[x])
    }

    pub fn upsample(&mut self, x: Var, k: usize) -> Result<Var, GradError> {
        let (n, c, h, w) = self.spatial("upsample", x, 1)?;
        if k == 0 {
            return Err(GradError::InvalidArgument("upsample: factor 0".into()));
        }
        let out = kernels::upsample(self.value(x).data(), n * c, h, w, k);
        self.push("upsample", Tensor::from_parts(vec![n, c, h * k, w * k], out), Op::Upsample { x, k }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, GradError> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, GradError> {
        self.unary("sigmoid", x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, GradError> {
        self.unary("exp", x, f32::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, GradError> {
        self.unary("log", x, f32::ln, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, GradError> {
        self.unary("sqrt", x, f32::sqrt, Op::Sqrt(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, GradError> {
        self.unary("abs", x, f32::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var, GradError> {
        self.unary("square", x, |v| v * v, Op::Square(x))
    }

    fn last_dim(&self, x: Var) -> usize {
        *self.value(x).shape().last().expect("non-empty shape")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, GradError> {
        let c = self.last_dim(x);
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0f32;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let value = Tensor::from_parts(self.value(x).shape().to_vec(), data);
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, GradError> {
        let c = self.last_dim(x);
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let z: f32 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor::from_parts(self.value(x).shape().to_vec(), data);
        self.push("log_softmax", value, Op::LogSoftmax(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, GradError> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, GradError> {
        let s = self.value(x).mean();
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Σ|x|
    pub fn l1_norm(&mut self, x: Var) -> Result<Var, GradError> {
        let a = self.abs(x)?;
        self.sum(a)
    }

    /// sqrt(Σx²)
    pub fn l2_norm(&mut self, x: Var) -> Result<Var, GradError> {
        let sq = self.square(x)?;
        let s = self.sum(sq)?;
        self.sqrt(s)
    }

    /// Concatenate `[n, ca, ...]` and `[n, cb, ...]` along axis 1.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(mismatch("concat", ta, tb));
        }
        let n = sa[0];
        let (pa, pb) = (ta.len() / n, tb.len() / n);
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for s in 0..n {
            data.extend_from_slice(&ta.data()[s * pa..(s + 1) * pa]);
            data.extend_from_slice(&tb.data()[s * pb..(s + 1) * pb]);
        }
        let mut shape = sa.to_vec();
        shape[1] += sb[1];
        self.push("concat", Tensor::from_parts(shape, data), Op::Concat { a, b }, &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var, GradError> {
        let value = self.value(x).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Picks `x[i, idx[i]]` from `[n, c]`, giving `[n]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var, GradError> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 2 || s[0] != idx.len() || idx.iter().any(|&i| i >= s[1]) {
            return Err(GradError::InvalidArgument(format!("gather: shape {s:?}, {} indices", idx.len())));
        }
        let c = s[1];
        let data = idx.iter().enumerate().map(|(r, &i)| t.data()[r * c + i]).collect();
        let value = Tensor::from_parts(vec![idx.len()], data);
        self.push("gather", value, Op::Gather { x, idx: idx.to_vec() }, &[x])
    }

    /// Reverse sweep from a one-element `loss`. Gradients are kept for leaf
    /// nodes only.
    pub fn backward(&self, loss: Var) -> Result<Gradients, GradError> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(GradError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(lt.shape().to_vec()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn send(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if self.needs(v) {
            acc(&mut grads[v.0], delta);
        }
    }

    fn propagate(&self, i: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &self.nodes[i].value;
        let shape_of = |v: Var| self.value(v).shape().to_vec();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(grads, *a, dy.clone());
                self.send(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, dy.clone());
                self.send(grads, *b, dy.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = dy.zip_map(self.value(*b), |g, v| g * v).expect("shape");
                    self.send(grads, *a, d);
                }
                if self.needs(*b) {
                    let d = dy.zip_map(self.value(*a), |g, v| g * v).expect("shape");
                    self.send(grads, *b, d);
                }
            }
            Op::Scale(x, c) => self.send(grads, *x, dy.scale(*c)),
            Op::AddScalar(x) => self.send(grads, *x, dy.clone()),
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    // dA[m,k] = dC[m,n] · Bᵀ
                    let mut da = vec![0.0f32; m * k];
                    kernels::gemm(m, n, k, dy.data(), n, 1, tb.data(), 1, n, 0.0, &mut da, k);
                    self.send(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.needs(*b) {
                    // dB[k,n] = Aᵀ · dC
                    let mut db = vec![0.0f32; k * n];
                    kernels::gemm(k, m, n, ta.data(), 1, k, dy.data(), n, 1, 0.0, &mut db, n);
                    self.send(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Conv2d { x, w, b, geom, n, cout } => {
                let need_db = b.map(|b| self.needs(b)).unwrap_or(false);
                let g = kernels::conv2d_backward(
                    self.value(*x).data(),
                    *n,
                    geom,
                    self.value(*w).data(),
                    *cout,
                    dy.data(),
                    self.needs(*x),
                    self.needs(*w),
                    need_db,
                );
                if let Some(dx) = g.dx {
                    self.send(grads, *x, Tensor::from_parts(shape_of(*x), dx));
                }
                if let Some(dw) = g.dw {
                    self.send(grads, *w, Tensor::from_parts(shape_of(*w), dw));
                }
                if let (Some(db), Some(b)) = (g.db, b) {
                    self.send(grads, *b, Tensor::from_parts(vec![*cout], db));
                }
            }
            Op::BiasChannels { x, b } => {
                self.send(grads, *x, dy.clone());
                if self.needs(*b) {
                    let s = dy.shape();
                    let (n, c) = (s[0], s[1]);
                    let plane: usize = s[2..].iter().product();
                    let per_sample = self.value(*b).shape().len() == 2;
                    let mut db = vec![0.0f32; if per_sample { n * c } else { c }];
                    for smp in 0..n {
                        for ch in 0..c {
                            let off = (smp * c + ch) * plane;
                            let v: f32 = dy.data()[off..off + plane].iter().sum();
                            db[if per_sample { smp * c + ch } else { ch }] += v;
                        }
                    }
                    self.send(grads, *b, Tensor::from_parts(shape_of(*b), db));
                }
            }
            Op::AvgPool { x, k } => {
                let s = shape_of(*x);
                let dx = kernels::avg_pool_backward(dy.data(), s[0] * s[1], s[2], s[3], *k);
                self.send(grads, *x, Tensor::from_parts(s, dx));
            }
            Op::MaxPool { x, arg } => {
                let s = shape_of(*x);
                let mut dx = vec![0.0f32; s.iter().product()];
                for (g, &a) in dy.data().iter().zip(arg) {
                    dx[a as usize] += g;
                }
                self.send(grads, *x, Tensor::from_parts(s, dx));
            }
            Op::Upsample { x, k } => {
                let s = shape_of(*x);
                let dx = kernels::upsample_backward(dy.data(), s[0] * s[1], s[2], s[3], *k);
                self.send(grads, *x, Tensor::from_parts(s, dx));
            }
            Op::Relu(x) => {
                let d = dy.zip_map(self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 }).expect("shape");
                self.send(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = dy.zip_map(y, |g, s| g * s * (1.0 - s)).expect("shape");
                self.send(grads, *x, d);
            }
            Op::Exp(x) => self.send(grads, *x, dy.zip_map(y, |g, e| g * e).expect("shape")),
            Op::Log(x) => {
                let d = dy.zip_map(self.value(*x), |g, v| g / v).expect("shape");
                self.send(grads, *x, d);
            }
            Op::Sqrt(x) => self.send(grads, *x, dy.zip_map(y, |g, r| g * 0.5 / r).expect("shape")),
            Op::Abs(x) => {
                let d = dy
                    .zip_map(self.value(*x), |g, v| {
                        if v > 0.0 {
                            g
                        } else if v < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .expect("shape");
                self.send(grads, *x, d);
            }
            Op::Square(x) => {
                let d = dy.zip_map(self.value(*x), |g, v| 2.0 * g * v).expect("shape");
                self.send(grads, *x, d);
            }
            Op::Softmax(x) => {
                let c = *y.shape().last().unwrap();
                let mut dx = vec![0.0f32; y.len()];
                for ((dr, yr), out) in dy.data().chunks(c).zip(y.data().chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: f32 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, g), p) in out.iter_mut().zip(dr).zip(yr) {
                        *o = p * (g - dot);
                    }
                }
                self.send(grads, *x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::LogSoftmax(x) => {
                let c = *y.shape().last().unwrap();
                let mut dx = vec![0.0f32; y.len()];
                for ((dr, yr), out) in dy.data().chunks(c).zip(y.data().chunks(c)).zip(dx.chunks_mut(c)) {
                    let total: f32 = dr.iter().sum();
                    for ((o, g), l) in out.iter_mut().zip(dr).zip(yr) {
                        *o = g - l.exp() * total;
                    }
                }
                self.send(grads, *x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::Sum(x) => self.send(grads, *x, Tensor::full(shape_of(*x), dy.item())),
            Op::Mean(x) => {
                let s = shape_of(*x);
                let n: usize = s.iter().product();
                self.send(grads, *x, Tensor::full(s, dy.item() / n as f32));
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (shape_of(*a), shape_of(*b));
                let n = sa[0];
                let pa: usize = sa[1..].iter().product();
                let pb: usize = sb[1..].iter().product();
                let mut da = Vec::with_capacity(n * pa);
                let mut db = Vec::with_capacity(n * pb);
                for s in 0..n {
                    let row = &dy.data()[s * (pa + pb)..(s + 1) * (pa + pb)];
                    da.extend_from_slice(&row[..pa]);
                    db.extend_from_slice(&row[pa..]);
                }
                self.send(grads, *a, Tensor::from_parts(sa, da));
                self.send(grads, *b, Tensor::from_parts(sb, db));
            }
            Op::Reshape(x) => {
                let s = shape_of(*x);
                self.send(grads, *x, Tensor::from_parts(s, dy.data().to_vec()));
            }
            Op::Gather { x, idx } => {
                let s = shape_of(*x);
                let c = s[1];
                let mut dx = vec![0.0f32; s[0] * c];
                for (r, (&i, g)) in idx.iter().zip(dy.data()).enumerate() {
                    dx[r * c + i] += g;
                }
                self.send(grads, *x, Tensor::from_parts(s, dx));
            }
        }
    }
}

/// Gradient of the scalar `loss` with respect to `wrt`; zeros when `wrt`
/// does not influence the loss.
pub fn grad(graph: &Graph, loss: Var, wrt: Var) -> Result<Tensor, GradError> {
    Ok(graph.backward(loss)?.wrt(wrt))
}

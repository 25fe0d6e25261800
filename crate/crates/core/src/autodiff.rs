//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! The tape records every operation of a forward pass as a node holding the
//! operation description and its computed value. Nodes are pure functions of
//! their parents, so replaying the tape reproduces every value bit for bit,
//! and [`Tape::backward`] visits nodes in reverse emission order (which is a
//! reverse topological order by construction) exactly once, accumulating
//! gradients into every reachable node. Parameters that never feed the loss
//! keep a zero gradient.
//!
//! The engine is generic over the scalar type: training runs in `f32`,
//! finite-difference verification in `f64`. Operations stick to the tensor
//! granularity the model needs (matrix products, the 3x3 stem convolution,
//! layer norm, the fused selective scan) so dispatch overhead stays
//! negligible next to the arithmetic.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

/// Scalar type the tape can differentiate through.
pub trait Real:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    fn to_bits64(self) -> u64;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn ln_1p(self) -> Self {
        self.ln_1p()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn tanh(self) -> Self {
        self.tanh()
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn maximum(self, other: Self) -> Self {
        self.max(other)
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }
    fn to_bits64(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn ln_1p(self) -> Self {
        self.ln_1p()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn tanh(self) -> Self {
        self.tanh()
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn maximum(self, other: Self) -> Self {
        self.max(other)
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }
    fn to_bits64(self) -> u64 {
        self.to_bits()
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R> {
    pub shape: Vec<usize>,
    pub data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![R::ZERO; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<R>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data length does not match shape {shape:?}"
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn scalar(x: R) -> Self {
        Tensor { shape: vec![1], data: vec![x] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Convert element-wise between scalar types (used when loading f32
    /// checkpoints into an f64 verification model and back).
    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| S::from_f64(x.to_f64())).collect(),
        }
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Pointwise nonlinearities available to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Silu,
    Gelu,
}

impl Activation {
    fn apply<R: Real>(self, x: R) -> R {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.maximum(R::ZERO),
            Activation::Silu => x * sigmoid(x),
            Activation::Gelu => {
                let c = R::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
                let a = R::from_f64(0.044_715);
                let half = R::from_f64(0.5);
                let u = c * (x + a * x * x * x);
                half * x * (R::ONE + u.tanh())
            }
        }
    }

    fn derivative<R: Real>(self, x: R) -> R {
        match self {
            Activation::Identity => R::ONE,
            Activation::Relu => {
                if x > R::ZERO {
                    R::ONE
                } else {
                    R::ZERO
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (R::ONE + x * (R::ONE - s))
            }
            Activation::Gelu => {
                let c = R::from_f64(0.797_884_560_802_865_4);
                let a = R::from_f64(0.044_715);
                let half = R::from_f64(0.5);
                let three = R::from_f64(3.0);
                let u = c * (x + a * x * x * x);
                let t = u.tanh();
                let du = c * (R::ONE + three * a * x * x);
                half * (R::ONE + t) + half * x * (R::ONE - t * t) * du
            }
        }
    }
}

fn sigmoid<R: Real>(x: R) -> R {
    // 1 / (1 + e^-x), evaluated on the non-overflowing side.
    if x >= R::ZERO {
        R::ONE / (R::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::ONE + e)
    }
}

fn softplus_scalar<R: Real>(x: R) -> R {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|)
    x.maximum(R::ZERO) + (-x.abs()).exp().ln_1p()
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op<R> {
    Leaf { param: bool },
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    /// Elementwise (Hadamard) product of same-shape tensors.
    Mul { a: Var, b: Var },
    /// Add a length-c row vector to every row of an (r, c) matrix.
    AddRow { x: Var, row: Var },
    Scale { x: Var, c: R },
    Unary { x: Var, kind: Activation },
    Softplus { x: Var },
    /// y = -exp(x); keeps state-matrix entries strictly negative while the
    /// trainable parameter ranges over all reals.
    NegExp { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var },
    /// Same-padded 3x3 convolution: x is (c_in, h, w), kernel (c_out, c_in, 3, 3).
    Conv3x3 { x: Var, kernel: Var, bias: Var },
    /// (c, h, w) -> (grid_h * grid_w, c * p * p): non-overlapping patches in
    /// row-major order, each flattened channel-major.
    Patches { x: Var, patch: usize },
    ConcatRows { parts: Vec<Var> },
    SelectRow { x: Var, row: usize },
    /// Fused selective-state-space recurrence. Shapes: x (t, d), b (t, n),
    /// c (t, n), delta (t, d) positive, a (d, n) negative, d_skip (d).
    SelectiveScan { x: Var, b: Var, c: Var, delta: Var, a: Var, d_skip: Var },
    /// Scalar loss: softmax cross entropy of a length-c logit vector against
    /// a label-smoothed one-hot target.
    CrossEntropy { logits: Var, target: usize, smoothing: f64 },
    /// Scalar probe sum(x * w) with constant weights; lets tests and gradient
    /// checks reduce any tensor to a differentiable scalar.
    ReduceDot { x: Var, weights: Tensor<R> },
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<R> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of the loss with respect to the node, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient as a dense tensor, zero-filled when the node is off-path.
    pub fn dense(&self, v: Var, shape: &[usize]) -> Tensor<R> {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    /// Whether the node was recorded as a trainable parameter.
    pub fn is_param(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf { param: true })
    }

    /// Record a constant input.
    pub fn leaf(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf { param: false })
    }

    /// Record a trainable parameter.
    pub fn param(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf { param: true })
    }

    /// Overwrite a leaf's value (finite-difference probes). The shape must
    /// match; downstream values stay stale until [`Tape::recompute`].
    pub fn set_leaf(&mut self, v: Var, value: Tensor<R>) {
        assert!(matches!(self.nodes[v.0].op, Op::Leaf { .. }), "set_leaf on a non-leaf node");
        assert_eq!(self.nodes[v.0].value.shape, value.shape, "set_leaf shape mismatch");
        self.nodes[v.0].value = value;
    }

    /// Re-evaluate every non-leaf node in emission order.
    pub fn recompute(&mut self) {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue;
            }
            let value = eval(&self.nodes[..i], &self.nodes[i].op);
            self.nodes[i].value = value;
        }
    }

    /// Replay the forward pass and report whether every stored value is
    /// reproduced bit for bit.
    pub fn replay_matches(&self) -> bool {
        // Evaluate against the replayed prefix, not the stored values.
        let mut replayed: Vec<Node<R>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf { .. } => node.value.clone(),
                _ => eval(&replayed, &node.op),
            };
            replayed.push(Node { value, op: node.op.clone() });
        }
        self.nodes.iter().zip(&replayed).all(|(n, v)| {
            n.value.shape == v.value.shape
                && n.value
                    .data
                    .iter()
                    .zip(&v.value.data)
                    .all(|(a, b)| a.to_bits64() == b.to_bits64())
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = (self.value(a).rows(), self.value(a).cols());
        let (br, bc) = (self.value(b).rows(), self.value(b).cols());
        assert_eq!(ac, br, "matmul {ar}x{ac} by {br}x{bc}");
        self.record(Op::Matmul { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape, self.value(b).shape, "add shape mismatch");
        self.record(Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape, self.value(b).shape, "mul shape mismatch");
        self.record(Op::Mul { a, b })
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.value(x).cols(), self.value(row).numel(), "add_row width mismatch");
        self.record(Op::AddRow { x, row })
    }

    pub fn scale(&mut self, x: Var, c: R) -> Var {
        self.record(Op::Scale { x, c })
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        self.record(Op::Unary { x, kind })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.record(Op::Softplus { x })
    }

    pub fn neg_exp(&mut self, x: Var) -> Var {
        self.record(Op::NegExp { x })
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let cols = self.value(x).cols();
        assert_eq!(self.value(gain).numel(), cols, "layer_norm gain width");
        assert_eq!(self.value(bias).numel(), cols, "layer_norm bias width");
        self.record(Op::LayerNorm { x, gain, bias })
    }

    pub fn conv3x3(&mut self, x: Var, kernel: Var, bias: Var) -> Var {
        let xs = &self.value(x).shape;
        let ks = &self.value(kernel).shape;
        assert_eq!(xs.len(), 3, "conv3x3 input must be (c, h, w)");
        assert_eq!(ks.len(), 4, "conv3x3 kernel must be (c_out, c_in, 3, 3)");
        assert_eq!(ks[1], xs[0], "conv3x3 channel mismatch");
        assert!(ks[2] == 3 && ks[3] == 3, "conv3x3 kernel must be 3x3");
        assert_eq!(self.value(bias).numel(), ks[0], "conv3x3 bias width");
        self.record(Op::Conv3x3 { x, kernel, bias })
    }

    pub fn patches(&mut self, x: Var, patch: usize) -> Var {
        let xs = &self.value(x).shape;
        assert_eq!(xs.len(), 3, "patches input must be (c, h, w)");
        assert!(patch > 0 && xs[1] % patch == 0 && xs[2] % patch == 0, "patch must tile the image");
        self.record(Op::Patches { x, patch })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = self.value(parts[0]).cols();
        for &p in parts {
            assert_eq!(self.value(p).cols(), cols, "concat_rows width mismatch");
        }
        self.record(Op::ConcatRows { parts: parts.to_vec() })
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Var {
        assert!(row < self.value(x).rows(), "select_row out of range");
        self.record(Op::SelectRow { x, row })
    }

    pub fn selective_scan(
        &mut self,
        x: Var,
        b: Var,
        c: Var,
        delta: Var,
        a: Var,
        d_skip: Var,
    ) -> Var {
        let (t, d) = (self.value(x).rows(), self.value(x).cols());
        let n = self.value(b).cols();
        assert_eq!(self.value(b).rows(), t, "scan b length");
        assert_eq!(self.value(c).shape, vec![t, n], "scan c shape");
        assert_eq!(self.value(delta).shape, vec![t, d], "scan delta shape");
        assert_eq!(self.value(a).shape, vec![d, n], "scan a shape");
        assert_eq!(self.value(d_skip).numel(), d, "scan skip width");
        self.record(Op::SelectiveScan { x, b, c, delta, a, d_skip })
    }

    pub fn cross_entropy(&mut self, logits: Var, target: usize, smoothing: f64) -> Var {
        assert!(target < self.value(logits).numel(), "target class out of range");
        assert!((0.0..1.0).contains(&smoothing), "smoothing must be in [0, 1)");
        self.record(Op::CrossEntropy { logits, target, smoothing })
    }

    pub fn reduce_dot(&mut self, x: Var, weights: Tensor<R>) -> Var {
        assert_eq!(self.value(x).numel(), weights.numel(), "reduce_dot weight size");
        self.record(Op::ReduceDot { x, weights })
    }

    fn record(&mut self, op: Op<R>) -> Var {
        let value = eval(&self.nodes, &op);
        self.push(value, op)
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar loss node. Each node is visited exactly
    /// once, in reverse emission order; gradients of unreached nodes stay
    /// absent (dense zero on request).
    pub fn backward(&self, loss: Var) -> Gradients<R> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<R>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(R::ONE));

        for i in (0..self.nodes.len()).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, gy: &Tensor<R>, grads: &mut [Option<Tensor<R>>]) {
        let nodes = &self.nodes;
        match &nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Matmul { a, b } => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                // dA = dY B^T, dB = A^T dY
                let mut da = Tensor::zeros(&av.shape);
                for r in 0..m {
                    for c in 0..k {
                        let mut acc = R::ZERO;
                        for j in 0..n {
                            acc += gy.data[r * n + j] * bv.data[c * n + j];
                        }
                        da.data[r * k + c] = acc;
                    }
                }
                let mut db = Tensor::zeros(&bv.shape);
                for c in 0..k {
                    for j in 0..n {
                        let mut acc = R::ZERO;
                        for r in 0..m {
                            acc += av.data[r * k + c] * gy.data[r * n + j];
                        }
                        db.data[c * n + j] = acc;
                    }
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, gy.clone());
                accumulate(grads, *b, gy.clone());
            }
            Op::Mul { a, b } => {
                let hadamard = |other: &Tensor<R>| Tensor {
                    shape: gy.shape.clone(),
                    data: gy.data.iter().zip(&other.data).map(|(g, v)| *g * *v).collect(),
                };
                let da = hadamard(&nodes[b.0].value);
                let db = hadamard(&nodes[a.0].value);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::AddRow { x, row } => {
                let cols = nodes[row.0].value.numel();
                let mut dr = Tensor::zeros(&nodes[row.0].value.shape);
                for (j, g) in gy.data.iter().enumerate() {
                    dr.data[j % cols] += *g;
                }
                accumulate(grads, *x, gy.clone());
                accumulate(grads, *row, dr);
            }
            Op::Scale { x, c } => {
                let dx = Tensor {
                    shape: gy.shape.clone(),
                    data: gy.data.iter().map(|g| *g * *c).collect(),
                };
                accumulate(grads, *x, dx);
            }
            Op::Unary { x, kind } => {
                let xv = &nodes[x.0].value;
                let dx = Tensor {
                    shape: xv.shape.clone(),
                    data: xv
                        .data
                        .iter()
                        .zip(&gy.data)
                        .map(|(x, g)| *g * kind.derivative(*x))
                        .collect(),
                };
                accumulate(grads, *x, dx);
            }
            Op::Softplus { x } => {
                let xv = &nodes[x.0].value;
                let dx = Tensor {
                    shape: xv.shape.clone(),
                    data: xv.data.iter().zip(&gy.data).map(|(x, g)| *g * sigmoid(*x)).collect(),
                };
                accumulate(grads, *x, dx);
            }
            Op::NegExp { x } => {
                // y = -e^x, dy/dx = -e^x = y
                let yv = &nodes[i].value;
                let dx = Tensor {
                    shape: yv.shape.clone(),
                    data: yv.data.iter().zip(&gy.data).map(|(y, g)| *g * *y).collect(),
                };
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = &nodes[x.0].value;
                let gv = &nodes[gain.0].value;
                let (rows, cols) = (xv.rows(), xv.cols());
                let eps = R::from_f64(LAYER_NORM_EPS);
                let inv_n = R::ONE / R::from_f64(cols as f64);
                let mut dx = Tensor::zeros(&xv.shape);
                let mut dg = Tensor::zeros(&gv.shape);
                let mut db = Tensor::zeros(&nodes[bias.0].value.shape);
                for r in 0..rows {
                    let xr = &xv.data[r * cols..(r + 1) * cols];
                    let gr = &gy.data[r * cols..(r + 1) * cols];
                    let mut mean = R::ZERO;
                    for &v in xr {
                        mean += v;
                    }
                    mean = mean * inv_n;
                    let mut var = R::ZERO;
                    for &v in xr {
                        var += (v - mean) * (v - mean);
                    }
                    var = var * inv_n;
                    let rstd = R::ONE / (var + eps).sqrt();
                    // dxhat_j = g_j * gain_j ; dx = rstd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                    let mut mean_dxhat = R::ZERO;
                    let mut mean_dxhat_xhat = R::ZERO;
                    for j in 0..cols {
                        let xhat = (xr[j] - mean) * rstd;
                        let dxhat = gr[j] * gv.data[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                        dg.data[j] += gr[j] * xhat;
                        db.data[j] += gr[j];
                    }
                    mean_dxhat = mean_dxhat * inv_n;
                    mean_dxhat_xhat = mean_dxhat_xhat * inv_n;
                    for j in 0..cols {
                        let xhat = (xr[j] - mean) * rstd;
                        let dxhat = gr[j] * gv.data[j];
                        dx.data[r * cols + j] =
                            rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gain, dg);
                accumulate(grads, *bias, db);
            }
            Op::Conv3x3 { x, kernel, bias } => {
                let xv = &nodes[x.0].value;
                let kv = &nodes[kernel.0].value;
                let (c_in, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2]);
                let c_out = kv.shape[0];
                let mut dx = Tensor::zeros(&xv.shape);
                let mut dk = Tensor::zeros(&kv.shape);
                let mut dbias = Tensor::zeros(&nodes[bias.0].value.shape);
                for co in 0..c_out {
                    for y in 0..h {
                        for xx in 0..w {
                            let g = gy.data[(co * h + y) * w + xx];
                            dbias.data[co] += g;
                            for ci in 0..c_in {
                                for ky in 0..3 {
                                    let iy = y + ky;
                                    if iy < 1 || iy > h {
                                        continue;
                                    }
                                    let iy = iy - 1;
                                    for kx in 0..3 {
                                        let ix = xx + kx;
                                        if ix < 1 || ix > w {
                                            continue;
                                        }
                                        let ix = ix - 1;
                                        let kidx = ((co * c_in + ci) * 3 + ky) * 3 + kx;
                                        let xidx = (ci * h + iy) * w + ix;
                                        dk.data[kidx] += g * xv.data[xidx];
                                        dx.data[xidx] += g * kv.data[kidx];
                                    }
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *kernel, dk);
                accumulate(grads, *bias, dbias);
            }
            Op::Patches { x, patch } => {
                let xv = &nodes[x.0].value;
                let (c, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2]);
                let p = *patch;
                let (gh, gw) = (h / p, w / p);
                let row_len = c * p * p;
                let mut dx = Tensor::zeros(&xv.shape);
                for gy_i in 0..gh {
                    for gx in 0..gw {
                        let r = gy_i * gw + gx;
                        for ci in 0..c {
                            for py in 0..p {
                                for px in 0..p {
                                    let col = (ci * p + py) * p + px;
                                    let xidx = (ci * h + gy_i * p + py) * w + gx * p + px;
                                    dx.data[xidx] += gy.data[r * row_len + col];
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatRows { parts } => {
                let cols = gy.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = nodes[p.0].value.rows();
                    let slice = &gy.data[offset * cols..(offset + rows) * cols];
                    let dp =
                        Tensor::from_vec(&[rows, cols], slice.to_vec());
                    accumulate(grads, p, dp);
                    offset += rows;
                }
            }
            Op::SelectRow { x, row } => {
                let xv = &nodes[x.0].value;
                let cols = xv.cols();
                let mut dx = Tensor::zeros(&xv.shape);
                dx.data[row * cols..(row + 1) * cols].copy_from_slice(&gy.data);
                accumulate(grads, *x, dx);
            }
            Op::SelectiveScan { x, b, c, delta, a, d_skip } => {
                let (dx, db, dc, ddelta, da, dskip_grad) = scan_backward(
                    &nodes[x.0].value,
                    &nodes[b.0].value,
                    &nodes[c.0].value,
                    &nodes[delta.0].value,
                    &nodes[a.0].value,
                    &nodes[d_skip.0].value,
                    gy,
                );
                accumulate(grads, *x, dx);
                accumulate(grads, *b, db);
                accumulate(grads, *c, dc);
                accumulate(grads, *delta, ddelta);
                accumulate(grads, *a, da);
                accumulate(grads, *d_skip, dskip_grad);
            }
            Op::CrossEntropy { logits, target, smoothing } => {
                let lv = &nodes[logits.0].value;
                let n = lv.numel();
                let probs = softmax(&lv.data);
                let uniform = R::from_f64(smoothing / n as f64);
                let hot = R::from_f64(1.0 - smoothing);
                let g = gy.data[0];
                let mut dl = Tensor::zeros(&lv.shape);
                for j in 0..n {
                    let q = if j == *target { uniform + hot } else { uniform };
                    dl.data[j] = g * (probs[j] - q);
                }
                accumulate(grads, *logits, dl);
            }
            Op::ReduceDot { x, weights } => {
                let g = gy.data[0];
                let dx = Tensor {
                    shape: nodes[x.0].value.shape.clone(),
                    data: weights.data.iter().map(|w| g * *w).collect(),
                };
                accumulate(grads, *x, dx);
            }
        }
    }
}

fn accumulate<R: Real>(grads: &mut [Option<Tensor<R>>], v: Var, delta: Tensor<R>) {
    match &mut grads[v.0] {
        Some(g) => {
            debug_assert_eq!(g.shape, delta.shape);
            for (a, b) in g.data.iter_mut().zip(&delta.data) {
                *a += *b;
            }
        }
        slot => *slot = Some(delta),
    }
}

fn softmax<R: Real>(logits: &[R]) -> Vec<R> {
    let mut m = logits[0];
    for &v in logits {
        m = m.maximum(v);
    }
    let exps: Vec<R> = logits.iter().map(|v| (*v - m).exp()).collect();
    let mut sum = R::ZERO;
    for &e in &exps {
        sum += e;
    }
    exps.into_iter().map(|e| e / sum).collect()
}

/// Forward evaluation of one op against a prefix of nodes. Pure: the same
/// parents always produce the same bits.
fn eval<R: Real>(nodes: &[Node<R>], op: &Op<R>) -> Tensor<R> {
    match op {
        Op::Leaf { .. } => unreachable!("leaves are never re-evaluated"),
        Op::Matmul { a, b } => {
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            let mut out = Tensor::zeros(&[m, n]);
            for i in 0..m {
                let a_row = &av.data[i * k..(i + 1) * k];
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for (kk, &a_ik) in a_row.iter().enumerate() {
                    let b_row = &bv.data[kk * n..(kk + 1) * n];
                    for (o, &bv_) in out_row.iter_mut().zip(b_row) {
                        *o += a_ik * bv_;
                    }
                }
            }
            out
        }
        Op::Add { a, b } => {
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            Tensor {
                shape: av.shape.clone(),
                data: av.data.iter().zip(&bv.data).map(|(x, y)| *x + *y).collect(),
            }
        }
        Op::Mul { a, b } => {
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            Tensor {
                shape: av.shape.clone(),
                data: av.data.iter().zip(&bv.data).map(|(x, y)| *x * *y).collect(),
            }
        }
        Op::AddRow { x, row } => {
            let xv = &nodes[x.0].value;
            let rv = &nodes[row.0].value;
            let cols = rv.numel();
            let mut out = xv.clone();
            for (j, v) in out.data.iter_mut().enumerate() {
                *v += rv.data[j % cols];
            }
            out
        }
        Op::Scale { x, c } => {
            let xv = &nodes[x.0].value;
            Tensor { shape: xv.shape.clone(), data: xv.data.iter().map(|v| *v * *c).collect() }
        }
        Op::Unary { x, kind } => {
            let xv = &nodes[x.0].value;
            Tensor {
                shape: xv.shape.clone(),
                data: xv.data.iter().map(|v| kind.apply(*v)).collect(),
            }
        }
        Op::Softplus { x } => {
            let xv = &nodes[x.0].value;
            Tensor {
                shape: xv.shape.clone(),
                data: xv.data.iter().map(|v| softplus_scalar(*v)).collect(),
            }
        }
        Op::NegExp { x } => {
            let xv = &nodes[x.0].value;
            Tensor { shape: xv.shape.clone(), data: xv.data.iter().map(|v| -v.exp()).collect() }
        }
        Op::LayerNorm { x, gain, bias } => {
            let xv = &nodes[x.0].value;
            let gv = &nodes[gain.0].value;
            let bv = &nodes[bias.0].value;
            let (rows, cols) = (xv.rows(), xv.cols());
            let eps = R::from_f64(LAYER_NORM_EPS);
            let inv_n = R::ONE / R::from_f64(cols as f64);
            let mut out = Tensor::zeros(&xv.shape);
            for r in 0..rows {
                let xr = &xv.data[r * cols..(r + 1) * cols];
                let mut mean = R::ZERO;
                for &v in xr {
                    mean += v;
                }
                mean = mean * inv_n;
                let mut var = R::ZERO;
                for &v in xr {
                    var += (v - mean) * (v - mean);
                }
                var = var * inv_n;
                let rstd = R::ONE / (var + eps).sqrt();
                for j in 0..cols {
                    out.data[r * cols + j] = (xr[j] - mean) * rstd * gv.data[j] + bv.data[j];
                }
            }
            out
        }
        Op::Conv3x3 { x, kernel, bias } => {
            let xv = &nodes[x.0].value;
            let kv = &nodes[kernel.0].value;
            let bv = &nodes[bias.0].value;
            let (c_in, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2]);
            let c_out = kv.shape[0];
            let mut out = Tensor::zeros(&[c_out, h, w]);
            for co in 0..c_out {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = bv.data[co];
                        for ci in 0..c_in {
                            for ky in 0..3 {
                                let iy = y + ky;
                                if iy < 1 || iy > h {
                                    continue;
                                }
                                let iy = iy - 1;
                                for kx in 0..3 {
                                    let ix = xx + kx;
                                    if ix < 1 || ix > w {
                                        continue;
                                    }
                                    let ix = ix - 1;
                                    acc += kv.data[((co * c_in + ci) * 3 + ky) * 3 + kx]
                                        * xv.data[(ci * h + iy) * w + ix];
                                }
                            }
                        }
                        out.data[(co * h + y) * w + xx] = acc;
                    }
                }
            }
            out
        }
        Op::Patches { x, patch } => {
            let xv = &nodes[x.0].value;
            let (c, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2]);
            let p = *patch;
            let (gh, gw) = (h / p, w / p);
            let row_len = c * p * p;
            let mut out = Tensor::zeros(&[gh * gw, row_len]);
            for gy in 0..gh {
                for gx in 0..gw {
                    let r = gy * gw + gx;
                    for ci in 0..c {
                        for py in 0..p {
                            for px in 0..p {
                                let col = (ci * p + py) * p + px;
                                out.data[r * row_len + col] =
                                    xv.data[(ci * h + gy * p + py) * w + gx * p + px];
                            }
                        }
                    }
                }
            }
            out
        }
        Op::ConcatRows { parts } => {
            let cols = nodes[parts[0].0].value.cols();
            let total: usize = parts.iter().map(|p| nodes[p.0].value.rows()).sum();
            let mut data = Vec::with_capacity(total * cols);
            for &p in parts {
                data.extend_from_slice(&nodes[p.0].value.data);
            }
            Tensor::from_vec(&[total, cols], data)
        }
        Op::SelectRow { x, row } => {
            let xv = &nodes[x.0].value;
            let cols = xv.cols();
            Tensor::from_vec(&[1, cols], xv.data[row * cols..(row + 1) * cols].to_vec())
        }
        Op::SelectiveScan { x, b, c, delta, a, d_skip } => scan_forward(
            &nodes[x.0].value,
            &nodes[b.0].value,
            &nodes[c.0].value,
            &nodes[delta.0].value,
            &nodes[a.0].value,
            &nodes[d_skip.0].value,
        ),
        Op::CrossEntropy { logits, target, smoothing } => {
            let lv = &nodes[logits.0].value;
            let n = lv.numel();
            let mut m = lv.data[0];
            for &v in &lv.data {
                m = m.maximum(v);
            }
            let mut sum = R::ZERO;
            for &v in &lv.data {
                sum += (v - m).exp();
            }
            let lse = m + sum.ln();
            let uniform = R::from_f64(smoothing / n as f64);
            let hot = R::from_f64(1.0 - smoothing);
            let mut loss = R::ZERO;
            for (j, &l) in lv.data.iter().enumerate() {
                let q = if j == *target { uniform + hot } else { uniform };
                loss += q * (lse - l);
            }
            Tensor::scalar(loss)
        }
        Op::ReduceDot { x, weights } => {
            let xv = &nodes[x.0].value;
            let mut acc = R::ZERO;
            for (v, w) in xv.data.iter().zip(&weights.data) {
                acc += *v * *w;
            }
            Tensor::scalar(acc)
        }
    }
}

/// Forward recurrence of the fused selective scan (shared by eval and the
/// backward recomputation): h_t = exp(delta_t a) * h_{t-1} +
/// ((exp(delta_t a) - 1) / a) b_t x_t per (channel, state) lane, read out as
/// y_t = <c_t, h_t> + d_skip * x_t per channel.
fn scan_forward<R: Real>(
    x: &Tensor<R>,
    b: &Tensor<R>,
    c: &Tensor<R>,
    delta: &Tensor<R>,
    a: &Tensor<R>,
    d_skip: &Tensor<R>,
) -> Tensor<R> {
    let (t_len, d) = (x.rows(), x.cols());
    let n = b.cols();
    let mut h = vec![R::ZERO; d * n];
    let mut y = Tensor::zeros(&[t_len, d]);
    for t in 0..t_len {
        let bt = &b.data[t * n..(t + 1) * n];
        let ct = &c.data[t * n..(t + 1) * n];
        for di in 0..d {
            let dt = delta.data[t * d + di];
            let xv = x.data[t * d + di];
            let h_row = &mut h[di * n..(di + 1) * n];
            let a_row = &a.data[di * n..(di + 1) * n];
            let mut acc = R::ZERO;
            for ni in 0..n {
                let abar = (dt * a_row[ni]).exp();
                let bbar = (abar - R::ONE) / a_row[ni] * bt[ni];
                h_row[ni] = abar * h_row[ni] + bbar * xv;
                acc += ct[ni] * h_row[ni];
            }
            y.data[t * d + di] = acc + d_skip.data[di] * xv;
        }
    }
    y
}

/// Hand-derived reverse pass of the fused scan. Recomputes the state
/// trajectory forward (memory stays O(t d n) transient), then walks time
/// backwards carrying dL/dh.
#[allow(clippy::too_many_arguments)]
fn scan_backward<R: Real>(
    x: &Tensor<R>,
    b: &Tensor<R>,
    c: &Tensor<R>,
    delta: &Tensor<R>,
    a: &Tensor<R>,
    d_skip: &Tensor<R>,
    gy: &Tensor<R>,
) -> (Tensor<R>, Tensor<R>, Tensor<R>, Tensor<R>, Tensor<R>, Tensor<R>) {
    let (t_len, d) = (x.rows(), x.cols());
    let n = b.cols();

    // Recompute all states; h_all[t] is h after step t.
    let mut h_all = vec![R::ZERO; t_len * d * n];
    {
        let mut h = vec![R::ZERO; d * n];
        for t in 0..t_len {
            let bt = &b.data[t * n..(t + 1) * n];
            for di in 0..d {
                let dt = delta.data[t * d + di];
                let xv = x.data[t * d + di];
                let a_row = &a.data[di * n..(di + 1) * n];
                for ni in 0..n {
                    let abar = (dt * a_row[ni]).exp();
                    let bbar = (abar - R::ONE) / a_row[ni] * bt[ni];
                    h[di * n + ni] = abar * h[di * n + ni] + bbar * xv;
                }
            }
            h_all[t * d * n..(t + 1) * d * n].copy_from_slice(&h);
        }
    }

    let mut dx = Tensor::zeros(&x.shape);
    let mut db = Tensor::zeros(&b.shape);
    let mut dc = Tensor::zeros(&c.shape);
    let mut ddelta = Tensor::zeros(&delta.shape);
    let mut da = Tensor::zeros(&a.shape);
    let mut dskip = Tensor::zeros(&d_skip.shape);

    // dL/dh carried from step t+1 down to t.
    let mut dh_carry = vec![R::ZERO; d * n];
    for t in (0..t_len).rev() {
        let bt = &b.data[t * n..(t + 1) * n];
        let ct = &c.data[t * n..(t + 1) * n];
        for di in 0..d {
            let dt = delta.data[t * d + di];
            let xv = x.data[t * d + di];
            let g = gy.data[t * d + di];
            let a_row = &a.data[di * n..(di + 1) * n];
            let mut ddt = R::ZERO;
            let mut dxv = g * d_skip.data[di];
            dskip.data[di] += g * xv;
            for ni in 0..n {
                let an = a_row[ni];
                let abar = (dt * an).exp();
                let bbar_unit = (abar - R::ONE) / an;
                let h_t = h_all[(t * d + di) * n + ni];
                let h_prev =
                    if t > 0 { h_all[((t - 1) * d + di) * n + ni] } else { R::ZERO };
                let dh = g * ct[ni] + dh_carry[di * n + ni];
                dc.data[t * n + ni] += g * h_t;
                let dabar = dh * h_prev;
                let dbbar = dh * xv;
                db.data[t * n + ni] += dbbar * bbar_unit;
                let dbbar_unit = dbbar * bt[ni];
                // d(abar)/d(dt) = a*abar ; d(bbar_unit)/d(dt) = abar
                ddt += dabar * an * abar + dbbar_unit * abar;
                // d(abar)/da = dt*abar ; d(bbar_unit)/da = (dt*abar*a - (abar-1))/a^2
                da.data[di * n + ni] += dabar * dt * abar
                    + dbbar_unit * (dt * abar * an - (abar - R::ONE)) / (an * an);
                dxv += dh * bbar_unit * bt[ni];
                dh_carry[di * n + ni] = dh * abar;
            }
            dx.data[t * d + di] += dxv;
            ddelta.data[t * d + di] = ddt;
        }
    }
    (dx, db, dc, ddelta, da, dskip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let data = (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::from_vec(shape, data)
    }

    /// Central finite difference of the loss with respect to every element of
    /// `leaf`, compared against the backward-pass gradient.
    fn assert_grad_matches_fd(
        tape: &mut Tape<f64>,
        loss: Var,
        leaf: Var,
        eps: f64,
        tol: f64,
        label: &str,
    ) {
        let analytic = tape.backward(loss).dense(leaf, &tape.value(leaf).shape.clone());
        let base = tape.value(leaf).clone();
        for i in 0..base.numel() {
            let mut plus = base.clone();
            plus.data[i] += eps;
            tape.set_leaf(leaf, plus);
            tape.recompute();
            let lp = tape.value(loss).data[0];

            let mut minus = base.clone();
            minus.data[i] -= eps;
            tape.set_leaf(leaf, minus);
            tape.recompute();
            let lm = tape.value(loss).data[0];

            tape.set_leaf(leaf, base.clone());
            tape.recompute();

            let fd = (lp - lm) / (2.0 * eps);
            let a = analytic.data[i];
            let denom = a.abs().max(fd.abs()).max(1e-8);
            assert!(
                (a - fd).abs() / denom < tol,
                "{label}[{i}]: analytic {a:.6e} vs fd {fd:.6e}"
            );
        }
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::<f64>::new();
        let a = tape.param(rand_tensor(&mut rng, &[3, 4], -1.0, 1.0));
        let b = tape.param(rand_tensor(&mut rng, &[4, 2], -1.0, 1.0));
        let y = tape.matmul(a, b);
        let w = rand_tensor(&mut rng, &[3, 2], -1.0, 1.0);
        let loss = tape.reduce_dot(y, w);
        assert_grad_matches_fd(&mut tape, loss, a, 1e-5, 1e-6, "matmul a");
        assert_grad_matches_fd(&mut tape, loss, b, 1e-5, 1e-6, "matmul b");
    }

    #[test]
    fn elementwise_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in [Activation::Identity, Activation::Relu, Activation::Silu, Activation::Gelu] {
            let mut tape = Tape::<f64>::new();
            // Keep relu inputs away from the kink.
            let x = tape.param(rand_tensor(&mut rng, &[2, 5], 0.1, 1.5));
            let y = tape.activation(x, kind);
            let w = rand_tensor(&mut rng, &[2, 5], -1.0, 1.0);
            let loss = tape.reduce_dot(y, w);
            assert_grad_matches_fd(&mut tape, loss, x, 1e-5, 1e-5, "activation");
        }
        let mut tape = Tape::<f64>::new();
        let x = tape.param(rand_tensor(&mut rng, &[2, 5], -3.0, 3.0));
        let sp = tape.softplus(x);
        let ne = tape.neg_exp(sp);
        let w = rand_tensor(&mut rng, &[2, 5], -1.0, 1.0);
        let loss = tape.reduce_dot(ne, w);
        assert_grad_matches_fd(&mut tape, loss, x, 1e-6, 1e-6, "softplus+neg_exp");
    }

    #[test]
    fn hadamard_product_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut tape = Tape::<f64>::new();
        let a = tape.param(rand_tensor(&mut rng, &[3, 4], -2.0, 2.0));
        let b = tape.param(rand_tensor(&mut rng, &[3, 4], -2.0, 2.0));
        let y = tape.mul(a, b);
        let w = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let loss = tape.reduce_dot(y, w);
        assert_grad_matches_fd(&mut tape, loss, a, 1e-6, 1e-8, "mul a");
        assert_grad_matches_fd(&mut tape, loss, b, 1e-6, 1e-8, "mul b");

        // Squared-norm identity: d(sum x*x)/dx = 2x exactly.
        let mut tape = Tape::<f64>::new();
        let x = tape.param(rand_tensor(&mut rng, &[1, 6], -1.0, 1.0));
        let sq = tape.mul(x, x);
        let ones = Tensor::from_vec(&[1, 6], vec![1.0; 6]);
        let loss = tape.reduce_dot(sq, ones);
        let grads = tape.backward(loss);
        let got = grads.get(x).unwrap();
        for (g, v) in got.data.iter().zip(&tape.value(x).data) {
            assert_eq!(*g, 2.0 * *v);
        }
    }

    #[test]
    fn layer_norm_normalizes_and_differentiates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::<f64>::new();
        let x = tape.param(rand_tensor(&mut rng, &[4, 8], -2.0, 2.0));
        let gain = tape.param(rand_tensor(&mut rng, &[8], 0.5, 1.5));
        let bias = tape.param(rand_tensor(&mut rng, &[8], -0.5, 0.5));
        let y = tape.layer_norm(x, gain, bias);

        // With unit gain/zero bias the rows would be standardized; with an
        // affine output, undo it and check.
        let yv = tape.value(y).clone();
        let gv = tape.value(gain).clone();
        let bv = tape.value(bias).clone();
        for r in 0..4 {
            let mut mean = 0.0;
            for j in 0..8 {
                mean += (yv.data[r * 8 + j] - bv.data[j]) / gv.data[j];
            }
            assert!((mean / 8.0).abs() < 1e-12);
        }

        let w = rand_tensor(&mut rng, &[4, 8], -1.0, 1.0);
        let loss = tape.reduce_dot(y, w);
        assert_grad_matches_fd(&mut tape, loss, x, 1e-6, 1e-5, "ln x");
        assert_grad_matches_fd(&mut tape, loss, gain, 1e-6, 1e-5, "ln gain");
        assert_grad_matches_fd(&mut tape, loss, bias, 1e-6, 1e-5, "ln bias");
    }

    #[test]
    fn conv_and_patches_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::<f64>::new();
        let x = tape.param(rand_tensor(&mut rng, &[2, 6, 6], -1.0, 1.0));
        let k = tape.param(rand_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5));
        let bias = tape.param(rand_tensor(&mut rng, &[3], -0.1, 0.1));
        let y = tape.conv3x3(x, k, bias);
        let p = tape.patches(y, 3);
        let w = rand_tensor(&mut rng, &[4, 3 * 9], -1.0, 1.0);
        let loss = tape.reduce_dot(p, w);
        assert_grad_matches_fd(&mut tape, loss, x, 1e-5, 1e-6, "conv x");
        assert_grad_matches_fd(&mut tape, loss, k, 1e-5, 1e-6, "conv k");
        assert_grad_matches_fd(&mut tape, loss, bias, 1e-5, 1e-6, "conv bias");
    }

    #[test]
    fn conv_matches_direct_stencil_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::<f64>::new();
        let xs = rand_tensor(&mut rng, &[2, 5, 4], -1.0, 1.0);
        let ks = rand_tensor(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
        let bs = Tensor::from_vec(&[1], vec![0.25]);
        let x = tape.leaf(xs.clone());
        let k = tape.leaf(ks.clone());
        let bias = tape.leaf(bs.clone());
        let y = tape.conv3x3(x, k, bias);
        // Independent direct evaluation with explicit zero padding.
        let pad = |ci: usize, iy: isize, ix: isize| -> f64 {
            if iy < 0 || ix < 0 || iy >= 5 || ix >= 4 {
                0.0
            } else {
                xs.data[(ci * 5 + iy as usize) * 4 + ix as usize]
            }
        };
        for yy in 0..5isize {
            for xx in 0..4isize {
                let mut acc = 0.25;
                for ci in 0..2 {
                    for ky in 0..3isize {
                        for kx in 0..3isize {
                            acc += ks.data[((ci) * 3 + ky as usize) * 3 + kx as usize]
                                * pad(ci, yy + ky - 1, xx + kx - 1);
                        }
                    }
                }
                let got = tape.value(y).data[(yy * 4 + xx) as usize];
                assert!((got - acc).abs() < 1e-12, "conv mismatch at ({yy},{xx})");
            }
        }
    }

    #[test]
    fn selective_scan_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (t, d, n) = (5, 3, 4);
        let mut tape = Tape::<f64>::new();
        let x = tape.param(rand_tensor(&mut rng, &[t, d], -1.0, 1.0));
        let b = tape.param(rand_tensor(&mut rng, &[t, n], -1.0, 1.0));
        let c = tape.param(rand_tensor(&mut rng, &[t, n], -1.0, 1.0));
        let delta = tape.param(rand_tensor(&mut rng, &[t, d], 0.05, 0.8));
        let a = tape.param(rand_tensor(&mut rng, &[d, n], -3.0, -0.2));
        let skip = tape.param(rand_tensor(&mut rng, &[d], -1.0, 1.0));
        let y = tape.selective_scan(x, b, c, delta, a, skip);
        let w = rand_tensor(&mut rng, &[t, d], -1.0, 1.0);
        let loss = tape.reduce_dot(y, w);
        for (leaf, label) in [
            (x, "scan x"),
            (b, "scan b"),
            (c, "scan c"),
            (delta, "scan delta"),
            (a, "scan a"),
            (skip, "scan skip"),
        ] {
            assert_grad_matches_fd(&mut tape, loss, leaf, 1e-6, 1e-5, label);
        }
    }

    #[test]
    fn selective_scan_is_causal_in_the_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (t, d, n) = (6, 2, 3);
        let mut tape = Tape::<f64>::new();
        let x = tape.param(rand_tensor(&mut rng, &[t, d], -1.0, 1.0));
        let b = tape.leaf(rand_tensor(&mut rng, &[t, n], -1.0, 1.0));
        let c = tape.leaf(rand_tensor(&mut rng, &[t, n], -1.0, 1.0));
        let delta = tape.leaf(rand_tensor(&mut rng, &[t, d], 0.1, 0.5));
        let a = tape.leaf(rand_tensor(&mut rng, &[d, n], -2.0, -0.3));
        let skip = tape.leaf(rand_tensor(&mut rng, &[d], -1.0, 1.0));
        let y = tape.selective_scan(x, b, c, delta, a, skip);
        // Loss reads only y at time t0: inputs after t0 must get exactly zero.
        let t0 = 2;
        let mut w = Tensor::zeros(&[t, d]);
        for di in 0..d {
            w.data[t0 * d + di] = 1.0;
        }
        let loss = tape.reduce_dot(y, w);
        let gx = tape.backward(loss).dense(x, &[t, d]);
        for tt in t0 + 1..t {
            for di in 0..d {
                assert_eq!(gx.data[tt * d + di], 0.0, "future input leaked into y[{t0}]");
            }
        }
    }

    #[test]
    fn cross_entropy_matches_direct_evaluation_and_is_smoothed() {
        let logits = vec![1.5, -0.3, 0.8, 0.0];
        let mut tape = Tape::<f64>::new();
        let l = tape.param(Tensor::from_vec(&[4], logits.clone()));
        let loss = tape.cross_entropy(l, 2, 0.1);
        // Direct: q = 0.025 everywhere + 0.9 on target.
        let m = 1.5f64;
        let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let mut expect = 0.0;
        for (j, &v) in logits.iter().enumerate() {
            let q = if j == 2 { 0.025 + 0.9 } else { 0.025 };
            expect += q * (lse - v);
        }
        assert!((tape.value(loss).data[0] - expect).abs() < 1e-12);

        let g = tape.backward(loss).dense(l, &[4]);
        // Softmax minus target distribution sums to zero.
        assert!(g.data.iter().sum::<f64>().abs() < 1e-12);
        assert_grad_matches_fd(&mut tape, loss, l, 1e-6, 1e-6, "ce logits");
    }

    #[test]
    fn shared_inputs_accumulate_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.add(x, x);
        let loss = tape.reduce_dot(y, Tensor::scalar(1.0));
        let g = tape.backward(loss).dense(x, &[1]);
        assert_eq!(g.data[0], 2.0);
    }

    #[test]
    fn unused_parameters_get_exactly_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let used = tape.param(Tensor::scalar(1.0));
        let unused = tape.param(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]));
        let loss = tape.reduce_dot(used, Tensor::scalar(2.0));
        let grads = tape.backward(loss);
        assert!(grads.get(unused).is_none());
        assert!(grads.dense(unused, &[3]).data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn replay_reproduces_forward_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::<f32>::from_vec(
            &[4, 6],
            (0..24).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        ));
        let w = tape.param(Tensor::<f32>::from_vec(
            &[6, 5],
            (0..30).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        ));
        let gain = tape.param(Tensor::<f32>::from_vec(&[5], vec![1.0; 5]));
        let bias = tape.param(Tensor::<f32>::from_vec(&[5], vec![0.0; 5]));
        let mm = tape.matmul(x, w);
        let ln = tape.layer_norm(mm, gain, bias);
        let act = tape.activation(ln, Activation::Gelu);
        let row = tape.select_row(act, 0);
        let _loss = tape.reduce_dot(row, Tensor::from_vec(&[1, 5], vec![0.5; 5]));
        assert!(tape.replay_matches());
    }

    #[test]
    fn concat_and_select_route_gradients_to_the_right_rows() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.param(Tensor::from_vec(&[1, 3], vec![7.0, 8.0, 9.0]));
        let cat = tape.concat_rows(&[a, b]);
        assert_eq!(tape.value(cat).shape, vec![3, 3]);
        let last = tape.select_row(cat, 2);
        let loss = tape.reduce_dot(last, Tensor::from_vec(&[1, 3], vec![1.0, 1.0, 1.0]));
        let grads = tape.backward(loss);
        // a's rows do not feed the selected row: exactly zero gradient.
        assert!(grads.dense(a, &[2, 3]).data.iter().all(|&g| g == 0.0));
        assert_eq!(grads.dense(b, &[1, 3]).data, vec![1.0, 1.0, 1.0]);
    }
}

//! Tape-based computation graph.
//!
//! Nodes are appended in execution order, so the node vector is already a
//! topological order and the backward pass is a single reverse sweep.
//! A graph is single-threaded; independent graphs may run on separate threads.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvDims};
use super::{shape_err, ParamId, Result, Tensor, TensorError, MAX_RANK};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Stride and padding for [`Graph::conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamId>),
    Constant,
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, shared_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f32 },
    Gelu(Var),
    Swish(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Softmax(Var),
    LogSoftmax(Var),
    DwConv { x: Var, kernel: Var, valid: Arc<Vec<bool>>, offset: usize },
    Conv2d { x: Var, w: Var, b: Var, dims: ConvDims },
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { a: Var, mask: Vec<f32> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Permute { a: Var, perm: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    PickSum { a: Var, idx: Vec<usize>, scale: f32 },
    Precomputed { a: Var, grad: Vec<f32> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf(_) | Op::Constant => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Scale { a, .. }
            | Op::Gelu(a)
            | Op::Swish(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Dropout { a, .. }
            | Op::Slice { a, .. }
            | Op::Permute { a, .. }
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::PickSum { a, .. }
            | Op::Precomputed { a, .. } => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::DwConv { x, kernel, .. } => vec![*x, *kernel],
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Embedding { table, .. } => vec![*table],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Constant => "constant",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Gelu(_) => "gelu",
            Op::Swish(_) => "swish",
            Op::Sigmoid(_) => "sigmoid",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::DwConv { .. } => "depthwise_conv1d",
            Op::Conv2d { .. } => "conv2d",
            Op::Embedding { .. } => "embedding",
            Op::Dropout { .. } => "dropout",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Permute { .. } => "permute",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::PickSum { .. } => "pick_sum",
            Op::Precomputed { .. } => "precomputed",
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f32>>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    training: bool,
    rng: ChaCha8Rng,
    param_leaves: HashMap<ParamId, Var>,
    nonfinite: Option<&'static str>,
}

const SQRT_2_OVER_PI: f32 = 0.797_884_6;

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn add_into(dst: &mut Option<Vec<f32>>, src: &[f32]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

/// True when `small` equals a trailing run of `big`.
fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl Graph {
    /// A graph in eval mode (dropout disabled).
    pub fn new() -> Self {
        Self::with_mode(false, 0)
    }

    /// A graph in training mode; dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Self::with_mode(true, seed)
    }

    fn with_mode(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            param_leaves: HashMap::new(),
            nonfinite: None,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if self.nonfinite.is_none() && value.iter().any(|v| !v.is_finite()) {
            self.nonfinite = Some(op.name());
        }
        let needs_grad = match &op {
            Op::Leaf(Some(_)) => true,
            Op::Leaf(None) | Op::Constant => false,
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Fails if any op so far produced a NaN or infinity.
    pub fn ensure_finite(&self) -> Result<()> {
        match self.nonfinite {
            Some(op) => Err(TensorError::NonFinite(op)),
            None => Ok(()),
        }
    }

    // ---- leaves ----

    /// Registers a tensor as a leaf. It receives a gradient iff `requires_grad` is set.
    pub fn input(&mut self, t: &Tensor) -> Var {
        let id = self.nodes.len();
        let op = Op::Leaf(None);
        if self.nonfinite.is_none() && !t.all_finite() {
            self.nonfinite = Some("input");
        }
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data_arc().clone(),
            op,
            needs_grad: t.requires_grad(),
        });
        self.grads.push(None);
        Var(id)
    }

    /// Leaf bound to a trainable parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId, t: &Tensor) -> Var {
        if let Some(v) = self.param_leaves.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data_arc().clone(),
            op: Op::Leaf(Some(id)),
            needs_grad: true,
        });
        self.grads.push(None);
        let v = Var(self.nodes.len() - 1);
        self.param_leaves.insert(id, v);
        v
    }

    /// Make later `param(id, _)` calls return `v`. Gradient checks use this to
    /// route a stored parameter through a perturbable input leaf.
    pub fn bind_param(&mut self, id: ParamId, v: Var) {
        self.param_leaves.insert(id, v);
    }

    /// Leaf bound to a parameter but excluded from gradient computation.
    pub fn frozen(&mut self, t: &Tensor) -> Var {
        self.constant_arc(t.shape().to_vec(), t.data_arc().clone())
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() || shape.len() > MAX_RANK {
            return Err(shape_err("constant", format!("{shape:?} vs {} values", data.len())));
        }
        Ok(self.push(shape.to_vec(), data, Op::Constant))
    }

    pub(crate) fn constant_arc(&mut self, shape: Vec<usize>, data: Arc<Vec<f32>>) -> Var {
        self.nodes.push(Node {
            shape,
            value: data,
            op: Op::Constant,
            needs_grad: false,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    // ---- accessors ----

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_arc(n.shape.clone(), n.value.clone())
    }

    pub fn scalar_value(&self, v: Var) -> f32 {
        self.nodes[v.0].value[0]
    }

    /// Gradient accumulated at `v` by all backward calls so far.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients of every parameter leaf.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f32])> {
        let mut out: Vec<(ParamId, &[f32])> = self
            .param_leaves
            .iter()
            .filter_map(|(pid, v)| self.grads[v.0].as_deref().map(|g| (*pid, g)))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }

    // ---- linear algebra ----

    /// `a[.., M, K] · b[.., K, N]`; `b` may also be a shared rank-2 `[K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", format!("rank < 2: {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dims {sa:?} x {sb:?}")));
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let shared_b = batch_b.is_empty();
        if !shared_b && batch_a != batch_b {
            return Err(shape_err("matmul", format!("batch dims {sa:?} x {sb:?}")));
        }
        let batch: usize = batch_a.iter().product();
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let out = if shared_b {
            kernels::matmul_nn(&av, &bv, batch * m, k, n)
        } else {
            let mut out = Vec::with_capacity(batch * m * n);
            for bi in 0..batch {
                out.extend(kernels::matmul_nn(
                    &av[bi * m * k..(bi + 1) * m * k],
                    &bv[bi * k * n..(bi + 1) * k * n],
                    m,
                    k,
                    n,
                ));
            }
            out
        };
        let mut shape = batch_a.to_vec();
        shape.extend([m, n]);
        Ok(self.push(shape, out, Op::MatMul { a, b, batch, m, k, n, shared_b }))
    }

    /// `x · w + bias` for `x[.., K]`, `w[K, N]`, `bias[N]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().unwrap_or(&0);
        let rows = shape.iter().product::<usize>() / k.max(1);
        let x2 = self.reshape(x, &[rows, k])?;
        let y = self.matmul(x2, w)?;
        let y = match bias {
            Some(b) => self.add(y, b)?,
            None => y,
        };
        let n = self.shape(y)[1];
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = n;
        self.reshape(y, &out_shape)
    }

    // ---- elementwise ----

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if !is_suffix(sa, sb) {
            return Err(shape_err(op, format!("{sa:?} cannot broadcast {sb:?}")));
        }
        Ok(self.nodes[b.0].value.len())
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.broadcast_check("add", a, b)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let out: Vec<f32> = av.iter().enumerate().map(|(i, x)| x + bv[i % nb]).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// `a ⊙ b` where `b`'s shape is a suffix of `a`'s.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.broadcast_check("mul", a, b)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let out: Vec<f32> = av.iter().enumerate().map(|(i, x)| x * bv[i % nb]).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let out = self.nodes[a.0].value.iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale { a, s })
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let out = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    /// `x · sigmoid(x)`
    pub fn swish(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Swish(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Layer normalization over the last axis. Statistics accumulate in f64.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", format!("x {shape:?}, gain/bias must be [{d}]")));
        }
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gain.0].value;
        let bv = &self.nodes[bias.0].value;
        let rows = xv.len() / d;
        let mut xhat = vec![0.0f32; xv.len()];
        let mut rstd = vec![0.0f32; rows];
        let mut out = vec![0.0f32; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for j in 0..d {
                let h = ((row[j] as f64 - mean) * rs) as f32;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        Ok(self.push(shape, out, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    fn softmax_rows(&self, a: Var, log: bool) -> (Vec<usize>, Vec<f32>) {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap_or(&1);
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0f32; av.len()];
        for (row, o) in av.chunks(d).zip(out.chunks_mut(d)) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let sum: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
            if log {
                let lse = max as f64 + sum.ln();
                for (ov, &v) in o.iter_mut().zip(row) {
                    *ov = (v as f64 - lse) as f32;
                }
            } else {
                for (ov, &v) in o.iter_mut().zip(row) {
                    *ov = (((v - max) as f64).exp() / sum) as f32;
                }
            }
        }
        (shape, out)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (shape, out) = self.softmax_rows(a, false);
        self.push(shape, out, Op::Softmax(a))
    }

    /// Log-softmax over the last axis (max-subtracted, f64 log-sum-exp).
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (shape, out) = self.softmax_rows(a, true);
        self.push(shape, out, Op::LogSoftmax(a))
    }

    /// Masked depthwise 1-D convolution over time.
    ///
    /// `x` is `[T_in, D]`, `kernel` is `[K, D]` with `K` odd, and `valid` is a
    /// row-major `[T_out, K]` tap mask. Output row `t` reads input row
    /// `t + offset + k - K/2` for every valid tap `k`; invalid taps contribute
    /// nothing and receive no gradient.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var, valid: Arc<Vec<bool>>, t_out: usize, offset: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 2 || sk.len() != 2 || sx[1] != sk[1] {
            return Err(shape_err("depthwise_conv1d", format!("x {sx:?}, kernel {sk:?}")));
        }
        let (t_in, d) = (sx[0], sx[1]);
        let k = sk[0];
        if k.is_multiple_of(2) {
            return Err(TensorError::Config(format!("depthwise kernel size must be odd, got {k}")));
        }
        if valid.len() != t_out * k {
            return Err(shape_err("depthwise_conv1d", format!("mask has {} entries, want {t_out}x{k}", valid.len())));
        }
        let half = k / 2;
        let xv = &self.nodes[x.0].value;
        let kv = &self.nodes[kernel.0].value;
        let mut out = vec![0.0f32; t_out * d];
        for t in 0..t_out {
            for tap in 0..k {
                if !valid[t * k + tap] {
                    continue;
                }
                let src = t + offset + tap;
                if src < half || src - half >= t_in {
                    return Err(shape_err("depthwise_conv1d", format!("valid tap {tap} at row {t} reads outside input")));
                }
                let src = src - half;
                let o = &mut out[t * d..(t + 1) * d];
                let xr = &xv[src * d..(src + 1) * d];
                let kr = &kv[tap * d..(tap + 1) * d];
                for j in 0..d {
                    o[j] += kr[j] * xr[j];
                }
            }
        }
        Ok(self.push(vec![t_out, d], out, Op::DwConv { x, kernel, valid, offset }))
    }

    /// 2-D convolution: `x[Cin, H, W]`, `w[Cout, Cin, KH, KW]`, `b[Cout]` → `[Cout, OH, OW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: Conv2dGeom) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[1] || self.shape(b) != [sw[0]] {
            return Err(shape_err("conv2d", format!("x {sx:?}, w {sw:?}")));
        }
        let (sh, sww) = geom.stride;
        let (ph, pw) = geom.pad;
        if sh == 0 || sww == 0 || sx[1] + 2 * ph < sw[2] || sx[2] + 2 * pw < sw[3] {
            return Err(shape_err("conv2d", format!("input {sx:?} smaller than kernel {sw:?}")));
        }
        let dims = ConvDims {
            cin: sx[0],
            h: sx[1],
            w: sx[2],
            cout: sw[0],
            kh: sw[2],
            kw: sw[3],
            sh,
            sw: sww,
            ph,
            pw,
            oh: (sx[1] + 2 * ph - sw[2]) / sh + 1,
            ow: (sx[2] + 2 * pw - sw[3]) / sww + 1,
        };
        let out = kernels::conv2d_forward(&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value, &dims);
        Ok(self.push(vec![dims.cout, dims.oh, dims.ow], out, Op::Conv2d { x, w, b, dims }))
    }

    /// Rows of `table[V, D]` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || ids.iter().any(|&i| i >= st[0]) {
            return Err(shape_err("embedding", format!("table {st:?}, ids out of range")));
        }
        let d = st[1];
        let tv = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.push(vec![ids.len(), d], out, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f32) -> Var {
        if !self.training || p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let n = self.nodes[a.0].value.len();
        let mask: Vec<f32> = (0..n)
            .map(|_| if self.rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = self.nodes[a.0].value.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Dropout { a, mask })
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.nodes[a.0].value.len() || shape.len() > MAX_RANK {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        if self.shape(a) == shape {
            return Ok(a);
        }
        let value = self.nodes[a.0].value.clone();
        let needs_grad = self.nodes[a.0].needs_grad;
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value,
            op: Op::Reshape(a),
            needs_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{perm:?} for {shape:?}")));
        }
        let out = kernels::permute(&self.nodes[a.0].value, &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        Ok(self.push(out_shape, out, Op::Permute { a, perm: perm.to_vec() }))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(shape_err("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(shape_err("concat", format!("{first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.nodes[p.0].value[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(shape, out, Op::Concat { parts: parts.to_vec(), axis }))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err("slice", format!("{start}+{len} on axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let av = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&av[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(out_shape, out, Op::Slice { a, axis, start }))
    }

    // ---- reductions and losses ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.iter().map(|&v| v as f64).sum();
        self.push(vec![1], vec![s as f32], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len().max(1);
        let s: f64 = self.nodes[a.0].value.iter().map(|&v| v as f64).sum();
        self.push(vec![1], vec![(s / n as f64) as f32], Op::Mean(a))
    }

    /// `scale · Σ a[i]` over flat indices `idx`.
    pub fn pick_sum(&mut self, a: Var, idx: &[usize], scale: f32) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if idx.iter().any(|&i| i >= av.len()) {
            return Err(shape_err("pick_sum", "index out of range"));
        }
        let s: f64 = idx.iter().map(|&i| av[i] as f64).sum();
        Ok(self.push(vec![1], vec![(s * scale as f64) as f32], Op::PickSum { a, idx: idx.to_vec(), scale }))
    }

    /// Scalar node with value `value` whose gradient w.r.t. `a` is the fixed vector `grad`.
    ///
    /// Used for losses whose forward pass already yields the exact gradient
    /// (e.g. CTC via forward-backward).
    pub fn scalar_with_grad(&mut self, a: Var, value: f32, grad: Vec<f32>) -> Result<Var> {
        if grad.len() != self.nodes[a.0].value.len() {
            return Err(shape_err("scalar_with_grad", "gradient length mismatch"));
        }
        Ok(self.push(vec![1], vec![value], Op::Precomputed { a, grad }))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar `loss`. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut tmp: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        tmp[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = tmp[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, &g, &mut tmp);
            add_into(&mut self.grads[i], &g);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f32], tmp: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let needs = |v: &Var| self.nodes[v.0].needs_grad;
        let val = |v: &Var| -> &[f32] { &self.nodes[v.0].value };
        match &node.op {
            Op::Leaf(_) | Op::Constant => {}
            Op::MatMul { a, b, batch, m, k, n, shared_b } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (val(a), val(b));
                if needs(a) {
                    let mut ga = Vec::with_capacity(batch * m * k);
                    for bi in 0..*batch {
                        let bb = if *shared_b { bv } else { &bv[bi * k * n..(bi + 1) * k * n] };
                        ga.extend(kernels::matmul_nt(&g[bi * m * n..(bi + 1) * m * n], bb, m, n, k));
                    }
                    add_into(&mut tmp[a.0], &ga);
                }
                if needs(b) {
                    if *shared_b {
                        let gb = kernels::matmul_tn(av, g, batch * m, k, n);
                        add_into(&mut tmp[b.0], &gb);
                    } else {
                        let mut gb = Vec::with_capacity(batch * k * n);
                        for bi in 0..*batch {
                            gb.extend(kernels::matmul_tn(
                                &av[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                m,
                                k,
                                n,
                            ));
                        }
                        add_into(&mut tmp[b.0], &gb);
                    }
                }
            }
            Op::Add { a, b } => {
                if needs(a) {
                    add_into(&mut tmp[a.0], g);
                }
                if needs(b) {
                    let nb = val(b).len();
                    let mut gb = vec![0.0f32; nb];
                    for (j, gv) in g.iter().enumerate() {
                        gb[j % nb] += gv;
                    }
                    add_into(&mut tmp[b.0], &gb);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(a), val(b));
                let nb = bv.len();
                if needs(a) {
                    let ga: Vec<f32> = g.iter().enumerate().map(|(j, gv)| gv * bv[j % nb]).collect();
                    add_into(&mut tmp[a.0], &ga);
                }
                if needs(b) {
                    let mut gb = vec![0.0f32; nb];
                    for (j, gv) in g.iter().enumerate() {
                        gb[j % nb] += gv * av[j];
                    }
                    add_into(&mut tmp[b.0], &gb);
                }
            }
            Op::Scale { a, s } => {
                let ga: Vec<f32> = g.iter().map(|v| v * s).collect();
                add_into(&mut tmp[a.0], &ga);
            }
            Op::Gelu(a) => {
                let ga: Vec<f32> = g.iter().zip(val(a)).map(|(gv, &x)| gv * gelu_grad(x)).collect();
                add_into(&mut tmp[a.0], &ga);
            }
            Op::Swish(a) => {
                let ga: Vec<f32> = g
                    .iter()
                    .zip(val(a))
                    .map(|(gv, &x)| {
                        let s = sigmoid(x);
                        gv * (s + x * s * (1.0 - s))
                    })
                    .collect();
                add_into(&mut tmp[a.0], &ga);
            }
            Op::Sigmoid(a) => {
                let ga: Vec<f32> = g.iter().zip(node.value.iter()).map(|(gv, &y)| gv * y * (1.0 - y)).collect();
                add_into(&mut tmp[a.0], &ga);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = *node.shape.last().expect("rank >= 1");
                let gv = val(gain);
                if needs(gain) {
                    let mut gg = vec![0.0f32; d];
                    for (j, (go, h)) in g.iter().zip(xhat).enumerate() {
                        gg[j % d] += go * h;
                    }
                    add_into(&mut tmp[gain.0], &gg);
                }
                if needs(bias) {
                    let mut gb = vec![0.0f32; d];
                    for (j, go) in g.iter().enumerate() {
                        gb[j % d] += go;
                    }
                    add_into(&mut tmp[bias.0], &gb);
                }
                if needs(x) {
                    let mut gx = vec![0.0f32; g.len()];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for j in 0..d {
                            let dh = (gr[j] * gv[j]) as f64;
                            m1 += dh;
                            m2 += dh * hr[j] as f64;
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dh = (gr[j] * gv[j]) as f64;
                            gx[r * d + j] = (*rs as f64 * (dh - m1 - hr[j] as f64 * m2)) as f32;
                        }
                    }
                    add_into(&mut tmp[x.0], &gx);
                }
            }
            Op::Softmax(a) => {
                let d = *node.shape.last().expect("rank >= 1");
                let mut ga = vec![0.0f32; g.len()];
                for ((gr, yr), out) in g.chunks(d).zip(node.value.chunks(d)).zip(ga.chunks_mut(d)) {
                    let dotp: f64 = gr.iter().zip(yr).map(|(a, b)| (a * b) as f64).sum();
                    for j in 0..d {
                        out[j] = yr[j] * (gr[j] - dotp as f32);
                    }
                }
                add_into(&mut tmp[a.0], &ga);
            }
            Op::LogSoftmax(a) => {
                let d = *node.shape.last().expect("rank >= 1");
                let mut ga = vec![0.0f32; g.len()];
                for ((gr, yr), out) in g.chunks(d).zip(node.value.chunks(d)).zip(ga.chunks_mut(d)) {
                    let s: f64 = gr.iter().map(|&v| v as f64).sum();
                    for j in 0..d {
                        out[j] = gr[j] - (yr[j].exp() as f64 * s) as f32;
                    }
                }
                add_into(&mut tmp[a.0], &ga);
            }
            Op::DwConv { x, kernel, valid, offset } => {
                let sx = &self.nodes[x.0].shape;
                let k = self.nodes[kernel.0].shape[0];
                let (t_in, d) = (sx[0], sx[1]);
                let half = k / 2;
                let t_out = node.shape[0];
                let (xv, kv) = (val(x), val(kernel));
                let mut gx = vec![0.0f32; t_in * d];
                let mut gk = vec![0.0f32; k * d];
                for t in 0..t_out {
                    let go = &g[t * d..(t + 1) * d];
                    for tap in 0..k {
                        if !valid[t * k + tap] {
                            continue;
                        }
                        let src = t + offset + tap - half;
                        for j in 0..d {
                            gx[src * d + j] += kv[tap * d + j] * go[j];
                            gk[tap * d + j] += xv[src * d + j] * go[j];
                        }
                    }
                }
                if needs(x) {
                    add_into(&mut tmp[x.0], &gx);
                }
                if needs(kernel) {
                    add_into(&mut tmp[kernel.0], &gk);
                }
            }
            Op::Conv2d { x, w, b, dims } => {
                let (gx, gw, gb) = kernels::conv2d_backward(val(x), val(w), g, dims);
                if needs(x) {
                    add_into(&mut tmp[x.0], &gx);
                }
                if needs(w) {
                    add_into(&mut tmp[w.0], &gw);
                }
                if needs(b) {
                    add_into(&mut tmp[b.0], &gb);
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.shape[1];
                let mut gt = vec![0.0f32; val(table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
                add_into(&mut tmp[table.0], &gt);
            }
            Op::Dropout { a, mask } => {
                let ga: Vec<f32> = g.iter().zip(mask).map(|(x, m)| x * m).collect();
                add_into(&mut tmp[a.0], &ga);
            }
            Op::Concat { parts, axis } => {
                let shape = &node.shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].shape[*axis] * inner;
                    if needs(p) {
                        let mut gp = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            gp.extend_from_slice(&g[o * row + off..o * row + off + len]);
                        }
                        add_into(&mut tmp[p.0], &gp);
                    }
                    off += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let in_shape = &self.nodes[a.0].shape;
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let len = node.shape[*axis];
                let mut ga = vec![0.0f32; val(a).len()];
                for o in 0..outer {
                    let base = (o * in_shape[*axis] + start) * inner;
                    ga[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                add_into(&mut tmp[a.0], &ga);
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let ga = kernels::permute(g, &node.shape, &inv);
                add_into(&mut tmp[a.0], &ga);
            }
            Op::Reshape(a) => add_into(&mut tmp[a.0], g),
            Op::Sum(a) => {
                let ga = vec![g[0]; val(a).len()];
                add_into(&mut tmp[a.0], &ga);
            }
            Op::Mean(a) => {
                let n = val(a).len().max(1);
                let ga = vec![g[0] / n as f32; val(a).len()];
                add_into(&mut tmp[a.0], &ga);
            }
            Op::PickSum { a, idx, scale } => {
                let mut ga = vec![0.0f32; val(a).len()];
                for &j in idx {
                    ga[j] += g[0] * scale;
                }
                add_into(&mut tmp[a.0], &ga);
            }
            Op::Precomputed { a, grad } => {
                let ga: Vec<f32> = grad.iter().map(|v| v * g[0]).collect();
                add_into(&mut tmp[a.0], &ga);
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.input(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.input(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.matmul(i, m).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0]);
        let a = g.input(&t(&[1, 2], &[1.0, 2.0]));
        let b = g.input(&t(&[2, 1], &[3.0, 4.0]));
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.input(&Tensor::zeros(&[2, 3]));
        let b = g.input(&Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn matmul_grad_is_ones_times_bt() {
        let a = t(&[3, 4], &(0..12).map(|v| (v as f32 * 0.37).sin()).collect::<Vec<_>>()).with_requires_grad(true);
        let b = t(&[4, 2], &(0..8).map(|v| (v as f32 * 0.71).cos()).collect::<Vec<_>>());
        let mut g = Graph::new();
        let av = g.input(&a);
        let bv = g.input(&b);
        let y = g.matmul(av, bv).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        let ga = g.grad(av).unwrap();
        for i in 0..3 {
            for p in 0..4 {
                let want = b.data()[p * 2] + b.data()[p * 2 + 1];
                assert_abs_diff_eq!(ga[i * 4 + p], want, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn log_softmax_cases() {
        let mut g = Graph::new();
        let x = g.input(&t(&[2], &[0.0, 0.0]));
        let y = g.log_softmax(x);
        assert_abs_diff_eq!(g.value(y)[0], 0.5f32.ln(), epsilon = 1e-7);
        let x = g.input(&t(&[2], &[1000.0, 0.0]));
        let y = g.log_softmax(x);
        assert_abs_diff_eq!(g.value(y)[0], 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(g.value(y)[1], -1000.0, epsilon = 1e-3);
        g.ensure_finite().unwrap();
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::new();
        let one = g.input(&Tensor::full(&[2], 1.0));
        let zero = g.input(&Tensor::zeros(&[2]));
        let x = g.input(&t(&[2], &[3.0, 3.0]));
        let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0]);
        let x = g.input(&t(&[2], &[1.0, -1.0]));
        let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
        assert_abs_diff_eq!(g.value(y)[0], 1.0, epsilon = 1e-4);
        assert_abs_diff_eq!(g.value(y)[1], -1.0, epsilon = 1e-4);
    }

    #[test]
    fn backward_analytic_cases() {
        let x = t(&[3], &[1.0, -2.0, 0.5]).with_requires_grad(true);
        let mut g = Graph::new();
        let xv = g.input(&x);
        let s = g.sum(xv);
        g.backward(s).unwrap();
        assert_eq!(g.grad(xv).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let xv = g.input(&x);
        let sq = g.mul(xv, xv).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(xv).unwrap(), &[2.0, -4.0, 1.0]);
        // second call accumulates
        g.backward(s).unwrap();
        assert_eq!(g.grad(xv).unwrap(), &[4.0, -8.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::zeros(&[3]).with_requires_grad(true));
        assert!(matches!(g.backward(x), Err(TensorError::Usage(_))));
    }

    #[test]
    fn depthwise_identity_kernel_and_causality() {
        let x: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let mut g = Graph::new();
        let xv = g.input(&t(&[6, 2], &x));
        let k = g.input(&t(&[3, 2], &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]));
        let mut valid = vec![true; 18];
        valid[0] = false; // row 0 tap 0 reads index -1
        valid[17] = false; // row 5 tap 2 reads index 6
        let y = g.depthwise_conv1d(xv, k, Arc::new(valid), 6, 0).unwrap();
        assert_eq!(g.value(y), &x[..]);

        // forbid future taps: perturbing row t+1 leaves row t unchanged
        let causal: Vec<bool> = (0..6).flat_map(|t| [t > 0, true, false]).collect();
        let causal = Arc::new(causal);
        let kk = g.input(&t(&[3, 2], &[0.3, -0.2, 0.5, 0.4, 0.9, 0.7]));
        let y1 = g.depthwise_conv1d(xv, kk, causal.clone(), 6, 0).unwrap();
        let mut x2 = x.clone();
        x2[2 * 2] += 5.0;
        let xv2 = g.input(&t(&[6, 2], &x2));
        let y2 = g.depthwise_conv1d(xv2, kk, causal, 6, 0).unwrap();
        assert_eq!(g.value(y1)[2..4], g.value(y2)[2..4]);
        assert_ne!(g.value(y1)[4..6], g.value(y2)[4..6]);
    }

    #[test]
    fn depthwise_rejects_even_kernel() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::zeros(&[4, 1]));
        let k = g.input(&Tensor::zeros(&[2, 1]));
        let r = g.depthwise_conv1d(x, k, Arc::new(vec![true; 8]), 4, 0);
        assert!(matches!(r, Err(TensorError::Config(_))));
    }

    #[test]
    fn shape_ops_roundtrip() {
        let mut g = Graph::new();
        let x = g.input(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_requires_grad(true));
        let a = g.slice(x, 1, 0, 1).unwrap();
        let b = g.slice(x, 1, 1, 2).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c), g.value(x));
        let tr = g.transpose(c).unwrap();
        assert_eq!(g.value(tr), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let s = g.sum(tr);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn nonfinite_is_reported() {
        let mut g = Graph::new();
        let x = g.input(&t(&[1], &[f32::MAX]));
        let _ = g.scale(x, 10.0);
        assert!(matches!(g.ensure_finite(), Err(TensorError::NonFinite("scale"))));
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::full(&[100], 1.0));
        assert_eq!(g.dropout(x, 0.5), x);
        let mut g = Graph::training(7);
        let x = g.input(&Tensor::full(&[1000], 1.0));
        let y = g.dropout(x, 0.5);
        let zeros = g.value(y).iter().filter(|v| **v == 0.0).count();
        assert!((400..600).contains(&zeros));
    }
}

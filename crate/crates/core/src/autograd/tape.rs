use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tensor, TensorError};

const LAYER_NORM_EPS: f64 = 1e-5;
const BCE_CLAMP: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GeluKind {
    #[default]
    Tanh,
    Erf,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, shared_rhs: bool },
    /// `big` has the output shape; `small`'s shape is a suffix of it.
    Add { big: Var, small: Var },
    Mul { big: Var, small: Var },
    Scale { x: Var, factor: f64 },
    Transpose { x: Var },
    Reshape { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu { x: Var, kind: GeluKind },
    Sigmoid { x: Var },
    Dropout { x: Var, mask: Vec<f64> },
    RowSelect { table: Var, indices: Vec<usize> },
    Mean { x: Var, axis: usize },
    Sum { x: Var },
    Bce { p: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass and replays them in reverse.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order of the graph. A tape supports a single backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of the leaves that took part in a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` if it does not influence the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, materialising zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| {
            Tensor::zeros(shape.to_vec()).expect("shape comes from a live tensor")
        })
    }
}

/// Splits `shape` around `axis` into (outer, dim, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn gelu_forward(x: f64, kind: GeluKind) -> f64 {
    match kind {
        GeluKind::Tanh => {
            let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        }
        GeluKind::Erf => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
    }
}

fn gelu_derivative(x: f64, kind: GeluKind) -> f64 {
    match kind {
        GeluKind::Tanh => {
            let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
            let t = u.tanh();
            let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        }
        GeluKind::Erf => {
            let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
            let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
            cdf + x * pdf
        }
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
fn gemm_nt_acc(m: usize, k: usize, n: usize, g: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let dot: f64 = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
fn gemm_tn_acc(m: usize, k: usize, n: usize, a: &[f64], g: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], var: Var, delta: Vec<f64>) {
    if !nodes[var.0].requires_grad {
        return;
    }
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Registers a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        parents: &[Var],
    ) -> Result<Var, TensorError> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let value = Tensor::new(shape, data)?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    /// Matrix product over the last two axes. `b` is either a plain matrix
    /// shared by every leading index of `a`, or has the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let lead_a = &sa[..sa.len() - 2];
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sb[..sb.len() - 2] != *lead_a {
            return Err(mismatch());
        }
        let batch: usize = lead_a.iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for t in 0..batch {
                let b_off = if shared_rhs { 0 } else { t * k * n };
                gemm_acc(
                    m,
                    k,
                    n,
                    &av[t * m * k..(t + 1) * m * k],
                    &bv[b_off..b_off + k * n],
                    &mut out[t * m * n..(t + 1) * m * n],
                );
            }
        }
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        self.push("matmul", shape, out, Op::MatMul { a, b, shared_rhs }, &[a, b])
    }

    fn broadcast_pair(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if is_suffix(sb, sa) {
            Ok((a, b))
        } else if is_suffix(sa, sb) {
            Ok((b, a))
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    /// Elementwise sum; the smaller operand broadcasts over leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (big, small) = self.broadcast_pair("add", a, b)?;
        let bv = self.value(big);
        let sv = self.value(small).data();
        let ns = sv.len();
        let out: Vec<f64> = bv
            .data()
            .chunks(ns)
            .flat_map(|c| c.iter().zip(sv).map(|(x, y)| x + y))
            .collect();
        let shape = bv.shape().to_vec();
        self.push("add", shape, out, Op::Add { big, small }, &[big, small])
    }

    /// Elementwise product; the smaller operand broadcasts over leading axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (big, small) = self.broadcast_pair("mul", a, b)?;
        let bv = self.value(big);
        let sv = self.value(small).data();
        let ns = sv.len();
        let out: Vec<f64> = bv
            .data()
            .chunks(ns)
            .flat_map(|c| c.iter().zip(sv).map(|(x, y)| x * y))
            .collect();
        let shape = bv.shape().to_vec();
        self.push("mul", shape, out, Op::Mul { big, small }, &[big, small])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let out = xv.data().iter().map(|v| v * factor).collect();
        let shape = xv.shape().to_vec();
        self.push("scale", shape, out, Op::Scale { x, factor }, &[x])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: s,
                reason: "needs at least two axes".into(),
            });
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch: usize = s[..s.len() - 2].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for t in 0..batch {
            let base = t * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[base + j * r + i] = xv[base + i * c + j];
                }
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([c, r]);
        self.push("transpose", shape, out, Op::Transpose { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let value = self.value(x).reshaped(shape)?;
        let requires_grad = self.nodes[x.0].requires_grad;
        Ok(self.push_raw(value, Op::Reshape { x }, requires_grad))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                ndim: base.len(),
            });
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let d = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Keeps indices `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "slice",
                axis,
                ndim: s.len(),
            });
        }
        if start >= end || end > s[axis] {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape: s,
                reason: format!("range {start}..{end} invalid on axis {axis}"),
            });
        }
        let (outer, dim, inner) = axis_extents(&s, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv[(o * dim + start) * inner..(o * dim + end) * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        self.push("slice", shape, out, Op::Slice { x, axis, start }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let w = *xv.shape().last().expect("validated non-empty shape");
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(w) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut total = 0.0;
            for &v in row {
                let e = (v - max).exp();
                total += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= total;
            }
        }
        let shape = xv.shape().to_vec();
        self.push("softmax", shape, out, Op::Softmax { x }, &[x])
    }

    /// Layer normalisation over the last axis with a learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        let d = *s.last().expect("validated non-empty shape");
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: s.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.len() / d;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            for (i, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[i] + b[i]);
            }
        }
        self.push(
            "layer_norm",
            s,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    pub fn gelu(&mut self, x: Var, kind: GeluKind) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| gelu_forward(v, kind)).collect();
        let shape = xv.shape().to_vec();
        self.push("gelu", shape, out, Op::Gelu { x, kind }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| sigmoid(v)).collect();
        let shape = xv.shape().to_vec();
        self.push("sigmoid", shape, out, Op::Sigmoid { x }, &[x])
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)`. Outside
    /// training, or with `p == 0`, the input is returned unchanged.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64, train: bool) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                reason: format!("probability {p} outside [0, 1)"),
            });
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.numel())
            .map(|_| if rng.random::<f64>() >= p { keep_scale } else { 0.0 })
            .collect();
        let out = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = xv.shape().to_vec();
        self.push("dropout", shape, out, Op::Dropout { x, mask }, &[x])
    }

    /// Gathers rows of a 2-D table.
    pub fn row_select(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "row_select",
                shape: s,
                reason: "table must be 2-D".into(),
            });
        }
        if indices.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "row_select",
                reason: "no indices".into(),
            });
        }
        let (rows, width) = (s[0], s[1]);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "row_select",
                    index: i,
                    len: rows,
                });
            }
            out.extend_from_slice(tv.row(i));
        }
        self.push(
            "row_select",
            vec![indices.len(), width],
            out,
            Op::RowSelect {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        )
    }

    /// Mean over `axis`; the axis is removed from the output shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "mean",
                axis,
                ndim: s.len(),
            });
        }
        let (outer, dim, inner) = axis_extents(&s, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &xv[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        for v in &mut out {
            *v /= dim as f64;
        }
        let mut shape: Vec<usize> = s.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.push("mean", shape, out, Op::Mean { x, axis }, &[x])
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let total = self.value(x).data().iter().sum();
        self.push("sum", vec![1], vec![total], Op::Sum { x }, &[x])
    }

    /// Mean binary cross-entropy between probabilities `p` and 0/1 `targets`.
    /// Probabilities are clamped to `[1e-7, 1 - 1e-7]`.
    pub fn binary_cross_entropy(&mut self, p: Var, targets: &Tensor) -> Result<Var, TensorError> {
        let pv = self.value(p);
        if pv.shape() != targets.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "binary_cross_entropy",
                lhs: pv.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let n = pv.numel() as f64;
        let loss = pv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&pr, &y)| {
                let pc = pr.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / n;
        self.push(
            "binary_cross_entropy",
            vec![1],
            vec![loss],
            Op::Bce {
                p,
                targets: targets.data().to_vec(),
            },
            &[p],
        )
    }

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, TensorError> {
        if self.consumed {
            return Err(TensorError::BackwardTwice);
        }
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: loss_value.shape().to_vec(),
            });
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::Detached);
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                let shape = self.nodes[i].value.shape().to_vec();
                leaves[i] = Some(Tensor::new(shape, g)?);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads: leaves })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let shape = |v: Var| nodes[v.0].value.shape();
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, shared_rhs } => {
                let sa = shape(*a);
                let sb = shape(*b);
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch = nodes[a.0].value.numel() / (m * k);
                let (av, bv) = (val(*a), val(*b));
                if nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; av.len()];
                    for t in 0..batch {
                        let b_off = if *shared_rhs { 0 } else { t * k * n };
                        gemm_nt_acc(
                            m,
                            k,
                            n,
                            &g[t * m * n..(t + 1) * m * n],
                            &bv[b_off..b_off + k * n],
                            &mut ga[t * m * k..(t + 1) * m * k],
                        );
                    }
                    accumulate(grads, nodes, *a, ga);
                }
                if nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; bv.len()];
                    for t in 0..batch {
                        let b_off = if *shared_rhs { 0 } else { t * k * n };
                        gemm_tn_acc(
                            m,
                            k,
                            n,
                            &av[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut gb[b_off..b_off + k * n],
                        );
                    }
                    accumulate(grads, nodes, *b, gb);
                }
            }
            Op::Add { big, small } => {
                let ns = nodes[small.0].value.numel();
                if nodes[small.0].requires_grad {
                    let mut gs = vec![0.0; ns];
                    for chunk in g.chunks(ns) {
                        for (acc, v) in gs.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, nodes, *small, gs);
                }
                accumulate(grads, nodes, *big, g.to_vec());
            }
            Op::Mul { big, small } => {
                let (bv, sv) = (val(*big), val(*small));
                let ns = sv.len();
                if nodes[small.0].requires_grad {
                    let mut gs = vec![0.0; ns];
                    for (gc, bc) in g.chunks(ns).zip(bv.chunks(ns)) {
                        for ((acc, gv), bx) in gs.iter_mut().zip(gc).zip(bc) {
                            *acc += gv * bx;
                        }
                    }
                    accumulate(grads, nodes, *small, gs);
                }
                if nodes[big.0].requires_grad {
                    let gb = g
                        .chunks(ns)
                        .flat_map(|c| c.iter().zip(sv).map(|(gv, s)| gv * s))
                        .collect();
                    accumulate(grads, nodes, *big, gb);
                }
            }
            Op::Scale { x, factor } => {
                accumulate(grads, nodes, *x, g.iter().map(|v| v * factor).collect());
            }
            Op::Transpose { x } => {
                let s = nodes[i].value.shape();
                // Output is [.., c, r]; the gradient goes back to [.., r, c].
                let (c, r) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = g.len() / (r * c);
                let mut gx = vec![0.0; g.len()];
                for t in 0..batch {
                    let base = t * r * c;
                    for j in 0..c {
                        for ii in 0..r {
                            gx[base + ii * c + j] = g[base + j * r + ii];
                        }
                    }
                }
                accumulate(grads, nodes, *x, gx);
            }
            Op::Reshape { x } => accumulate(grads, nodes, *x, g.to_vec()),
            Op::Concat { parts, axis } => {
                let s = nodes[i].value.shape();
                let (outer, total, inner) = axis_extents(s, *axis);
                let mut offset = 0;
                for p in parts {
                    let d = shape(*p)[*axis];
                    if nodes[p.0].requires_grad {
                        let mut gp = Vec::with_capacity(outer * d * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[start..start + d * inner]);
                        }
                        accumulate(grads, nodes, *p, gp);
                    }
                    offset += d;
                }
            }
            Op::Slice { x, axis, start } => {
                let sx = shape(*x);
                let (outer, dim, inner) = axis_extents(sx, *axis);
                let len = nodes[i].value.shape()[*axis];
                let mut gx = vec![0.0; nodes[x.0].value.numel()];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                accumulate(grads, nodes, *x, gx);
            }
            Op::Softmax { x } => {
                let w = *nodes[i].value.shape().last().expect("non-empty");
                let mut gx = Vec::with_capacity(g.len());
                for (yr, gr) in out.chunks(w).zip(g.chunks(w)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, gv)| y * gv).sum();
                    gx.extend(yr.iter().zip(gr).map(|(y, gv)| y * (gv - dot)));
                }
                accumulate(grads, nodes, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = shape(*gain)[0];
                let gv = val(*gain);
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                let mut gx = Vec::with_capacity(g.len());
                for ((gr, hr), r) in g.chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        ggain[j] += gr[j] * hr[j];
                        gbias[j] += gr[j];
                        let dh = gr[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        gx.push(r * (dh - mean_dh - hr[j] * mean_dh_h));
                    }
                }
                accumulate(grads, nodes, *x, gx);
                accumulate(grads, nodes, *gain, ggain);
                accumulate(grads, nodes, *bias, gbias);
            }
            Op::Gelu { x, kind } => {
                let gx = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&xv, gv)| gv * gelu_derivative(xv, *kind))
                    .collect();
                accumulate(grads, nodes, *x, gx);
            }
            Op::Sigmoid { x } => {
                let gx = out.iter().zip(g).map(|(y, gv)| gv * y * (1.0 - y)).collect();
                accumulate(grads, nodes, *x, gx);
            }
            Op::Dropout { x, mask } => {
                let gx = g.iter().zip(mask).map(|(gv, m)| gv * m).collect();
                accumulate(grads, nodes, *x, gx);
            }
            Op::RowSelect { table, indices } => {
                let width = shape(*table)[1];
                let mut gt = vec![0.0; nodes[table.0].value.numel()];
                for (r, &idx) in indices.iter().enumerate() {
                    let src = &g[r * width..(r + 1) * width];
                    for (acc, v) in gt[idx * width..(idx + 1) * width].iter_mut().zip(src) {
                        *acc += v;
                    }
                }
                accumulate(grads, nodes, *table, gt);
            }
            Op::Mean { x, axis } => {
                let (outer, dim, inner) = axis_extents(shape(*x), *axis);
                let mut gx = Vec::with_capacity(outer * dim * inner);
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for _ in 0..dim {
                        gx.extend(src.iter().map(|v| v / dim as f64));
                    }
                }
                accumulate(grads, nodes, *x, gx);
            }
            Op::Sum { x } => {
                accumulate(grads, nodes, *x, vec![g[0]; nodes[x.0].value.numel()]);
            }
            Op::Bce { p, targets } => {
                let n = targets.len() as f64;
                let gp = val(*p)
                    .iter()
                    .zip(targets)
                    .map(|(&pr, &y)| {
                        let pc = pr.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                        g[0] * (pc - y) / (pc * (1.0 - pc)) / n
                    })
                    .collect();
                accumulate(grads, nodes, *p, gp);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_of_constant_vector_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &[2.5; 4]));
        let g = tape.constant(Tensor::ones(vec![4]).unwrap());
        let b = tape.constant(Tensor::zeros(vec![4]).unwrap());
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 4.0, -1.0]));
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn product_gradient_is_other_factor() {
        let mut tape = Tape::new();
        let xv = [1.0, 2.0, 3.0];
        let yv = [-4.0, 0.25, 7.0];
        let x = tape.leaf(t(&[3], &xv));
        let y = tape.leaf(t(&[3], &yv));
        let p = tape.mul(x, y).unwrap();
        let s = tape.sum(p).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &yv);
        assert_eq!(grads.get(y).unwrap().data(), &xv);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(TensorError::BackwardTwice)));
    }

    #[test]
    fn backward_requires_scalar_and_attached_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar { .. })));
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(c).unwrap();
        assert!(matches!(tape.backward(s), Err(TensorError::Detached)));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.0; 6]));
        let b = tape.constant(t(&[2, 3], &[0.0; 6]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn non_finite_output_is_a_checked_error() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1], &[f64::MAX]));
        let err = tape.scale(a, 10.0).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { op: "scale" }));
    }

    #[test]
    fn dropout_eval_is_identity_and_train_is_seeded() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(vec![64]).unwrap());
        assert_eq!(tape.dropout(x, 0.5, 7, false).unwrap(), x);
        let a = tape.dropout(x, 0.5, 7, true).unwrap();
        let b = tape.dropout(x, 0.5, 7, true).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        assert!(tape.value(a).data().iter().all(|v| *v == 0.0 || *v == 2.0));
    }

    #[test]
    fn broadcast_add_reduces_gradient_like_explicit_tiling() {
        let bias = [0.5, -1.0, 2.0];
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4, 3], &[0.1; 12]));
        let b = tape.leaf(t(&[3], &bias));
        let w = tape.constant(t(&[4, 3], &(0..12).map(f64::from).collect::<Vec<_>>()));
        let y = tape.add(x, b).unwrap();
        let z = tape.mul(y, w).unwrap();
        let s = tape.sum(z).unwrap();
        let grads = tape.backward(s).unwrap();

        let mut tiled = Tape::new();
        let tb = tiled.leaf(t(&[4, 3], &bias.repeat(4)));
        let tx = tiled.constant(t(&[4, 3], &[0.1; 12]));
        let tw = tiled.constant(t(&[4, 3], &(0..12).map(f64::from).collect::<Vec<_>>()));
        let ty = tiled.add(tx, tb).unwrap();
        let tz = tiled.mul(ty, tw).unwrap();
        let ts = tiled.sum(tz).unwrap();
        let tg = tiled.backward(ts).unwrap();
        let per_row = tg.get(tb).unwrap().data().to_vec();
        let summed: Vec<f64> = (0..3).map(|j| (0..4).map(|i| per_row[i * 3 + j]).sum()).collect();
        assert_eq!(grads.get(b).unwrap().data(), summed.as_slice());
    }
}

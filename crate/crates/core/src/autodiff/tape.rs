use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::kernels::{
    gelu, gelu_grad, mm_acc, mm_nt_acc, mm_tn_acc, sigmoid, softmax_rows, split_axis,
    transpose_last,
};
use super::Tensor;
use crate::cgm::circulant;
use crate::error::{dim_err, CcpeError, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Sigmoid,
}

impl FromStr for Activation {
    type Err = CcpeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gelu" => Ok(Activation::Gelu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(CcpeError::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_grad(x),
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

/// Forward rule of a user-supplied unary op.
pub type CustomForward = Arc<dyn Fn(&Tensor) -> Tensor + Send + Sync>;

/// Backward rule of a user-supplied unary op: `(input, output, upstream) -> input grad`.
pub type CustomBackward = Arc<dyn Fn(&Tensor, &Tensor, &Tensor) -> Tensor + Send + Sync>;

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

#[derive(Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    BatchMatmul(Var, Var),
    TransposeLast(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    ScaleRows(Var, Var),
    Activation(Var, Activation),
    Softmax(Var, f64),
    MeanPool(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Repeat(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    CircConv(Var, Var),
    RowCosine(Var, Var, f64),
    Nll {
        probs: Var,
        labels: Vec<usize>,
        floor: f64,
    },
    Gather(Var, Vec<usize>),
    Custom(Var, CustomForward, CustomBackward),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Matmul(a, b)
            | Op::BatchMatmul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::ScaleRows(a, b)
            | Op::CircConv(a, b)
            | Op::RowCosine(a, b, _) => vec![*a, *b],
            Op::TransposeLast(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x, _)
            | Op::Activation(x, _)
            | Op::Softmax(x, _)
            | Op::MeanPool(x, _)
            | Op::SumAll(x)
            | Op::MeanAll(x)
            | Op::Reshape(x)
            | Op::Repeat(x)
            | Op::Slice { x, .. }
            | Op::Gather(x, _)
            | Op::Custom(x, ..) => vec![*x],
            Op::Nll { probs, .. } => vec![*probs],
            Op::Concat(xs, _) => xs.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::BatchMatmul(..) => "batch_matmul",
            Op::TransposeLast(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::ScaleRows(..) => "scale_rows",
            Op::Activation(..) => "activation",
            Op::Softmax(..) => "softmax",
            Op::MeanPool(..) => "mean_pool",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Repeat(..) => "repeat",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CircConv(..) => "circ_conv",
            Op::RowCosine(..) => "row_cosine",
            Op::Nll { .. } => "nll",
            Op::Gather(..) => "gather",
            Op::Custom(..) => "custom",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only leaves keep one between backward calls.
    grad: Option<Tensor>,
}

/// Wengert list for reverse-mode differentiation.
///
/// The first `persistent` nodes are parameters that survive [`Tape::reset`];
/// everything recorded after them is per-step scratch.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    persistent: usize,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("persistent", &self.persistent)
            .finish()
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

    /// Registers a trainable parameter. Discards any recorded operations.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_persistent(value, true)
    }

    /// Registers a frozen parameter: gradients flow through it, never into it.
    pub fn frozen(&mut self, value: Tensor) -> Var {
        self.push_persistent(value, false)
    }

    fn push_persistent(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.reset();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        self.persistent += 1;
        Var(self.nodes.len() - 1)
    }

    /// Per-step constant input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Per-step leaf that collects a gradient.
    pub fn input_with_grad(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Drops every non-persistent node.
    pub fn reset(&mut self) {
        self.nodes.truncate(self.persistent);
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn is_persistent(&self, v: Var) -> bool {
        v.0 < self.persistent
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Mutable access to a leaf's value. Recorded ops downstream of it are
    /// not recomputed; see [`Tape::recompute`].
    pub fn value_mut(&mut self, v: Var) -> &mut Tensor {
        let node = &mut self.nodes[v.0];
        assert!(matches!(node.op, Op::Leaf), "only leaves can be mutated");
        &mut node.value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Persistent trainable leaves in registration order.
    pub fn trainable(&self) -> Vec<Var> {
        (0..self.persistent)
            .filter(|&i| self.nodes[i].requires_grad)
            .map(Var)
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Computes the value of `op` with output `shape` and records it.
    fn record(&mut self, op: Op, shape: Vec<usize>) -> Result<Var> {
        let value = self.compute(&op, shape)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    /// Nodes recorded after the persistent prefix whose value depends on `leaf`.
    pub fn cone(&self, leaf: Var) -> Vec<Var> {
        let mut dirty = vec![false; self.nodes.len()];
        dirty[leaf.0] = true;
        let mut out = Vec::new();
        for idx in self.persistent..self.nodes.len() {
            if self.nodes[idx].op.inputs().iter().any(|v| dirty[v.0]) {
                dirty[idx] = true;
                out.push(Var(idx));
            }
        }
        out
    }

    pub(crate) fn set_value(&mut self, v: Var, value: Tensor) {
        self.nodes[v.0].value = value;
    }

    /// Re-evaluates `nodes` in order from the current values of their inputs.
    /// Pass the result of [`Tape::cone`] after mutating a leaf.
    pub fn recompute(&mut self, nodes: &[Var]) -> Result<()> {
        for &v in nodes {
            let node = &self.nodes[v.0];
            let value = self.compute(&node.op, node.value.shape().to_vec())?;
            self.nodes[v.0].value = value;
        }
        Ok(())
    }

    fn compute(&self, op: &Op, shape: Vec<usize>) -> Result<Tensor> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let data = match op {
            Op::Leaf => return Err(CcpeError::Internal("leaves are not computed".into())),
            Op::Matmul(a, b) => {
                let k = val(a).shape()[1];
                let mut out = vec![0.0; shape[0] * shape[1]];
                mm_acc(val(a).data(), val(b).data(), &mut out, shape[0], k, shape[1]);
                out
            }
            Op::BatchMatmul(a, b) => {
                let (bs, m, n) = (shape[0], shape[1], shape[2]);
                let k = val(a).shape()[2];
                let mut out = vec![0.0; bs * m * n];
                let (da, db) = (val(a).data(), val(b).data());
                for i in 0..bs {
                    mm_acc(
                        &da[i * m * k..(i + 1) * m * k],
                        &db[i * k * n..(i + 1) * k * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
                out
            }
            Op::TransposeLast(x) => {
                let s = val(x).shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = s[..s.len() - 2].iter().product();
                transpose_last(val(x).data(), batch, r, c)
            }
            Op::Add(a, b) => zip_map(val(a), val(b), |x, y| x + y),
            Op::Sub(a, b) => zip_map(val(a), val(b), |x, y| x - y),
            Op::Mul(a, b) => zip_map(val(a), val(b), |x, y| x * y),
            Op::AddBias(x, bias) => {
                let b = val(bias).data();
                let mut out = val(x).data().to_vec();
                for row in out.chunks_mut(b.len()) {
                    row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
                }
                out
            }
            Op::Scale(x, c) => val(x).data().iter().map(|t| t * c).collect(),
            Op::AddScalar(x, c) => val(x).data().iter().map(|t| t + c).collect(),
            Op::ScaleRows(x, s) => {
                let w = val(x).last_dim();
                let mut out = val(x).data().to_vec();
                for (row, f) in out.chunks_mut(w).zip(val(s).data()) {
                    row.iter_mut().for_each(|v| *v *= f);
                }
                out
            }
            Op::Activation(x, kind) => val(x).data().iter().map(|&t| kind.apply(t)).collect(),
            Op::Softmax(x, temperature) => {
                softmax_rows(val(x).data(), val(x).last_dim(), *temperature)
            }
            Op::MeanPool(x, axis) => {
                let (outer, k, inner) = split_axis(val(x).shape(), *axis);
                let src = val(x).data();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..k {
                        let base = (o * k + j) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += src[base + i];
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v /= k as f64);
                out
            }
            Op::SumAll(x) => vec![val(x).data().iter().sum()],
            Op::MeanAll(x) => {
                let t = val(x);
                vec![t.data().iter().sum::<f64>() / t.numel() as f64]
            }
            Op::Concat(xs, axis) => {
                let (outer, _, inner) = split_axis(&shape, *axis);
                let mut out = Vec::with_capacity(shape.iter().product());
                for o in 0..outer {
                    for x in xs {
                        let chunk = val(x).shape()[*axis] * inner;
                        out.extend_from_slice(&val(x).data()[o * chunk..(o + 1) * chunk]);
                    }
                }
                out
            }
            Op::Slice { x, axis, start } => {
                let (outer, ext, inner) = split_axis(val(x).shape(), *axis);
                let len = shape[*axis];
                let src = val(x).data();
                let mut out = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = (o * ext + start) * inner;
                    out.extend_from_slice(&src[base..base + len * inner]);
                }
                out
            }
            Op::Reshape(x) => val(x).data().to_vec(),
            Op::Repeat(x) => val(x).data().repeat(shape[0]),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let (g, b) = (val(gamma).data(), val(beta).data());
                let w = g.len();
                let mut out = val(x).data().to_vec();
                for row in out.chunks_mut(w) {
                    let mean = row.iter().sum::<f64>() / w as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = (*v - mean) * inv * g[j] + b[j];
                    }
                }
                out
            }
            Op::CircConv(x, y) => {
                let n = val(x).last_dim();
                let mut out = Vec::with_capacity(val(x).numel());
                for (xr, yr) in val(x).data().chunks(n).zip(val(y).data().chunks(n)) {
                    out.extend(circulant::circular_convolve(xr, yr)?);
                }
                out
            }
            Op::RowCosine(a, b, eps) => {
                let w = val(a).last_dim();
                val(a)
                    .data()
                    .chunks(w)
                    .zip(val(b).data().chunks(w))
                    .map(|(ra, rb)| {
                        let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                        let na = ra.iter().map(|x| x * x).sum::<f64>().sqrt().max(*eps);
                        let nb = rb.iter().map(|x| x * x).sum::<f64>().sqrt().max(*eps);
                        (dot / (na * nb)).clamp(-1.0, 1.0)
                    })
                    .collect()
            }
            Op::Nll {
                probs,
                labels,
                floor,
            } => {
                let p = val(probs);
                let c = p.last_dim();
                let total: f64 = labels
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| -p.data()[i * c + l].max(*floor).ln())
                    .sum();
                vec![total / labels.len() as f64]
            }
            Op::Gather(table, ids) => {
                let t = val(table);
                let mut out = Vec::with_capacity(ids.len() * t.last_dim());
                for &i in ids {
                    out.extend_from_slice(t.row(i));
                }
                out
            }
            Op::Custom(x, forward, _) => {
                let value = forward(val(x));
                if value.shape() != shape.as_slice() {
                    return Err(CcpeError::Contract(format!(
                        "custom forward returned {:?}, expected {shape:?}",
                        value.shape()
                    )));
                }
                return Ok(value);
            }
        };
        Tensor::new(shape, data)
    }

    // ── primitives ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul of {sa:?} and {sb:?}"));
        }
        let shape = vec![sa[0], sb[1]];
        self.record(Op::Matmul(a, b), shape)
    }

    /// `[B×m×k] · [B×k×n] -> [B×m×n]`
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return dim_err(format!("batch_matmul of {sa:?} and {sb:?}"));
        }
        let shape = vec![sa[0], sa[1], sb[2]];
        self.record(Op::BatchMatmul(a, b), shape)
    }

    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        let len = shape.len();
        if len < 2 {
            return dim_err(format!("transpose needs ≥2 axes, got {shape:?}"));
        }
        shape.swap(len - 2, len - 1);
        self.record(Op::TransposeLast(x), shape)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{op} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "add")?;
        self.record(Op::Add(a, b), shape)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "sub")?;
        self.record(Op::Sub(a, b), shape)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "mul")?;
        self.record(Op::Mul(a, b), shape)
    }

    /// `x[..., n] + bias[n]` broadcast over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return dim_err(format!(
                "bias {:?} does not match last axis of {:?}",
                self.shape(bias),
                self.shape(x)
            ));
        }
        let shape = self.shape(x).to_vec();
        self.record(Op::AddBias(x, bias), shape)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        self.record(Op::Scale(x, c), shape)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        self.record(Op::AddScalar(x, c), shape)
    }

    /// Multiplies row `r` of `x` (rows over the last axis) by `s[r]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let w = self.value(x).last_dim();
        let rows = self.value(x).numel() / w;
        if self.value(s).numel() != rows {
            return dim_err(format!(
                "scale_rows of {:?} by {:?}",
                self.shape(x),
                self.shape(s)
            ));
        }
        let shape = self.shape(x).to_vec();
        self.record(Op::ScaleRows(x, s), shape)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        self.record(Op::Activation(x, kind), shape)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    /// Softmax of `x / temperature` along the last axis.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(CcpeError::Domain(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let shape = self.shape(x).to_vec();
        self.record(Op::Softmax(x, temperature), shape)
    }

    /// Arithmetic mean along `axis`, which is removed from the shape.
    pub fn mean_pool(&mut self, x: Var, axis: usize) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return dim_err(format!("mean_pool axis {axis} out of range for {shape:?}"));
        }
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.record(Op::MeanPool(x, axis), shape)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.record(Op::SumAll(x), vec![1])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.record(Op::MeanAll(x), vec![1])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = match xs.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => return dim_err("concat of an empty list"),
        };
        if axis >= first.len() {
            return dim_err(format!("concat axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return dim_err(format!("concat of {first:?} and {s:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let mut shape = first;
        shape[axis] = total;
        self.record(Op::Concat(xs.to_vec(), axis), shape)
    }

    /// `x[..., start..start+len, ...]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return dim_err(format!(
                "slice {start}..{} on axis {axis} of {shape:?}",
                start + len
            ));
        }
        shape[axis] = len;
        self.record(Op::Slice { x, axis, start }, shape)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return dim_err(format!("reshape of {:?} to {shape:?}", self.shape(x)));
        }
        self.record(Op::Reshape(x), shape.to_vec())
    }

    /// Stacks `times` copies of `x` along a new leading axis.
    pub fn repeat(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return dim_err("repeat count must be positive");
        }
        let mut shape = vec![times];
        shape.extend_from_slice(self.shape(x));
        self.record(Op::Repeat(x), shape)
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let w = self.value(x).last_dim();
        if self.shape(gamma) != [w] || self.shape(beta) != [w] {
            return dim_err(format!(
                "layer_norm of {:?} with gamma {:?} beta {:?}",
                self.shape(x),
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let shape = self.shape(x).to_vec();
        self.record(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            shape,
        )
    }

    /// Row-wise circular convolution `out[r,k] = Σ_j x[r,j]·y[r,(k−j) mod n]`,
    /// i.e. `R(x)·y` with `R` the circulant matrix of `x`.
    pub fn circ_conv(&mut self, x: Var, y: Var) -> Result<Var> {
        let shape = self.same_shape(x, y, "circ_conv")?;
        self.record(Op::CircConv(x, y), shape)
    }

    /// Row-wise cosine similarity with norms floored at `eps`, clamped to
    /// `[-1, 1]`; output `[rows]`.
    pub fn row_cosine(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        self.same_shape(a, b, "row_cosine")?;
        let rows = self.value(a).numel() / self.value(a).last_dim();
        self.record(Op::RowCosine(a, b, eps), vec![rows])
    }

    /// Mean negative log-likelihood of `labels` under row-probabilities
    /// `probs[B×C]`, with probabilities floored at `floor`.
    pub fn nll(&mut self, probs: Var, labels: &[usize], floor: f64) -> Result<Var> {
        let s = self.shape(probs).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return dim_err(format!(
                "nll of probabilities {s:?} with {} labels",
                labels.len()
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= s[1]) {
            return Err(CcpeError::Domain(format!(
                "label {bad} out of range for {} classes",
                s[1]
            )));
        }
        let op = Op::Nll {
            probs,
            labels: labels.to_vec(),
            floor,
        };
        self.record(op, vec![1])
    }

    /// Row lookup `table[ids[j]]`; output `[ids.len() × width]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return dim_err(format!("gather needs a 2-D table, got {s:?}"));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(CcpeError::Internal(format!(
                "row id {bad} out of range for table with {} rows",
                s[0]
            )));
        }
        if ids.is_empty() {
            return dim_err("gather of zero rows");
        }
        self.record(Op::Gather(table, ids.to_vec()), vec![ids.len(), s[1]])
    }

    /// Unary op with caller-provided forward value and backward rule.
    pub fn custom_unary(
        &mut self,
        x: Var,
        forward: impl Fn(&Tensor) -> Tensor + Send + Sync + 'static,
        backward: CustomBackward,
    ) -> Result<Var> {
        let value = forward(self.value(x));
        let requires_grad = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::Custom(x, Arc::new(forward), backward), requires_grad))
    }

    // ── reverse pass ─────────────────────────────────────────────────

    /// Accumulates `d output / d leaf` into every leaf that requires a
    /// gradient. Repeated calls add up until [`Tape::zero_grad`].
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).numel() != 1 {
            return Err(CcpeError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            for (input, contribution) in self.local_grads(idx, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc
                        .iter_mut()
                        .zip(&contribution)
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `g`.
    fn local_grads(&self, idx: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let wants = |v: &Var| self.nodes[v.0].requires_grad;

        let grads = match &node.op {
            Op::Leaf => vec![],
            Op::Matmul(a, b) => {
                let (sa, sb) = (val(a).shape(), val(b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut res = vec![];
                if wants(a) {
                    let mut da = vec![0.0; m * k];
                    mm_nt_acc(g, val(b).data(), &mut da, m, k, n);
                    res.push((*a, da));
                }
                if wants(b) {
                    let mut db = vec![0.0; k * n];
                    mm_tn_acc(val(a).data(), g, &mut db, m, k, n);
                    res.push((*b, db));
                }
                res
            }
            Op::BatchMatmul(a, b) => {
                let (sa, sb) = (val(a).shape(), val(b).shape());
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (ad, bd) = (val(a).data(), val(b).data());
                let mut res = vec![];
                if wants(a) {
                    let mut da = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        mm_nt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &bd[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                    res.push((*a, da));
                }
                if wants(b) {
                    let mut db = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        mm_tn_acc(
                            &ad[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    res.push((*b, db));
                }
                res
            }
            Op::TransposeLast(x) => {
                // g has the transposed shape; transposing it back restores x's layout.
                let s = out.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = s[..s.len() - 2].iter().product();
                vec![(*x, transpose_last(g, batch, r, c))]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let da = g.iter().zip(val(b).data()).map(|(x, y)| x * y).collect();
                let db = g.iter().zip(val(a).data()).map(|(x, y)| x * y).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::AddBias(x, bias) => {
                let n = out.last_dim();
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                vec![(*x, g.to_vec()), (*bias, db)]
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::AddScalar(x, _) => vec![(*x, g.to_vec())],
            Op::ScaleRows(x, s) => {
                let w = out.last_dim();
                let sv = val(s).data();
                let xv = val(x).data();
                let mut dx = vec![0.0; g.len()];
                let mut ds = vec![0.0; sv.len()];
                for (r, (gr, xr)) in g.chunks(w).zip(xv.chunks(w)).enumerate() {
                    for j in 0..w {
                        dx[r * w + j] = gr[j] * sv[r];
                        ds[r] += gr[j] * xr[j];
                    }
                }
                vec![(*x, dx), (*s, ds)]
            }
            Op::Activation(x, kind) => {
                let dx = g
                    .iter()
                    .zip(val(x).data())
                    .map(|(gv, &xv)| gv * kind.derivative(xv))
                    .collect();
                vec![(*x, dx)]
            }
            Op::Softmax(x, temperature) => {
                let w = out.last_dim();
                let mut dx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(w).zip(out.data().chunks(w)).zip(dx.chunks_mut(w))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..w {
                        dr[j] = yr[j] * (gr[j] - dot) / temperature;
                    }
                }
                vec![(*x, dx)]
            }
            Op::MeanPool(x, axis) => {
                let (outer, k, inner) = split_axis(val(x).shape(), *axis);
                let mut dx = vec![0.0; outer * k * inner];
                for o in 0..outer {
                    for j in 0..k {
                        for i in 0..inner {
                            dx[(o * k + j) * inner + i] = g[o * inner + i] / k as f64;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::SumAll(x) => vec![(*x, vec![g[0]; val(x).numel()])],
            Op::MeanAll(x) => {
                let n = val(x).numel();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(xs.len());
                for x in xs {
                    let ext = val(x).shape()[*axis];
                    let mut dx = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        dx.extend_from_slice(&g[base..base + ext * inner]);
                    }
                    offset += ext;
                    res.push((*x, dx));
                }
                res
            }
            Op::Slice { x, axis, start } => {
                let (outer, ext, inner) = split_axis(val(x).shape(), *axis);
                let len = out.shape()[*axis];
                let mut dx = vec![0.0; outer * ext * inner];
                for o in 0..outer {
                    let dst = (o * ext + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![(*x, dx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Repeat(x) => {
                let n = val(x).numel();
                let mut dx = vec![0.0; n];
                for chunk in g.chunks(n) {
                    dx.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                }
                vec![(*x, dx)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let w = out.last_dim();
                let xv = val(x).data();
                let gam = val(gamma).data();
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; w];
                let mut dbeta = vec![0.0; w];
                let mut xhat = vec![0.0; w];
                let mut dxhat = vec![0.0; w];
                for r in 0..g.len() / w {
                    let row = &xv[r * w..(r + 1) * w];
                    let gr = &g[r * w..(r + 1) * w];
                    let mean = row.iter().sum::<f64>() / w as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    for j in 0..w {
                        xhat[j] = (row[j] - mean) * inv;
                        dxhat[j] = gr[j] * gam[j];
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / w as f64;
                    let mean_dx =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                    for j in 0..w {
                        dx[r * w + j] = inv * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::CircConv(x, y) => {
                // out[k] = Σ_j x[j]·y[k−j]  ⇒  dx[j] = Σ_k g[k]·y[k−j], dy[m] = Σ_k g[k]·x[k−m]
                let n = out.last_dim();
                let (xv, yv) = (val(x).data(), val(y).data());
                let mut dx = vec![0.0; g.len()];
                let mut dy = vec![0.0; g.len()];
                for r in 0..g.len() / n {
                    let gr = &g[r * n..(r + 1) * n];
                    let xr = &xv[r * n..(r + 1) * n];
                    let yr = &yv[r * n..(r + 1) * n];
                    let dxr = circulant::circular_correlate(gr, yr);
                    let dyr = circulant::circular_correlate(gr, xr);
                    dx[r * n..(r + 1) * n].copy_from_slice(&dxr);
                    dy[r * n..(r + 1) * n].copy_from_slice(&dyr);
                }
                vec![(*x, dx), (*y, dy)]
            }
            Op::RowCosine(a, b, eps) => {
                let w = val(a).last_dim();
                let (av, bv) = (val(a).data(), val(b).data());
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for r in 0..g.len() {
                    let ra = &av[r * w..(r + 1) * w];
                    let rb = &bv[r * w..(r + 1) * w];
                    let raw_na = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let raw_nb = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let (na, nb) = (raw_na.max(*eps), raw_nb.max(*eps));
                    let cos = out.data()[r];
                    // floored norms are constants, so their derivative terms vanish
                    let ka = if raw_na > *eps { cos / (na * na) } else { 0.0 };
                    let kb = if raw_nb > *eps { cos / (nb * nb) } else { 0.0 };
                    for j in 0..w {
                        da[r * w + j] = g[r] * (rb[j] / (na * nb) - ka * ra[j]);
                        db[r * w + j] = g[r] * (ra[j] / (na * nb) - kb * rb[j]);
                    }
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Nll {
                probs,
                labels,
                floor,
            } => {
                let p = val(probs);
                let c = p.last_dim();
                let bsz = labels.len() as f64;
                let mut dp = vec![0.0; p.numel()];
                for (i, &l) in labels.iter().enumerate() {
                    let pv = p.data()[i * c + l];
                    if pv > *floor {
                        dp[i * c + l] = -g[0] / (bsz * pv);
                    }
                }
                vec![(*probs, dp)]
            }
            Op::Gather(table, ids) => {
                let w = val(table).last_dim();
                let mut dt = vec![0.0; val(table).numel()];
                for (j, &id) in ids.iter().enumerate() {
                    for c in 0..w {
                        dt[id * w + c] += g[j * w + c];
                    }
                }
                vec![(*table, dt)]
            }
            Op::Custom(x, _, backward) => {
                let upstream = Tensor::new(out.shape().to_vec(), g.to_vec())?;
                let dx = backward(val(x), out, &upstream);
                if dx.shape() != val(x).shape() {
                    return Err(CcpeError::Contract(format!(
                        "custom backward returned {:?} for input {:?}",
                        dx.shape(),
                        val(x).shape()
                    )));
                }
                vec![(*x, dx.into_data())]
            }
        };
        if grads.iter().any(|(_, d)| d.iter().any(|v| !v.is_finite())) {
            return Err(CcpeError::Numerical(format!(
                "non-finite gradient through `{}`",
                node.op.name()
            )));
        }
        Ok(grads)
    }
}

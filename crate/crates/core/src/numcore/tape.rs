//! Wengert-list reverse-mode differentiation.
//!
//! Every forward op appends one node holding its output value. `backward`
//! walks the node list in exact reverse order and accumulates gradients
//! additively into each input. Parameters enter through [`Tape::param`] and
//! map to at most one node per tape, so repeated use sums into one gradient.

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into};
use super::{NumError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Reduction axis. `Rows` collapses rows (output `1×c`), `Cols` collapses
/// columns (output `r×1`), `All` yields a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Reduce {
    Sum,
    Mean,
    Max,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Relu(Var),
    Square(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    NormalizeRows { x: Var, norms: Vec<f64>, floor: f64 },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    Reduce { x: Var, kind: Reduce, axis: Axis, argmax: Vec<usize> },
    Gather { x: Var, idx: Vec<usize>, scale: f64 },
    RepeatRows(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::ScaleBy(..) => "scale_by",
            Op::Scale(..) => "scale",
            Op::Offset(_) => "offset",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softplus(_) => "softplus",
            Op::Relu(_) => "relu",
            Op::Square(_) => "square",
            Op::Powf(..) => "powf",
            Op::Clamp(..) => "clamp",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::Reshape(_) => "reshape",
            Op::Reduce { .. } => "reduce",
            Op::Gather { .. } => "gather",
            Op::RepeatRows(_) => "repeat_rows",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Computation tape: the ordered record of executed ops.
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backpropagated: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// A tape without a parameter store; trainable inputs come from [`Tape::leaf`].
    pub fn new() -> Self {
        Self { params: None, param_vars: Vec::new(), nodes: Vec::new(), grads: Vec::new(), backpropagated: false }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self { params: Some(params), param_vars: vec![None; params.len()], ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var, NumError> {
        if !value.is_finite() {
            return Err(NumError::NonFinite { op: op.name() });
        }
        let requires_grad = self.inputs_require_grad(&op);
        Ok(self.push_raw(value, op, requires_grad, None))
    }

    fn inputs_require_grad(&self, op: &Op) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::ScaleBy(a, b) => rg(a) || rg(b),
            Op::LayerNorm { x, gain, bias, .. } => rg(x) || rg(gain) || rg(bias),
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.iter().any(rg),
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Offset(x)
            | Op::Softmax(x)
            | Op::Gelu(x)
            | Op::Sigmoid(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Softplus(x)
            | Op::Relu(x)
            | Op::Square(x)
            | Op::Powf(x, _)
            | Op::Clamp(x, ..)
            | Op::SliceCols(x, _)
            | Op::SliceRows(x, _)
            | Op::Reshape(x)
            | Op::RepeatRows(x)
            | Op::NormalizeRows { x, .. }
            | Op::Reduce { x, .. }
            | Op::Gather { x, .. } => rg(x),
        }
    }

    // ── leaves ───────────────────────────────────────────────────────────

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false, None)
    }

    /// A free input that receives gradient (used for op-level checks).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true, None)
    }

    /// Node for a stored parameter; frozen parameters become constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(id.0).copied().flatten() {
            return v;
        }
        let store = self.params.expect("tape has no parameter store");
        let entry = store.entry(id);
        let v = self.push_raw(entry.value.clone(), Op::Leaf, entry.trainable, Some(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Stop-gradient: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ── linear algebra ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let [m, k] = self.shape(a);
        let [n, k2] = self.shape(b);
        if k != k2 {
            return Err(NumError::Shape { op: "matmul_nt", detail: format!("{m}x{k} · ({n}x{k2})ᵀ") });
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::new(m, n, out)?, Op::MatMulNt(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumError> {
        let t = self.value(x).transpose();
        self.push(t, Op::Transpose(x))
    }

    // ── elementwise binary ───────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumError::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("add", a, b)?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("sub", a, b)?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("mul", a, b)?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(t, Op::Mul(a, b))
    }

    /// `x + b` with the `1×c` row `b` broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, NumError> {
        let [r, c] = self.shape(x);
        if self.shape(b) != [1, c] {
            return Err(NumError::Shape {
                op: "add_row",
                detail: format!("{r}x{c} + {:?}", self.shape(b)),
            });
        }
        let bias = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        self.push(t, Op::AddRow(x, b))
    }

    /// `x · s` for a `1×1` variable `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var, NumError> {
        if self.shape(s) != [1, 1] {
            return Err(NumError::Shape { op: "scale_by", detail: format!("scalar expected, got {:?}", self.shape(s)) });
        }
        let k = self.value(s).item();
        let t = self.value(x).map(|v| v * k);
        self.push(t, Op::ScaleBy(x, s))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var, NumError> {
        let t = self.value(x).map(|v| v * k);
        self.push(t, Op::Scale(x, k))
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var, NumError> {
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::Offset(x))
    }

    // ── normalizations ───────────────────────────────────────────────────

    /// Softmax along `axis` (`Cols` normalizes each row, `Rows` each column).
    pub fn softmax(&mut self, x: Var, axis: Axis) -> Result<Var, NumError> {
        match axis {
            Axis::Cols => {
                let t = softmax_rows(self.value(x));
                self.push(t, Op::Softmax(x))
            }
            Axis::Rows => {
                let xt = self.transpose(x)?;
                let s = self.softmax(xt, Axis::Cols)?;
                self.transpose(s)
            }
            Axis::All => Err(NumError::Invalid("softmax over all elements is not supported".into())),
        }
    }

    /// Row-wise layer normalization with population variance and affine
    /// `gain`/`bias` rows of length `c`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumError> {
        let [r, c] = self.shape(x);
        if c < 2 {
            return Err(NumError::Shape { op: "layer_norm", detail: format!("last axis must be >= 2, got {c}") });
        }
        if self.shape(gain) != [1, c] || self.shape(bias) != [1, c] {
            return Err(NumError::Shape {
                op: "layer_norm",
                detail: format!("affine {:?}/{:?} for width {c}", self.shape(gain), self.shape(bias)),
            });
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        self.push(Tensor::new(r, c, out)?, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    /// Each row divided by `max(‖row‖, floor)`; zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var, floor: f64) -> Result<Var, NumError> {
        let [r, c] = self.shape(x);
        let mut t = self.value(x).clone();
        let mut norms = Vec::with_capacity(r);
        for row in t.data_mut().chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = n.max(floor);
            row.iter_mut().for_each(|v| *v /= d);
            norms.push(n);
        }
        self.push(t, Op::NormalizeRows { x, norms, floor })
    }

    // ── elementwise unary ────────────────────────────────────────────────

    /// GELU, tanh form.
    pub fn gelu(&mut self, x: Var) -> Result<Var, NumError> {
        let t = self.value(x).map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()));
        self.push(t, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumError> {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, NumError> {
        let t = self.value(x).map(f64::exp);
        self.push(t, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, NumError> {
        let t = self.value(x).map(f64::ln);
        self.push(t, Op::Log(x))
    }

    /// `ln(1 + eˣ)`, overflow-safe.
    pub fn softplus(&mut self, x: Var) -> Result<Var, NumError> {
        let t = self.value(x).map(softplus);
        self.push(t, Op::Softplus(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumError> {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var, NumError> {
        let t = self.value(x).map(|v| v * v);
        self.push(t, Op::Square(x))
    }

    /// `xᵖ` for nonnegative `x`; `p = 0` yields ones with zero gradient.
    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var, NumError> {
        let t = self.value(x).map(|v| if p == 0.0 { 1.0 } else { v.powf(p) });
        self.push(t, Op::Powf(x, p))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, NumError> {
        let t = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(t, Op::Clamp(x, lo, hi))
    }

    // ── structure ────────────────────────────────────────────────────────

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let r = self.shape(*parts.first().ok_or(NumError::Invalid("concat of nothing".into()))?)[0];
        if parts.iter().any(|&p| self.shape(p)[0] != r) {
            return Err(NumError::Shape { op: "concat_cols", detail: "row counts differ".into() });
        }
        let c: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(Tensor::new(r, c, out)?, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let c = self.shape(*parts.first().ok_or(NumError::Invalid("concat of nothing".into()))?)[1];
        if parts.iter().any(|&p| self.shape(p)[1] != c) {
            return Err(NumError::Shape { op: "concat_rows", detail: "column counts differ".into() });
        }
        let r: usize = parts.iter().map(|&p| self.shape(p)[0]).sum();
        let mut out = Vec::with_capacity(r * c);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::new(r, c, out)?, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var, NumError> {
        let [r, c] = self.shape(x);
        if width == 0 || start + width > c {
            return Err(NumError::Shape { op: "slice_cols", detail: format!("{start}+{width} of {c}") });
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&src.row(i)[start..start + width]);
        }
        self.push(Tensor::new(r, width, out)?, Op::SliceCols(x, start))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let r = self.shape(x)[0];
        if len == 0 || start + len > r {
            return Err(NumError::Shape { op: "slice_rows", detail: format!("{start}+{len} of {r}") });
        }
        let t = self.value(x).slice_rows(start, len);
        self.push(t, Op::SliceRows(x, start))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var, NumError> {
        let t = self.value(x).reshaped(rows, cols)?;
        self.push(t, Op::Reshape(x))
    }

    /// Stacks `n` copies of the `1×c` row `x`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var, NumError> {
        let [r, c] = self.shape(x);
        if r != 1 || n == 0 {
            return Err(NumError::Shape { op: "repeat_rows", detail: format!("{r}x{c} repeated {n}") });
        }
        let row = self.value(x).data().to_vec();
        let t = Tensor::new(n, c, row.repeat(n))?;
        self.push(t, Op::RepeatRows(x))
    }

    // ── reductions ───────────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var, axis: Axis) -> Result<Var, NumError> {
        self.reduce(x, Reduce::Sum, axis)
    }

    pub fn mean(&mut self, x: Var, axis: Axis) -> Result<Var, NumError> {
        self.reduce(x, Reduce::Mean, axis)
    }

    /// Maximum; ties resolve to the first index.
    pub fn max(&mut self, x: Var, axis: Axis) -> Result<Var, NumError> {
        self.reduce(x, Reduce::Max, axis)
    }

    fn reduce(&mut self, x: Var, kind: Reduce, axis: Axis) -> Result<Var, NumError> {
        let src = self.value(x);
        let [r, c] = src.shape();
        // groups[g] lists flat indices reduced into output g
        let (out_shape, groups): ([usize; 2], Vec<Vec<usize>>) = match axis {
            Axis::All => ([1, 1], vec![(0..r * c).collect()]),
            Axis::Rows => ([1, c], (0..c).map(|j| (0..r).map(|i| i * c + j).collect()).collect()),
            Axis::Cols => ([r, 1], (0..r).map(|i| (0..c).map(|j| i * c + j).collect()).collect()),
        };
        let d = src.data();
        let mut out = Vec::with_capacity(groups.len());
        let mut argmax = Vec::new();
        for g in &groups {
            match kind {
                Reduce::Sum => out.push(g.iter().map(|&k| d[k]).sum()),
                Reduce::Mean => out.push(g.iter().map(|&k| d[k]).sum::<f64>() / g.len() as f64),
                Reduce::Max => {
                    let best = g.iter().copied().fold(g[0], |b, k| if d[k] > d[b] { k } else { b });
                    argmax.push(best);
                    out.push(d[best]);
                }
            }
        }
        let t = Tensor::new(out_shape[0], out_shape[1], out)?;
        self.push(t, Op::Reduce { x, kind, axis, argmax })
    }

    /// Mean of the `k` largest elements (flattened); ties resolve to the
    /// lower flat index.
    pub fn top_k_mean(&mut self, x: Var, k: usize) -> Result<Var, NumError> {
        let d = self.value(x).data();
        if k == 0 || k > d.len() {
            return Err(NumError::Invalid(format!("top-k with k={k} over {} elements", d.len())));
        }
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
        order.truncate(k);
        let mean = order.iter().map(|&i| d[i]).sum::<f64>() / k as f64;
        self.push(Tensor::scalar(mean), Op::Gather { x, idx: order, scale: 1.0 / k as f64 })
    }

    // ── composites ───────────────────────────────────────────────────────

    /// `x · w + b` for `w: in×out`, `b: 1×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumError> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    /// Cosine similarity between every row of `a` and every row of `b`
    /// (`r×p` output). Norms are floored at `floor`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var, floor: f64) -> Result<Var, NumError> {
        let an = self.normalize_rows(a, floor)?;
        let bn = self.normalize_rows(b, floor)?;
        self.matmul_nt(an, bn)
    }

    /// Row-paired cosine similarity (`r×1`) of two same-shape matrices.
    pub fn cosine_rows(&mut self, a: Var, b: Var, floor: f64) -> Result<Var, NumError> {
        self.same_shape("cosine_rows", a, b)?;
        let an = self.normalize_rows(a, floor)?;
        let bn = self.normalize_rows(b, floor)?;
        let prod = self.mul(an, bn)?;
        self.sum(prod, Axis::Cols)
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse pass from the scalar `loss`. A second call without
    /// [`Tape::reset_grads`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumError> {
        if self.backpropagated {
            return Err(NumError::AlreadyBackpropagated);
        }
        if self.shape(loss) != [1, 1] {
            return Err(NumError::NotScalar(self.shape(loss)));
        }
        self.backpropagated = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                if !g.is_finite() {
                    return Err(NumError::NonFinite { op: "backward" });
                }
                self.propagate(node, &g, &mut grads)
                    .map_err(|e| match e {
                        NumError::NonFinite { .. } => NumError::NonFinite { op: node.op.name() },
                        other => other,
                    })?;
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backpropagated = false;
    }

    /// Gradients for every trainable parameter touched by this tape.
    pub fn param_grads(&self) -> Gradients {
        let n = self.params.map_or(0, ParamStore::len);
        let mut out = Gradients::with_len(n);
        for node_idx in self.param_vars.iter().flatten() {
            let node = &self.nodes[node_idx.0];
            if let (Some(id), true) = (node.param, node.requires_grad) {
                let g = self
                    .grads
                    .get(node_idx.0)
                    .and_then(Option::as_ref)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols()));
                out.accumulate(id, &g);
            }
        }
        out
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), NumError> {
        let nodes = &self.nodes;
        let val = |v: &Var| &nodes[v.0].value;
        let rg = |v: &Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor| -> Result<(), NumError> {
            if !nodes[v.0].requires_grad {
                return Ok(());
            }
            if !t.is_finite() {
                return Err(NumError::NonFinite { op: "backward" });
            }
            match &mut grads[v.0] {
                Some(a) => a.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
            Ok(())
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let [m, k] = val(a).shape();
                let n = val(b).cols();
                if rg(a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_nt_into(g.data(), val(b).data(), &mut ga, m, n, k);
                    acc(*a, Tensor::new(m, k, ga)?)?;
                }
                if rg(b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_tn_into(val(a).data(), g.data(), &mut gb, m, k, n);
                    acc(*b, Tensor::new(k, n, gb)?)?;
                }
            }
            Op::MatMulNt(a, b) => {
                let [m, k] = val(a).shape();
                let n = val(b).rows();
                if rg(a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_into(g.data(), val(b).data(), &mut ga, m, n, k);
                    acc(*a, Tensor::new(m, k, ga)?)?;
                }
                if rg(b) {
                    let mut gb = vec![0.0; n * k];
                    matmul_tn_into(g.data(), val(a).data(), &mut gb, m, n, k);
                    acc(*b, Tensor::new(n, k, gb)?)?;
                }
            }
            Op::Transpose(x) => acc(*x, g.transpose())?,
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                if rg(a) {
                    acc(*a, g.zip_map(val(b), |gv, bv| gv * bv))?;
                }
                if rg(b) {
                    acc(*b, g.zip_map(val(a), |gv, av| gv * av))?;
                }
            }
            Op::AddRow(x, b) => {
                acc(*x, g.clone())?;
                if rg(b) {
                    acc(*b, column_sums(g))?;
                }
            }
            Op::ScaleBy(x, s) => {
                let k = val(s).item();
                if rg(x) {
                    acc(*x, g.map(|v| v * k))?;
                }
                if rg(s) {
                    let dot: f64 = g.data().iter().zip(val(x).data()).map(|(a, b)| a * b).sum();
                    acc(*s, Tensor::scalar(dot))?;
                }
            }
            Op::Scale(x, k) => acc(*x, g.map(|v| v * k))?,
            Op::Offset(x) => acc(*x, g.clone())?,
            Op::Softmax(x) => {
                let c = y.cols();
                let mut gx = g.clone();
                for (gr, yr) in gx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (gv, yv) in gr.iter_mut().zip(yr) {
                        *gv = yv * (*gv - dot);
                    }
                }
                acc(*x, gx)?;
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let [r, c] = y.shape();
                let gd = g.data();
                if rg(gain) {
                    let mut gg = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += gd[i * c + j] * xhat[i * c + j];
                        }
                    }
                    acc(*gain, Tensor::new(1, c, gg)?)?;
                }
                if rg(bias) {
                    acc(*bias, column_sums(g))?;
                }
                if rg(x) {
                    let gain_v = val(gain).data();
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        let mut mean_gh = 0.0;
                        let mut mean_ghx = 0.0;
                        for j in 0..c {
                            let gh = gd[i * c + j] * gain_v[j];
                            mean_gh += gh;
                            mean_ghx += gh * xhat[i * c + j];
                        }
                        mean_gh /= c as f64;
                        mean_ghx /= c as f64;
                        for j in 0..c {
                            let gh = gd[i * c + j] * gain_v[j];
                            gx[i * c + j] = rstd[i] * (gh - mean_gh - xhat[i * c + j] * mean_ghx);
                        }
                    }
                    acc(*x, Tensor::new(r, c, gx)?)?;
                }
            }
            Op::Gelu(x) => {
                let d = val(x).map(|v| {
                    let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
                });
                acc(*x, g.zip_map(&d, |a, b| a * b))?;
            }
            Op::Sigmoid(x) => acc(*x, g.zip_map(y, |gv, s| gv * s * (1.0 - s)))?,
            Op::Exp(x) => acc(*x, g.zip_map(y, |gv, e| gv * e))?,
            Op::Log(x) => acc(*x, g.zip_map(val(x), |gv, v| gv / v))?,
            Op::Softplus(x) => acc(*x, g.zip_map(val(x), |gv, v| gv * sigmoid(v)))?,
            Op::Relu(x) => acc(*x, g.zip_map(val(x), |gv, v| if v > 0.0 { gv } else { 0.0 }))?,
            Op::Square(x) => acc(*x, g.zip_map(val(x), |gv, v| 2.0 * v * gv))?,
            Op::Powf(x, p) => {
                let p = *p;
                acc(*x, g.zip_map(val(x), |gv, v| if p == 0.0 { 0.0 } else { gv * p * v.powf(p - 1.0) }))?
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(*x, g.zip_map(val(x), |gv, v| if v >= lo && v <= hi { gv } else { 0.0 }))?
            }
            Op::NormalizeRows { x, norms, floor } => {
                let c = y.cols();
                let mut gx = g.clone();
                for ((gr, yr), &n) in gx.data_mut().chunks_mut(c).zip(y.data().chunks(c)).zip(norms) {
                    if n > *floor {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = (*gv - yv * dot) / n;
                        }
                    } else {
                        gr.iter_mut().for_each(|gv| *gv /= floor);
                    }
                }
                acc(*x, gx)?;
            }
            Op::ConcatCols(parts) => {
                let r = y.rows();
                let mut start = 0;
                for p in parts {
                    let w = val(p).cols();
                    if rg(p) {
                        let mut part = Vec::with_capacity(r * w);
                        for i in 0..r {
                            part.extend_from_slice(&g.row(i)[start..start + w]);
                        }
                        acc(*p, Tensor::new(r, w, part)?)?;
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = val(p).rows();
                    if rg(p) {
                        acc(*p, g.slice_rows(start, h))?;
                    }
                    start += h;
                }
            }
            Op::SliceCols(x, start) => {
                let [r, c] = val(x).shape();
                let w = y.cols();
                let mut gx = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..w {
                        gx.set(i, start + j, g.get(i, j));
                    }
                }
                acc(*x, gx)?;
            }
            Op::SliceRows(x, start) => {
                let [r, c] = val(x).shape();
                let mut gx = Tensor::zeros(r, c);
                gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*x, gx)?;
            }
            Op::Reshape(x) => {
                let [r, c] = val(x).shape();
                acc(*x, g.reshaped(r, c)?)?;
            }
            Op::RepeatRows(x) => acc(*x, column_sums(g))?,
            Op::Reduce { x, kind, axis, argmax } => {
                let [r, c] = val(x).shape();
                let mut gx = Tensor::zeros(r, c);
                let gd = g.data();
                let out = gx.data_mut();
                match kind {
                    Reduce::Max => {
                        for (k, &flat) in argmax.iter().enumerate() {
                            out[flat] += gd[k];
                        }
                    }
                    Reduce::Sum | Reduce::Mean => {
                        let n = match axis {
                            Axis::All => r * c,
                            Axis::Rows => r,
                            Axis::Cols => c,
                        };
                        let s = if *kind == Reduce::Mean { 1.0 / n as f64 } else { 1.0 };
                        for i in 0..r {
                            for j in 0..c {
                                let src = match axis {
                                    Axis::All => 0,
                                    Axis::Rows => j,
                                    Axis::Cols => i,
                                };
                                out[i * c + j] = gd[src] * s;
                            }
                        }
                    }
                }
                acc(*x, gx)?;
            }
            Op::Gather { x, idx, scale } => {
                let [r, c] = val(x).shape();
                let mut gx = Tensor::zeros(r, c);
                let gv = g.item() * scale;
                for &i in idx {
                    gx.data_mut()[i] += gv;
                }
                acc(*x, gx)?;
            }
        }
        Ok(())
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let c = g.cols();
    let mut out = vec![0.0; c];
    for row in g.data().chunks(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::new(1, c, out).expect("nonempty")
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

/// Numerically stable row softmax of a plain tensor.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node; node ids are assigned in creation order so
//! inputs always precede outputs and a single reverse sweep visits each node once.
//! A tape belongs to one training context and is not shared between threads.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{invalid, shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{
    axis_split, broadcast_indices, broadcast_shape, gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Sqrt,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    Transpose(Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Unary, Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Softmax(Var, usize),
    MaskedSoftmax(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows(Var, Vec<usize>),
    Im2col {
        x: Var,
        stride: usize,
    },
    Upsample2x(Var),
    Bilinear2x(Var),
    Downsample(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BceLogits {
        logits: Var,
        target: Arc<Tensor>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::MatmulNt(..) => "matmul_nt",
            Op::Transpose(..) => "transpose",
            Op::Binary(b, ..) => match b {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            },
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Unary(u, _) => match u {
                Unary::Relu => "relu",
                Unary::Sigmoid => "sigmoid",
                Unary::Tanh => "tanh",
                Unary::Exp => "exp",
                Unary::Log => "log",
                Unary::Sqrt => "sqrt",
            },
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::Softmax(..) => "softmax",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::GatherRows(..) => "gather_rows",
            Op::Im2col { .. } => "im2col",
            Op::Upsample2x(..) => "upsample2x",
            Op::Bilinear2x(..) => "bilinear2x",
            Op::Downsample(..) => "downsample",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BceLogits { .. } => "bce_with_logits",
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    grad_enabled: bool,
    nonfinite: Option<String>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            grad_enabled: true,
            nonfinite: None,
        }
    }

    /// A tape on which nothing requires gradient.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First op (if any) that produced a NaN or infinity.
    pub fn nonfinite_op(&self) -> Option<&str> {
        self.nonfinite.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some(format!("{} (node {})", op.name(), self.nodes.len()));
        }
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(id)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node, so a
    /// parameter shared by several sub-graphs accumulates one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push_arc(store.shared(id), Op::Leaf, true);
        self.param_nodes.insert(id, v);
        v
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Matmul(a, b), rg))
    }

    /// `a·bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatmulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), rg))
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb).map_err(|_| {
            shape_err(
                match kind {
                    Binary::Add => "add",
                    Binary::Sub => "sub",
                    Binary::Mul => "mul",
                    Binary::Div => "div",
                },
                &sa,
                &sb,
            )
        })?;
        let ia = broadcast_indices(&sa, &out_shape);
        let ib = broadcast_indices(&sb, &out_shape);
        let da = self.value(a).data();
        let db = self.value(b).data();
        let out: Vec<f64> = ia
            .iter()
            .zip(&ib)
            .map(|(&i, &j)| {
                let (x, y) = (da[i], db[j]);
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v * s);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v + s);
        let rg = self.rg(&[a]);
        self.push(t, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Relu => |v| if v > 0.0 { v } else { 0.0 },
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => f64::tanh,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Sqrt => f64::sqrt,
        };
        let t = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(t, Op::Unary(kind, a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(invalid(format!("sum_axis: axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::SumAxis(a, axis), rg))
    }

    /// Softmax along `axis`, subtracting each slice's maximum first.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(invalid(format!("softmax: axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mx = (0..n).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (src[at(k)] - mx).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[at(k)] /= z;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(a, axis), rg))
    }

    /// Softmax over the last axis restricted to positions where `valid` is true;
    /// invalid positions get exactly zero weight and no gradient.
    pub fn masked_softmax(&mut self, a: Var, valid: &[bool]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().expect("tensor has rank ≥ 1");
        if valid.len() != n {
            return Err(shape_err("masked_softmax", &shape, &[valid.len()]));
        }
        if !valid.iter().any(|&v| v) {
            return Err(invalid("masked_softmax: every position is masked"));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for (row, orow) in src.chunks(n).zip(out.chunks_mut(n)) {
            let mx = row
                .iter()
                .zip(valid)
                .filter(|(_, &ok)| ok)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..n {
                if valid[k] {
                    let e = (row[k] - mx).exp();
                    orow[k] = e;
                    z += e;
                }
            }
            for v in orow.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MaskedSoftmax(a), rg))
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = (*self.nodes[a.0].value).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid(format!("concat: axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let same_rank = s.len() == base.len();
            let compatible = same_rank
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut oshape = base;
        oshape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::Concat(parts.to_vec(), axis), rg))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(invalid(format!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::Slice { x: a, axis, start }, rg))
    }

    /// Row lookup into a `V×E` table (embedding).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, e) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(invalid("gather_rows: empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(invalid(format!("gather_rows: id {bad} out of range for {v} rows")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            out.extend_from_slice(&src[i * e..(i + 1) * e]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), e], out),
            Op::GatherRows(table, ids.to_vec()),
            rg,
        ))
    }

    // ---------------------------------------------------------------- spatial (H×W×C layout)

    /// Patches of a zero-padded 3×3 window: `H×W×C → (Ho·Wo)×(9·C)`, columns
    /// ordered (ky, kx, c). With stride `s`, `Ho = ⌈H/s⌉`.
    pub fn im2col3x3(&mut self, x: Var, stride: usize) -> Result<Var> {
        let (h, w, c) = self.value(x).dims3()?;
        if stride == 0 {
            return Err(invalid("im2col3x3: stride must be positive"));
        }
        let ho = (h - 1) / stride + 1;
        let wo = (w - 1) / stride + 1;
        let src = self.value(x).data();
        let mut out = vec![0.0; ho * wo * 9 * c];
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (oy * wo + ox) * 9 * c;
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let from = (iy as usize * w + ix as usize) * c;
                        let to = row + (ky * 3 + kx) * c;
                        out[to..to + c].copy_from_slice(&src[from..from + c]);
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![ho * wo, 9 * c], out),
            Op::Im2col { x, stride },
            rg,
        ))
    }

    /// Nearest-neighbour 2× upsampling of an `H×W×C` map.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = self.value(x).dims3()?;
        let src = self.value(x).data();
        let mut out = vec![0.0; 4 * h * w * c];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let from = ((y / 2) * w + xx / 2) * c;
                let to = (y * 2 * w + xx) * c;
                out[to..to + c].copy_from_slice(&src[from..from + c]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![2 * h, 2 * w, c], out), Op::Upsample2x(x), rg))
    }

    /// Bilinear 2× upsampling of an `H×W×C` map with half-pixel centres and
    /// clamped borders.
    pub fn bilinear2x(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = self.value(x).dims3()?;
        let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
        let src = self.value(x).data();
        let mut out = vec![0.0; 4 * h * w * c];
        for (y, wy) in ty.iter().enumerate() {
            for (xx, wx) in tx.iter().enumerate() {
                let to = (y * 2 * w + xx) * c;
                for &(iy, a) in wy {
                    for &(ix, b) in wx {
                        let from = (iy * w + ix) * c;
                        for k in 0..c {
                            out[to + k] += a * b * src[from + k];
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![2 * h, 2 * w, c], out), Op::Bilinear2x(x), rg))
    }

    /// Nearest-neighbour downsampling by an integer factor: output cell (i, j)
    /// takes input pixel (i·f, j·f).
    pub fn downsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (h, w, c) = self.value(x).dims3()?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(invalid(format!(
                "downsample: {h}×{w} is not divisible by factor {factor}"
            )));
        }
        let (ho, wo) = (h / factor, w / factor);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(ho * wo * c);
        for y in 0..ho {
            for xx in 0..wo {
                let from = (y * factor * w + xx * factor) * c;
                out.extend_from_slice(&src[from..from + c]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![ho, wo, c], out), Op::Downsample(x, factor), rg))
    }

    // ---------------------------------------------------------------- fused layers

    /// Layer normalisation over the last axis with affine `gamma`, `beta` (length C).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("rank ≥ 1");
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err("layer_norm", &shape, self.shape(gamma)));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / c;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for k in 0..c {
                let xh = (row[k] - mu) * is;
                xhat[r * c + k] = xh;
                out[r * c + k] = xh * g[k] + b[k];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy on logits, in the stable form
    /// `max(x,0) − x·t + ln(1 + e^{−|x|})`. Targets must be exactly 0 or 1.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return Err(shape_err("bce_with_logits", self.shape(logits), target.shape()));
        }
        if let Some(bad) = target.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(invalid(format!("bce_with_logits: target value {bad} is not 0 or 1")));
        }
        let x = self.value(logits).data();
        let n = x.len() as f64;
        let total: f64 = x
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BceLogits {
                logits,
                target: Arc::new(target.clone()),
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Gradients of a scalar loss with respect to every node that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_seeded(&[(loss, Tensor::scalar(1.0))])
    }

    /// Reverse sweep starting from arbitrary upstream gradients.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        if let Some(op) = &self.nonfinite {
            return Err(Error::NonFinite(op.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            if g.shape() != self.shape(*v) {
                return Err(shape_err("backward seed", self.shape(*v), g.shape()));
            }
            if self.nodes[v.0].requires_grad {
                self.accum(&mut grads, *v, |acc| {
                    for (a, b) in acc.iter_mut().zip(g.data()) {
                        *a += b;
                    }
                });
            }
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads: Vec<Option<Tensor>> = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g)))
            .collect();
        if let Some((i, _)) = grads
            .iter()
            .enumerate()
            .find(|(_, g)| g.as_ref().is_some_and(|g| !g.is_finite()))
        {
            return Err(Error::NonFinite(format!("gradient of node {i}")));
        }
        let mut params: Vec<(ParamId, Tensor)> = self
            .param_nodes
            .iter()
            .filter_map(|(&pid, v)| grads[v.0].clone().map(|g| (pid, g)))
            .collect();
        params.sort_by_key(|(pid, _)| *pid);
        Ok(Gradients { grads, params })
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("matrix");
                let n = self.value(*b).shape()[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                self.accum(grads, *a, |acc| gemm_nt_acc(g, bv, acc, m, n, k));
                self.accum(grads, *b, |acc| gemm_tn_acc(av, g, acc, m, k, n));
            }
            Op::MatmulNt(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("matrix");
                let n = self.value(*b).shape()[0];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                self.accum(grads, *a, |acc| gemm_acc(g, bv, acc, m, n, k));
                self.accum(grads, *b, |acc| gemm_tn_acc(g, av, acc, m, n, k));
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2().expect("matrix");
                self.accum(grads, *a, |acc| {
                    for r in 0..m {
                        for c in 0..n {
                            acc[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Binary(kind, a, b) => {
                let oshape = node.value.shape();
                let ia = broadcast_indices(self.shape(*a), oshape);
                let ib = broadcast_indices(self.shape(*b), oshape);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accum(grads, *a, |acc| {
                    for k in 0..g.len() {
                        acc[ia[k]] += match kind {
                            Binary::Add | Binary::Sub => g[k],
                            Binary::Mul => g[k] * bv[ib[k]],
                            Binary::Div => g[k] / bv[ib[k]],
                        };
                    }
                });
                self.accum(grads, *b, |acc| {
                    for k in 0..g.len() {
                        acc[ib[k]] += match kind {
                            Binary::Add => g[k],
                            Binary::Sub => -g[k],
                            Binary::Mul => g[k] * av[ia[k]],
                            Binary::Div => -g[k] * av[ia[k]] / (bv[ib[k]] * bv[ib[k]]),
                        };
                    }
                });
            }
            Op::Scale(a, s) => self.accum(grads, *a, |acc| {
                for (x, gi) in acc.iter_mut().zip(g) {
                    *x += gi * s;
                }
            }),
            Op::AddScalar(a) | Op::Reshape(a) => self.accum(grads, *a, |acc| {
                for (x, gi) in acc.iter_mut().zip(g) {
                    *x += gi;
                }
            }),
            Op::Unary(kind, a) => {
                let inp = self.value(*a).data();
                self.accum(grads, *a, |acc| {
                    for k in 0..g.len() {
                        let d = match kind {
                            Unary::Relu => {
                                if inp[k] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sigmoid => out[k] * (1.0 - out[k]),
                            Unary::Tanh => 1.0 - out[k] * out[k],
                            Unary::Exp => out[k],
                            Unary::Log => 1.0 / inp[k],
                            Unary::Sqrt => 0.5 / out[k],
                        };
                        acc[k] += g[k] * d;
                    }
                });
            }
            Op::Sum(a) => self.accum(grads, *a, |acc| acc.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.accum(grads, *a, |acc| acc.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::SumAxis(a, axis) => {
                let (outer, n, inner) = axis_split(self.shape(*a), *axis);
                self.accum(grads, *a, |acc| {
                    for o in 0..outer {
                        for k in 0..n {
                            for i in 0..inner {
                                acc[(o * n + k) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                self.accum(grads, *a, |acc| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let dot: f64 = (0..n).map(|k| g[at(k)] * out[at(k)]).sum();
                            for k in 0..n {
                                acc[at(k)] += out[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmax(a) => {
                let n = *node.value.shape().last().expect("rank ≥ 1");
                self.accum(grads, *a, |acc| {
                    for ((y, gr), ac) in out.chunks(n).zip(g.chunks(n)).zip(acc.chunks_mut(n)) {
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for k in 0..n {
                            ac[k] += y[k] * (gr[k] - dot);
                        }
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let n = self.shape(*p)[*axis];
                    self.accum(grads, *p, |acc| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * n * inner;
                            for k in 0..n * inner {
                                acc[dst + k] += g[src + k];
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                self.accum(grads, *x, |acc| {
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * len * inner;
                        for k in 0..len * inner {
                            acc[dst + k] += g[src + k];
                        }
                    }
                });
            }
            Op::GatherRows(table, ids) => {
                let e = self.shape(*table)[1];
                self.accum(grads, *table, |acc| {
                    for (r, &id) in ids.iter().enumerate() {
                        for k in 0..e {
                            acc[id * e + k] += g[r * e + k];
                        }
                    }
                });
            }
            Op::Im2col { x, stride } => {
                let (h, w, c) = self.value(*x).dims3().expect("rank 3");
                let ho = (h - 1) / stride + 1;
                let wo = (w - 1) / stride + 1;
                self.accum(grads, *x, |acc| {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let row = (oy * wo + ox) * 9 * c;
                            for ky in 0..3 {
                                let iy = (oy * stride + ky) as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let dst = (iy as usize * w + ix as usize) * c;
                                    let src = row + (ky * 3 + kx) * c;
                                    for k in 0..c {
                                        acc[dst + k] += g[src + k];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Upsample2x(x) => {
                let (h, w, c) = self.value(*x).dims3().expect("rank 3");
                self.accum(grads, *x, |acc| {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let dst = ((y / 2) * w + xx / 2) * c;
                            let src = (y * 2 * w + xx) * c;
                            for k in 0..c {
                                acc[dst + k] += g[src + k];
                            }
                        }
                    }
                });
            }
            Op::Bilinear2x(x) => {
                let (h, w, c) = self.value(*x).dims3().expect("rank 3");
                let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
                self.accum(grads, *x, |acc| {
                    for (y, wy) in ty.iter().enumerate() {
                        for (xx, wx) in tx.iter().enumerate() {
                            let src = (y * 2 * w + xx) * c;
                            for &(iy, a) in wy {
                                for &(ix, b) in wx {
                                    let dst = (iy * w + ix) * c;
                                    for k in 0..c {
                                        acc[dst + k] += a * b * g[src + k];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Downsample(x, f) => {
                let (_, w, c) = self.value(*x).dims3().expect("rank 3");
                let (ho, wo, _) = node.value.dims3().expect("rank 3");
                self.accum(grads, *x, |acc| {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let dst = (y * f * w + xx * f) * c;
                            let src = (y * wo + xx) * c;
                            for k in 0..c {
                                acc[dst + k] += g[src + k];
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = self.value(*gamma).len();
                let gm = self.value(*gamma).data();
                let rows = xhat.len() / c;
                self.accum(grads, *gamma, |acc| {
                    for r in 0..rows {
                        for k in 0..c {
                            acc[k] += g[r * c + k] * xhat[r * c + k];
                        }
                    }
                });
                self.accum(grads, *beta, |acc| {
                    for r in 0..rows {
                        for k in 0..c {
                            acc[k] += g[r * c + k];
                        }
                    }
                });
                self.accum(grads, *x, |acc| {
                    let cf = c as f64;
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let xr = &xhat[r * c..(r + 1) * c];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for k in 0..c {
                            let d = gr[k] * gm[k];
                            s1 += d;
                            s2 += d * xr[k];
                        }
                        for k in 0..c {
                            let d = gr[k] * gm[k];
                            acc[r * c + k] += inv_std[r] / cf * (cf * d - s1 - xr[k] * s2);
                        }
                    }
                });
            }
            Op::BceLogits { logits, target } => {
                let x = self.value(*logits).data();
                let n = x.len() as f64;
                self.accum(grads, *logits, |acc| {
                    for k in 0..x.len() {
                        acc[k] += g[0] * (sigmoid(x[k]) - target.data()[k]) / n;
                    }
                });
            }
        }
    }
}

/// Source indices and weights for each of the `2n` outputs of a bilinear 2×
/// resize along one axis.
pub(crate) fn bilinear_taps(n: usize) -> Vec<[(usize, f64); 2]> {
    (0..2 * n)
        .map(|o| {
            let i = o / 2;
            let other = if o % 2 == 0 { i.saturating_sub(1) } else { (i + 1).min(n - 1) };
            [(i, 0.75), (other, 0.25)]
        })
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient with respect to any node; `None` if it does not require grad or
    /// is disconnected from the seeds.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Parameter gradients in parameter order.
    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(ParamId, Tensor)> {
        self.params
    }
}

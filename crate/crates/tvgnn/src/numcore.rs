//! Dense tensor algebra with reverse-mode differentiation.
//!
//! Everything is 64-bit and tape-based: forward ops record themselves on a
//! [`Tape`] arena, `backward` replays the record in reverse and accumulates
//! gradients into every `requires_grad` leaf. A finite-difference
//! [`gradcheck`] closes the loop on every differentiable op.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum NumError {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, NumError>;

// ── Tensor ───────────────────────────────────────────────────────────

/// Dense row-major tensor. The universal numeric carrier of the crate.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    /// Populated by `Tape::backward` for leaves that require grad.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumError::Dim(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Mark as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

// ── Broadcasting helpers ─────────────────────────────────────────────

/// Right-aligned broadcast of two shapes (trailing-dimension rules).
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for d in 0..nd {
        let da = if d < nd - a.len() { 1 } else { a[d - (nd - a.len())] };
        let db = if d < nd - b.len() { 1 } else { b[d - (nd - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(NumError::Dim(format!(
                "shapes {:?} and {:?} are not broadcast-compatible",
                a, b
            )));
        }
        out[d] = da.max(db);
    }
    Ok(out)
}

/// Per-dimension element strides of `shape` against a broadcast target,
/// zero where the dimension is broadcast.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let offset = nd - shape.len();
    let mut natural = vec![0usize; shape.len()];
    let mut s = 1;
    for d in (0..shape.len()).rev() {
        natural[d] = s;
        s *= shape[d];
    }
    let mut strides = vec![0usize; nd];
    for d in offset..nd {
        if shape[d - offset] != 1 {
            strides[d] = natural[d - offset];
        }
    }
    strides
}

/// Odometer over `shape` driving two broadcast offsets. Calls `f(i, ao, bo)`
/// for every flat output index.
fn zip_broadcast(shape: &[usize], a_strides: &[usize], b_strides: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let numel: usize = shape.iter().product();
    let nd = shape.len();
    let mut coords = vec![0usize; nd];
    let (mut ao, mut bo) = (0usize, 0usize);
    for i in 0..numel {
        f(i, ao, bo);
        for d in (0..nd).rev() {
            coords[d] += 1;
            ao += a_strides[d];
            bo += b_strides[d];
            if coords[d] < shape[d] {
                break;
            }
            coords[d] = 0;
            ao -= a_strides[d] * shape[d];
            bo -= b_strides[d] * shape[d];
        }
    }
}

/// Raw 2D kernel: C[m,n] += A[m,k] · B[k,n].
fn matmul_accum(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// dA[m,k] += dC[m,n] · Bᵀ (B given row-major [k,n]).
fn matmul_grad_a(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        let da_row = &mut da[i * k..(i + 1) * k];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (dv, bv) in dc_row.iter().zip(b_row) {
                s += dv * bv;
            }
            da_row[p] += s;
        }
    }
}

/// dB[k,n] += Aᵀ · dC (A given row-major [m,k]).
fn matmul_grad_b(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let dc_row = &dc[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let db_row = &mut db[p * n..(p + 1) * n];
            for (dv, &gv) in db_row.iter_mut().zip(dc_row) {
                *dv += av * gv;
            }
        }
    }
}

// ── Tape ─────────────────────────────────────────────────────────────

/// Handle to a tensor living on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f64 },
    AddScalar { a: TensorId },
    Sigmoid { a: TensorId },
    Tanh { a: TensorId },
    Abs { a: TensorId },
    Sqrt { a: TensorId },
    Softmax { a: TensorId, axis: usize },
    Concat { inputs: Vec<TensorId>, axis: usize },
    Narrow { a: TensorId, axis: usize, start: usize },
    Reshape { a: TensorId },
    TransposeLast2 { a: TensorId },
    IndexSelect { a: TensorId, indices: Vec<usize> },
    SumAll { a: TensorId },
    SumAxis { a: TensorId, axis: usize },
    MeanAxis { a: TensorId, axis: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed differentiable operations.
///
/// Single-threaded per training step; replaying backward visits ops in exact
/// reverse execution order and accumulates (never overwrites) gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Register a leaf tensor (copied onto the tape).
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        let needs = t.requires_grad;
        self.push(t.clone(), Op::Leaf, needs)
    }

    /// Register a non-differentiable constant.
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<TensorId> {
        let t = Tensor::new(data, shape)?;
        Ok(self.push(t, Op::Leaf, false))
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].value.data
    }

    pub fn scalar(&self, id: TensorId) -> Result<f64> {
        let t = &self.nodes[id.0].value;
        if t.numel() != 1 {
            return Err(NumError::Contract(format!(
                "scalar read on tensor of shape {:?}",
                t.shape
            )));
        }
        Ok(t.data[0])
    }

    /// Gradient of a node after `backward`, if one was accumulated.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { value, op, needs_grad });
        id
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// All ops funnel through here so the finite-value invariant holds after
    /// every operation on finite inputs.
    fn emit(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, needs: bool, what: &str) -> Result<TensorId> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(NumError::NonFinite(what.to_string()));
        }
        Ok(self.push(
            Tensor {
                shape,
                data,
                requires_grad: false,
                grad: None,
            },
            op,
            needs,
        ))
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn binary(&mut self, a: TensorId, b: TensorId, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<f64>, Vec<usize>)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).map_err(|e| NumError::Dim(format!("{what}: {e}")))?;
        let mut out = vec![0.0; out_shape.iter().product()];
        if sa == sb {
            let (da, db) = (self.data(a), self.data(b));
            for ((o, &x), &y) in out.iter_mut().zip(da).zip(db) {
                *o = f(x, y);
            }
        } else {
            let astr = broadcast_strides(&sa, &out_shape);
            let bstr = broadcast_strides(&sb, &out_shape);
            let (da, db) = (self.data(a), self.data(b));
            zip_broadcast(&out_shape, &astr, &bstr, |i, ao, bo| out[i] = f(da[ao], db[bo]));
        }
        Ok((out, out_shape))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (out, shape) = self.binary(a, b, "add", |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        self.emit(out, shape, Op::Add { a, b }, needs, "add")
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (out, shape) = self.binary(a, b, "sub", |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        self.emit(out, shape, Op::Sub { a, b }, needs, "sub")
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (out, shape) = self.binary(a, b, "mul", |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        self.emit(out, shape, Op::Mul { a, b }, needs, "mul")
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (out, shape) = self.binary(a, b, "div", |x, y| x / y)?;
        let needs = self.needs(a) || self.needs(b);
        self.emit(out, shape, Op::Div { a, b }, needs, "div")
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.emit(out, shape, Op::Scale { a, c }, needs, "scale")
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.emit(out, shape, Op::AddScalar { a }, needs, "add_scalar")
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.emit(out, shape, Op::Sigmoid { a }, needs, "sigmoid")
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.emit(out, shape, Op::Tanh { a }, needs, "tanh")
    }

    pub fn abs(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| x.abs()).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.emit(out, shape, Op::Abs { a }, needs, "abs")
    }

    pub fn sqrt(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| x.sqrt()).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.emit(out, shape, Op::Sqrt { a }, needs, "sqrt")
    }

    // ── Matmul ───────────────────────────────────────────────────────

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(NumError::Dim(format!(
                "matmul requires rank >= 2 operands, got {:?} and {:?}",
                sa, sb
            )));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(NumError::Dim(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                sa, sb
            )));
        }
        let batch = broadcast_shape(&sa[..sa.len() - 2], &sb[..sb.len() - 2])
            .map_err(|_| NumError::Dim(format!("matmul batch dims incompatible: {:?} x {:?}", sa, sb)))?;
        let astr = broadcast_strides(&sa[..sa.len() - 2], &batch)
            .iter()
            .map(|s| s * m * k)
            .collect::<Vec<_>>();
        let bstr = broadcast_strides(&sb[..sb.len() - 2], &batch)
            .iter()
            .map(|s| s * kb * n)
            .collect::<Vec<_>>();
        let nbatch: usize = batch.iter().product();
        let mut out = vec![0.0; nbatch * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            let mut i = 0usize;
            zip_broadcast(&batch, &astr, &bstr, |_, ao, bo| {
                matmul_accum(&da[ao..ao + m * k], &db[bo..bo + k * n], &mut out[i..i + m * n], m, k, n);
                i += m * n;
            });
        }
        let mut shape = batch;
        shape.push(m);
        shape.push(n);
        let needs = self.needs(a) || self.needs(b);
        self.emit(out, shape, Op::Matmul { a, b }, needs, "matmul")
    }

    // ── Structure ops ────────────────────────────────────────────────

    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(NumError::Dim(format!(
                "softmax axis {} out of bounds for shape {:?}",
                axis, shape
            )));
        }
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..lane {
                    mx = mx.max(src[base + l * inner]);
                }
                let mut sum = 0.0;
                for l in 0..lane {
                    let e = (src[base + l * inner] - mx).exp();
                    out[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..lane {
                    out[base + l * inner] /= sum;
                }
            }
        }
        let needs = self.needs(a);
        self.emit(out, shape, Op::Softmax { a, axis }, needs, "softmax")
    }

    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(NumError::Contract("concat of zero tensors".into()));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(NumError::Dim(format!(
                "concat axis {} out of bounds for shape {:?}",
                axis, first
            )));
        }
        let mut axis_total = 0usize;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(NumError::Dim(format!(
                    "concat shapes must agree off-axis: {:?} vs {:?}",
                    first, s
                )));
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; shape.iter().product()];
        let mut col = 0usize;
        for &id in inputs {
            let len = self.shape(id)[axis];
            let src = self.data(id);
            for o in 0..outer {
                let dst = &mut out[(o * axis_total + col) * inner..(o * axis_total + col + len) * inner];
                dst.copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            col += len;
        }
        let needs = inputs.iter().any(|&i| self.needs(i));
        self.emit(out, shape, Op::Concat { inputs: inputs.to_vec(), axis }, needs, "concat")
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(NumError::Dim(format!(
                "narrow [{start}, {start}+{len}) on axis {axis} of shape {:?}",
                shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let lane = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src = self.data(a);
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            out[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&src[(o * lane + start) * inner..(o * lane + start + len) * inner]);
        }
        let needs = self.needs(a);
        self.emit(out, out_shape, Op::Narrow { a, axis, start }, needs, "narrow")
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(NumError::Dim(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(a),
                shape
            )));
        }
        let out = self.data(a).to_vec();
        let needs = self.needs(a);
        self.emit(out, shape.to_vec(), Op::Reshape { a }, needs, "reshape")
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(NumError::Dim(format!("transpose needs rank >= 2, got {:?}", shape)));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch: usize = shape[..shape.len() - 2].iter().product();
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for bi in 0..batch {
            let off = bi * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[off + j * r + i] = src[off + i * c + j];
                }
            }
        }
        let mut out_shape = shape.clone();
        let nd = out_shape.len();
        out_shape.swap(nd - 2, nd - 1);
        let needs = self.needs(a);
        self.emit(out, out_shape, Op::TransposeLast2 { a }, needs, "transpose")
    }

    /// Gather rows (axis 0) by index; duplicates allowed.
    pub fn index_select(&mut self, a: TensorId, indices: &[usize]) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(NumError::Dim("index_select on rank-0 tensor".into()));
        }
        let rows = shape[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(NumError::Contract(format!(
                "index {} out of range for {} rows",
                bad, rows
            )));
        }
        let inner: usize = shape[1..].iter().product();
        let src = self.data(a);
        let mut out = vec![0.0; indices.len() * inner];
        for (j, &i) in indices.iter().enumerate() {
            out[j * inner..(j + 1) * inner].copy_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let needs = self.needs(a);
        self.emit(out, out_shape, Op::IndexSelect { a, indices: indices.to_vec() }, needs, "index_select")
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let s: f64 = self.data(a).iter().sum();
        let needs = self.needs(a);
        self.emit(vec![s], vec![1], Op::SumAll { a }, needs, "sum_all")
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping it as an extent-1 dimension.
    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(NumError::Dim(format!(
                "sum axis {} out of bounds for shape {:?}",
                axis, shape
            )));
        }
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..lane {
                let base = (o * lane + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let needs = self.needs(a);
        self.emit(out, out_shape, Op::SumAxis { a, axis }, needs, "sum_axis")
    }

    /// Mean along `axis`, keeping it as an extent-1 dimension.
    pub fn mean_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(NumError::Dim(format!(
                "mean axis {} out of bounds for shape {:?}",
                axis, shape
            )));
        }
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..lane {
                let base = (o * lane + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let inv = 1.0 / lane as f64;
        for v in &mut out {
            *v *= inv;
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let needs = self.needs(a);
        self.emit(out, out_shape, Op::MeanAxis { a, axis }, needs, "mean_axis")
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        let mut lifted = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let mut s = vec![1];
            s.extend_from_slice(self.shape(id));
            lifted.push(self.reshape(id, &s)?);
        }
        self.concat(&lifted, 0)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// `requires_grad` leaf; the op record is cleared afterward.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.consumed {
            return Err(NumError::Contract("tape already consumed by backward".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(NumError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        self.grads = vec![None; n];
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let g = match self.grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[idx].op.clone();
            self.propagate(idx, &op, &g)?;
            // Leaves keep their gradient; interior grads are dropped.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                if self.nodes[idx].value.requires_grad {
                    self.nodes[idx].value.grad = Some(g.clone());
                }
                self.grads[idx] = Some(g);
            }
        }
        // Clear the record: a second backward over the same ops is an error.
        for node in &mut self.nodes {
            node.op = Op::Leaf;
        }
        self.consumed = true;
        Ok(())
    }

    fn accum(&mut self, id: TensorId, contrib: &[f64]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = &mut self.grads[id.0];
        match slot {
            Some(g) => {
                for (gv, &c) in g.iter_mut().zip(contrib) {
                    *gv += c;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    fn accum_raw(&mut self, id: TensorId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let numel = self.nodes[id.0].value.numel();
        let slot = &mut self.grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; numel]);
        }
        f(slot.as_mut().unwrap());
    }

    fn binary_backward(
        &mut self,
        out_idx: usize,
        a: TensorId,
        b: TensorId,
        g: &[f64],
        fa: impl Fn(f64, f64, f64) -> f64,
        fb: impl Fn(f64, f64, f64) -> f64,
    ) {
        let out_shape = self.nodes[out_idx].value.shape.clone();
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let astr = broadcast_strides(&sa, &out_shape);
        let bstr = broadcast_strides(&sb, &out_shape);
        let na: usize = sa.iter().product();
        let nb: usize = sb.iter().product();
        let mut da = vec![0.0; na];
        let mut db = vec![0.0; nb];
        {
            let va = &self.nodes[a.0].value.data;
            let vb = &self.nodes[b.0].value.data;
            zip_broadcast(&out_shape, &astr, &bstr, |i, ao, bo| {
                da[ao] += fa(g[i], va[ao], vb[bo]);
                db[bo] += fb(g[i], va[ao], vb[bo]);
            });
        }
        self.accum(a, &da);
        self.accum(b, &db);
    }

    fn propagate(&mut self, out_idx: usize, op: &Op, g: &[f64]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.binary_backward(out_idx, a, b, g, |g, _, _| g, |g, _, _| g);
            }
            Op::Sub { a, b } => {
                self.binary_backward(out_idx, a, b, g, |g, _, _| g, |g, _, _| -g);
            }
            Op::Mul { a, b } => {
                self.binary_backward(out_idx, a, b, g, |g, _, y| g * y, |g, x, _| g * x);
            }
            Op::Div { a, b } => {
                self.binary_backward(out_idx, a, b, g, |g, _, y| g / y, |g, x, y| -g * x / (y * y));
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = g.iter().map(|&v| v * c).collect();
                self.accum(a, &da);
            }
            Op::AddScalar { a } => {
                self.accum(a, g);
            }
            Op::Sigmoid { a } => {
                let y = &self.nodes[out_idx].value.data;
                let da: Vec<f64> = g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (1.0 - yv)).collect();
                self.accum(a, &da);
            }
            Op::Tanh { a } => {
                let y = &self.nodes[out_idx].value.data;
                let da: Vec<f64> = g.iter().zip(y).map(|(&gv, &yv)| gv * (1.0 - yv * yv)).collect();
                self.accum(a, &da);
            }
            Op::Abs { a } => {
                let x = &self.nodes[a.0].value.data;
                let da: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| gv * if xv > 0.0 { 1.0 } else if xv < 0.0 { -1.0 } else { 0.0 })
                    .collect();
                self.accum(a, &da);
            }
            Op::Sqrt { a } => {
                let y = &self.nodes[out_idx].value.data;
                let da: Vec<f64> = g.iter().zip(y).map(|(&gv, &yv)| gv * 0.5 / yv).collect();
                self.accum(a, &da);
            }
            Op::Matmul { a, b } => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch = broadcast_shape(&sa[..sa.len() - 2], &sb[..sb.len() - 2]).expect("checked in forward");
                let astr: Vec<usize> = broadcast_strides(&sa[..sa.len() - 2], &batch)
                    .iter()
                    .map(|s| s * m * k)
                    .collect();
                let bstr: Vec<usize> = broadcast_strides(&sb[..sb.len() - 2], &batch)
                    .iter()
                    .map(|s| s * k * n)
                    .collect();
                let na: usize = sa.iter().product();
                let nb: usize = sb.iter().product();
                let mut da = vec![0.0; na];
                let mut db = vec![0.0; nb];
                {
                    let va = &self.nodes[a.0].value.data;
                    let vb = &self.nodes[b.0].value.data;
                    let need_a = self.nodes[a.0].needs_grad;
                    let need_b = self.nodes[b.0].needs_grad;
                    let mut off = 0usize;
                    zip_broadcast(&batch, &astr, &bstr, |_, ao, bo| {
                        let gc = &g[off..off + m * n];
                        if need_a {
                            matmul_grad_a(gc, &vb[bo..bo + k * n], &mut da[ao..ao + m * k], m, k, n);
                        }
                        if need_b {
                            matmul_grad_b(&va[ao..ao + m * k], gc, &mut db[bo..bo + k * n], m, k, n);
                        }
                        off += m * n;
                    });
                }
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::Softmax { a, axis } => {
                let shape = self.nodes[out_idx].value.shape.clone();
                let lane = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..axis].iter().product();
                let y = self.nodes[out_idx].value.data.clone();
                let mut da = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * lane * inner + i;
                        let mut dot = 0.0;
                        for l in 0..lane {
                            let p = base + l * inner;
                            dot += g[p] * y[p];
                        }
                        for l in 0..lane {
                            let p = base + l * inner;
                            da[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                self.accum(a, &da);
            }
            Op::Concat { ref inputs, axis } => {
                let out_shape = self.nodes[out_idx].value.shape.clone();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[axis];
                let mut col = 0usize;
                for &id in inputs {
                    let len = self.shape(id)[axis];
                    let numel = self.nodes[id.0].value.numel();
                    let mut part = vec![0.0; numel];
                    for o in 0..outer {
                        part[o * len * inner..(o + 1) * len * inner]
                            .copy_from_slice(&g[(o * total + col) * inner..(o * total + col + len) * inner]);
                    }
                    self.accum(id, &part);
                    col += len;
                }
            }
            Op::Narrow { a, axis, start } => {
                let in_shape = self.shape(a).to_vec();
                let out_shape = self.nodes[out_idx].value.shape.clone();
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let lane = in_shape[axis];
                let len = out_shape[axis];
                self.accum_raw(a, |da| {
                    for o in 0..outer {
                        for (l, gchunk) in g[o * len * inner..(o + 1) * len * inner].chunks(inner).enumerate() {
                            let dst = &mut da[(o * lane + start + l) * inner..(o * lane + start + l + 1) * inner];
                            for (dv, &gv) in dst.iter_mut().zip(gchunk) {
                                *dv += gv;
                            }
                        }
                    }
                });
            }
            Op::Reshape { a } => {
                self.accum(a, g);
            }
            Op::TransposeLast2 { a } => {
                let out_shape = self.nodes[out_idx].value.shape.clone();
                let nd = out_shape.len();
                let (r, c) = (out_shape[nd - 2], out_shape[nd - 1]);
                let batch: usize = out_shape[..nd - 2].iter().product();
                let mut da = vec![0.0; g.len()];
                for bi in 0..batch {
                    let off = bi * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            da[off + j * r + i] = g[off + i * c + j];
                        }
                    }
                }
                self.accum(a, &da);
            }
            Op::IndexSelect { a, ref indices } => {
                let inner: usize = self.shape(a)[1..].iter().product();
                self.accum_raw(a, |da| {
                    for (j, &i) in indices.iter().enumerate() {
                        let src = &g[j * inner..(j + 1) * inner];
                        let dst = &mut da[i * inner..(i + 1) * inner];
                        for (dv, &gv) in dst.iter_mut().zip(src) {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::SumAll { a } => {
                let numel = self.nodes[a.0].value.numel();
                let da = vec![g[0]; numel];
                self.accum(a, &da);
            }
            Op::SumAxis { a, axis } => {
                let in_shape = self.shape(a).to_vec();
                let lane = in_shape[axis];
                let inner: usize = in_shape[axis + 1..].iter().product();
                let outer: usize = in_shape[..axis].iter().product();
                self.accum_raw(a, |da| {
                    for o in 0..outer {
                        for l in 0..lane {
                            let base = (o * lane + l) * inner;
                            for i in 0..inner {
                                da[base + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::MeanAxis { a, axis } => {
                let in_shape = self.shape(a).to_vec();
                let lane = in_shape[axis];
                let inner: usize = in_shape[axis + 1..].iter().product();
                let outer: usize = in_shape[..axis].iter().product();
                let inv = 1.0 / lane as f64;
                self.accum_raw(a, |da| {
                    for o in 0..outer {
                        for l in 0..lane {
                            let base = (o * lane + l) * inner;
                            for i in 0..inner {
                                da[base + i] += g[o * inner + i] * inv;
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

// ── Gradient checking ────────────────────────────────────────────────

/// Max relative error between analytic and central-difference gradients of a
/// scalar-valued function of one tensor.
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    gradcheck_multi(|tape, ids| f(tape, ids[0]), std::slice::from_ref(x), eps)
}

/// As [`gradcheck`] but over several independent inputs; returns the worst
/// relative error across all coordinates of all inputs.
pub fn gradcheck_multi<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = xs
        .iter()
        .map(|x| {
            let mut t = x.clone();
            t.requires_grad = true;
            tape.leaf(&t)
        })
        .collect();
    let loss = f(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(xs)
        .map(|(&id, x)| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<TensorId> = perturbed.iter().map(|x| t.leaf(x)).collect();
        let l = f(&mut t, &ids)?;
        t.scalar(l)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = xs
        .iter()
        .map(|x| {
            let mut t = x.clone();
            t.requires_grad = false;
            t
        })
        .collect();
    for i in 0..xs.len() {
        for c in 0..xs[i].numel() {
            let orig = work[i].data[c];
            work[i].data[c] = orig + eps;
            let fp = eval(&work)?;
            work[i].data[c] = orig - eps;
            let fm = eval(&work)?;
            work[i].data[c] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let ana = analytic[i][c];
            let err = (ana - numeric).abs() / 1.0_f64.max(ana.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    /// Independent triple-loop oracle.
    fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(&Tensor::eye(2));
        let b = tape.leaf(&t(&[3.0, 4.0, 5.0, 6.0], &[2, 2]));
        let c = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.data(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_inner_product() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1.0, 2.0], &[1, 2]));
        let b = tape.leaf(&t(&[3.0, 4.0], &[2, 1]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let expect = matmul_oracle(&a, &b, 3, 4, 2);
        let mut tape = Tape::new();
        let ia = tape.leaf(&t(&a, &[3, 4]));
        let ib = tape.leaf(&t(&b, &[4, 2]));
        let ic = tape.matmul(ia, ib).unwrap();
        for (x, y) in tape.data(ic).iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_broadcast_batches() {
        // [2,2,3] @ [3,2] broadcasts the weight over the batch axis.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let ia = tape.leaf(&t(&a, &[2, 2, 3]));
        let ib = tape.leaf(&t(&b, &[3, 2]));
        let ic = tape.matmul(ia, ib).unwrap();
        assert_eq!(tape.shape(ic), &[2, 2, 2]);
        for bi in 0..2 {
            let expect = matmul_oracle(&a[bi * 6..(bi + 1) * 6], &b, 2, 3, 2);
            for (x, y) in tape.data(ic)[bi * 4..(bi + 1) * 4].iter().zip(&expect) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "message was: {err}");
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[0.0, 0.0, 0.0], &[3]));
        let y = tape.softmax(x, 0).unwrap();
        for v in tape.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_stable_under_large_inputs() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1000.0, 0.0], &[2]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.data(y);
        assert!((d[0] - 1.0).abs() < 1e-300);
        assert!(d[1] >= 0.0 && d[1] < 1e-300);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let x = [1.0f64, 2.0, 3.0];
        let mx = 3.0;
        let exps: Vec<f64> = x.iter().map(|v| (v - mx).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let expect: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        let mut tape = Tape::new();
        let ix = tape.leaf(&t(&x, &[3]));
        let iy = tape.softmax(ix, 0).unwrap();
        for (a, b) in tape.data(iy).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_on_a_leading_axis() {
        // Columns, not rows, must normalize when axis = 0.
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1.0, 5.0, -2.0, 2.0, 0.0, 1.0], &[2, 3]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.data(y);
        for col in 0..3 {
            let total = d[col] + d[3 + col];
            assert!((total - 1.0).abs() < 1e-12);
        }
        // Against the direct formula on column 0.
        let (a, b) = (1.0f64, 2.0f64);
        let mx = b;
        let z = (a - mx).exp() + (b - mx).exp();
        assert!((d[0] - (a - mx).exp() / z).abs() < 1e-15);
    }

    #[test]
    fn gradcheck_broadcast_matmul() {
        // A batched left operand against a shared right operand exercises the
        // gradient reduction over broadcast batch dimensions.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a: Vec<f64> = (0..2 * 3 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..2 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = gradcheck_multi(
            |tape, ids| {
                let p = tape.matmul(ids[0], ids[1])?;
                let sq = tape.mul(p, p)?;
                tape.sum_all(sq)
            },
            &[t(&a, &[2, 3, 2]), t(&b, &[2, 4])],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn elementwise_basics() {
        let mut tape = Tape::new();
        let z = tape.leaf(&t(&[0.0], &[1]));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.data(s), &[0.5]);
        let th = tape.tanh(z).unwrap();
        assert_eq!(tape.data(th), &[0.0]);
        let a = tape.leaf(&Tensor::zeros(&[2, 2]));
        let b = tape.leaf(&Tensor::zeros(&[2, 3]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 5]);
    }

    #[test]
    fn broadcast_add_row_vector() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]));
        let b = tape.leaf(&t(&[10.0, 20.0], &[2]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.data(c), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn incompatible_broadcast_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[2, 2]));
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn backward_quadratic() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[1.0, 2.0, 3.0], &[3]).with_grad());
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_sigmoid_at_zero() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[0.0], &[1]).with_grad());
        let s = tape.sigmoid(w).unwrap();
        let loss = tape.sum_all(s).unwrap();
        tape.backward(loss).unwrap();
        assert!((tape.grad(w).unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_accumulates_through_diamond() {
        // f = (w + w) · c must see both paths into w.
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[1.5], &[1]).with_grad());
        let c = tape.leaf(&t(&[3.0], &[1]));
        let ww = tape.add(w, w).unwrap();
        let prod = tape.mul(ww, c).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[1.0, 2.0], &[2]).with_grad());
        let y = tape.mul(w, w).unwrap();
        assert!(matches!(tape.backward(y), Err(NumError::Contract(_))));
    }

    #[test]
    fn backward_consumes_tape() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[1.0], &[1]).with_grad());
        let loss = tape.sum_all(w).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.backward(loss).is_err());
    }

    #[test]
    fn gradcheck_sum_of_squares() {
        let x = t(&[0.3, -1.2, 2.0], &[3]);
        let err = gradcheck(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                tape.sum_all(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn gradcheck_constant_function_vanishes() {
        // sum(softmax(x)) == 1 identically; both gradients vanish up to the
        // rounding floor of the central difference.
        let x = t(&[0.5, -0.25, 1.0], &[3]);
        let err = gradcheck(
            |tape, x| {
                let s = tape.softmax(x, 0)?;
                tape.sum_all(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "err = {err}");
    }

    #[test]
    fn gradcheck_every_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut rand_t = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            Tensor::new(data, shape).unwrap()
        };

        let x = rand_t(&[2, 3]);
        let y = rand_t(&[2, 3]);
        let w = rand_t(&[3, 4]);

        let cases: Vec<(&str, Box<dyn Fn(&mut Tape, &[TensorId]) -> Result<TensorId>>)> = vec![
            ("add", Box::new(|t, ids| {
                let s = t.add(ids[0], ids[1])?;
                let m = t.mul(s, s)?;
                t.sum_all(m)
            })),
            ("sub", Box::new(|t, ids| {
                let s = t.sub(ids[0], ids[1])?;
                let m = t.mul(s, s)?;
                t.sum_all(m)
            })),
            ("mul", Box::new(|t, ids| {
                let s = t.mul(ids[0], ids[1])?;
                t.sum_all(s)
            })),
            ("div", Box::new(|t, ids| {
                let four = t.add_scalar(ids[1], 5.0)?; // keep denominators away from 0
                let s = t.div(ids[0], four)?;
                t.sum_all(s)
            })),
            ("sigmoid", Box::new(|t, ids| {
                let s = t.sigmoid(ids[0])?;
                t.sum_all(s)
            })),
            ("tanh", Box::new(|t, ids| {
                let s = t.tanh(ids[0])?;
                t.sum_all(s)
            })),
            ("softmax", Box::new(|t, ids| {
                let s = t.softmax(ids[0], 1)?;
                let m = t.mul(s, ids[1])?;
                t.sum_all(m)
            })),
            ("concat", Box::new(|t, ids| {
                let c = t.concat(&[ids[0], ids[1]], 1)?;
                let m = t.mul(c, c)?;
                t.sum_all(m)
            })),
            ("narrow", Box::new(|t, ids| {
                let nrw = t.narrow(ids[0], 1, 1, 2)?;
                let m = t.mul(nrw, nrw)?;
                t.sum_all(m)
            })),
            ("transpose", Box::new(|t, ids| {
                let tr = t.transpose_last2(ids[0])?;
                let m = t.mul(tr, tr)?;
                t.sum_all(m)
            })),
            ("index_select", Box::new(|t, ids| {
                let sel = t.index_select(ids[0], &[1, 0, 1])?;
                let m = t.mul(sel, sel)?;
                t.sum_all(m)
            })),
            ("sum_axis", Box::new(|t, ids| {
                let s = t.sum_axis(ids[0], 1)?;
                let m = t.mul(s, s)?;
                t.sum_all(m)
            })),
            ("mean_axis", Box::new(|t, ids| {
                let s = t.mean_axis(ids[0], 0)?;
                let m = t.mul(s, s)?;
                t.sum_all(m)
            })),
            ("sqrt", Box::new(|t, ids| {
                let pos = t.mul(ids[0], ids[0])?;
                let pos = t.add_scalar(pos, 1.0)?;
                let s = t.sqrt(pos)?;
                t.sum_all(s)
            })),
            ("abs", Box::new(|t, ids| {
                let s = t.abs(ids[0])?;
                t.sum_all(s)
            })),
        ];
        for (name, f) in &cases {
            let err = gradcheck_multi(f, &[x.clone(), y.clone()], 1e-5).unwrap();
            assert!(err < 1e-4, "{name}: relative error {err}");
        }

        // matmul with a second operand of different shape
        let err = gradcheck_multi(
            |t, ids| {
                let p = t.matmul(ids[0], ids[1])?;
                let m = t.mul(p, p)?;
                t.sum_all(m)
            },
            &[x.clone(), w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "matmul: relative error {err}");
    }

    #[test]
    fn stack_builds_leading_axis() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1.0, 2.0], &[2]));
        let b = tape.leaf(&t(&[3.0, 4.0], &[2]));
        let s = tape.stack(&[a, b]).unwrap();
        assert_eq!(tape.shape(s), &[2, 2]);
        assert_eq!(tape.data(s), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1.0, 0.0], &[2]));
        let b = tape.leaf(&t(&[0.0, 0.0], &[2]));
        assert!(matches!(tape.div(a, b), Err(NumError::NonFinite(_))));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn matmul_agrees_with_oracle(m in 1usize..8, k in 1usize..8, n in 1usize..8, seed in 0u64..200) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-3.0..3.0)).collect();
                let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-3.0..3.0)).collect();
                let expect = matmul_oracle(&a, &b, m, k, n);
                let mut tape = Tape::new();
                let ia = tape.leaf(&Tensor::new(a, &[m, k]).unwrap());
                let ib = tape.leaf(&Tensor::new(b, &[k, n]).unwrap());
                let ic = tape.matmul(ia, ib).unwrap();
                for (x, y) in tape.data(ic).iter().zip(&expect) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }

            #[test]
            fn softmax_rows_sum_to_one_and_shift_invariant(rows in 1usize..5, cols in 1usize..6, shift in -50.0f64..50.0, seed in 0u64..200) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-5.0..5.0)).collect();
                let shifted: Vec<f64> = data.iter().map(|v| v + shift).collect();
                let mut tape = Tape::new();
                let a = tape.leaf(&Tensor::new(data, &[rows, cols]).unwrap());
                let b = tape.leaf(&Tensor::new(shifted, &[rows, cols]).unwrap());
                let sa = tape.softmax(a, 1).unwrap();
                let sb = tape.softmax(b, 1).unwrap();
                for r in 0..rows {
                    let row = &tape.data(sa)[r * cols..(r + 1) * cols];
                    let total: f64 = row.iter().sum();
                    prop_assert!((total - 1.0).abs() < 1e-12);
                }
                for (x, y) in tape.data(sa).iter().zip(tape.data(sb)) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}

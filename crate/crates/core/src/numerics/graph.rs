//! Explicit computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep. Parameters are
//! registered by name; registering the same name twice within one graph
//! returns the existing node, which lets several forward passes share
//! parameters and accumulate their gradients.

use std::collections::{BTreeMap, HashMap};

use super::tensor::{gemm, log_softmax, Tensor};
use super::NumericsError;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Transpose(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    LogSoftmax(Var),
    Gather(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    StopGradient(Var),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    Attention(Box<AttentionOp>),
}

#[derive(Clone, Debug)]
struct AttentionOp {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    segments: Vec<usize>,
    /// Row-major causal attention weights per (segment, head), `T x T` each.
    probs: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    named: HashMap<String, Var>,
    params: Vec<(String, Var)>,
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    params: BTreeMap<String, Tensor>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for every registered parameter; parameters the loss does not
    /// reach (or reaches only through a stop-gradient) map to zeros.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Gradient of the loss with respect to an arbitrary node, if any flowed.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Tanh-approximated GELU, bit-identical to the graph's `gelu` op.
pub fn gelu(x: f64) -> f64 {
    gelu_parts(x).0
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const K: f64 = 0.044_715;
    let inner = C * (x + K * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * K * x * x);
    (y, dy)
}

fn mat_dims(t: &Tensor) -> Result<(usize, usize), NumericsError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        [c] => Ok((1, *c)),
        s => Err(NumericsError::Shape(format!("expected a matrix, got {s:?}"))),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Source node of a stop-gradient, if `v` is one.
    pub fn detached_source(&self, v: Var) -> Option<Var> {
        match self.nodes[v.0].op {
            Op::StopGradient(src) => Some(src),
            _ => None,
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Trainable leaf. Re-registering a name returns the existing node.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        self.input(name, true, || value)
    }

    /// Named leaf, trainable or frozen. The value closure only runs the first
    /// time the name is seen in this graph.
    pub fn input(&mut self, name: &str, trainable: bool, value: impl FnOnce() -> Tensor) -> Var {
        if let Some(&v) = self.named.get(name) {
            return v;
        }
        let op = if trainable { Op::Param } else { Op::Constant };
        let v = self.push(value(), op, trainable);
        self.named.insert(name.to_string(), v);
        if trainable {
            self.params.push((name.to_string(), v));
        }
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NumericsError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NumericsError::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, k), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = mat_dims(self.value(a))?;
        let (kb, n) = mat_dims(self.value(b))?;
        if k != kb {
            return Err(NumericsError::Shape(format!("matmul: [{m},{k}] x [{kb},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), (m, k), false, self.value(b).data(), (k, n), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `x·W + b` with `x: [R, in]`, `W: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let (r, k) = mat_dims(self.value(x))?;
        let (kw, n) = mat_dims(self.value(w))?;
        if k != kw || self.value(b).numel() != n {
            return Err(NumericsError::Shape(format!(
                "affine: x [{r},{k}], w [{kw},{n}], b {:?}",
                self.value(b).shape()
            )));
        }
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(r * n);
        for _ in 0..r {
            out.extend_from_slice(bias);
        }
        gemm(self.value(x).data(), (r, k), false, self.value(w).data(), (k, n), false, &mut out, true);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![r, n], out)?, Op::Affine(x, w, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (r, c) = mat_dims(self.value(a))?;
        let t = self.value(a).clone().reshape(vec![r, c])?.transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| gelu_parts(x).0);
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(v, Op::Log(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = log_softmax(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::LogSoftmax(a), rg))
    }

    /// Picks `x[r, index[r]]` for every row `r`.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(a);
        let cols = t.last_dim();
        if index.len() != t.rows() {
            return Err(NumericsError::Shape(format!(
                "gather: {} indices for {} rows",
                index.len(),
                t.rows()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= cols) {
            return Err(NumericsError::IndexOutOfRange { index: bad, len: cols });
        }
        let data: Vec<f64> = index.iter().enumerate().map(|(r, &c)| t.at(r, c)).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![index.len()], data)?, Op::Gather(a, index.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        let rg = self.rg(&[a]);
        self.push(v, Op::Mean(a), rg)
    }

    /// Row sums over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let cols = t.last_dim();
        let data: Vec<f64> = t.data().chunks(cols).map(|r| r.iter().sum()).collect();
        let v = Tensor::vector(data);
        let rg = self.rg(&[a]);
        self.push(v, Op::SumLast(a), rg)
    }

    /// Identity on values; blocks all gradient flow to `a`.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::StopGradient(a), false)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let cols = match parts.first() {
            Some(&p) => self.value(p).last_dim(),
            None => return Err(NumericsError::Shape("concat of nothing".into())),
        };
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.last_dim() != cols {
                return Err(NumericsError::Shape(format!(
                    "concat_rows: width {} vs {cols}",
                    t.last_dim()
                )));
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / cols;
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(a);
        let n = t.rows();
        let mut data = Vec::with_capacity(rows.len() * t.last_dim());
        for &r in rows {
            if r >= n {
                return Err(NumericsError::IndexOutOfRange { index: r, len: n });
            }
            data.extend_from_slice(t.row(r));
        }
        let cols = t.last_dim();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![rows.len(), cols], data)?, Op::SelectRows(a, rows.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let t = self.value(a);
        let cols = t.last_dim();
        if len == 0 || start + len > cols {
            return Err(NumericsError::Shape(format!("slice_cols {start}+{len} of {cols}")));
        }
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![rows, len], data)?, Op::SliceCols(a, start, len), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).rows(),
            None => return Err(NumericsError::Shape("concat of nothing".into())),
        };
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(NumericsError::Shape("concat_cols: row mismatch".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).last_dim()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![rows, total], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[N, d]`; rows are split into consecutive sequences
    /// of the given lengths, and position `i` of a sequence attends to
    /// positions `0..=i` of the same sequence only. Head `h` uses columns
    /// `h*d/heads .. (h+1)*d/heads`; scores are scaled by `1/sqrt(d/heads)`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[usize],
    ) -> Result<Var, NumericsError> {
        let (n, d) = mat_dims(self.value(q))?;
        for x in [k, v] {
            if mat_dims(self.value(x))? != (n, d) {
                return Err(NumericsError::Shape("attention: q, k, v shapes differ".into()));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(NumericsError::Shape(format!("attention: {heads} heads for width {d}")));
        }
        if segments.iter().sum::<usize>() != n || segments.contains(&0) {
            return Err(NumericsError::Shape(format!("attention: segments {segments:?} for {n} rows")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(segments.iter().map(|t| t * t).sum::<usize>() * heads);
        let mut start = 0;
        for &t in segments {
            for h in 0..heads {
                let c0 = h * dh;
                let base = probs.len();
                probs.resize(base + t * t, 0.0);
                for i in 0..t {
                    let qi = &qv[(start + i) * d + c0..(start + i) * d + c0 + dh];
                    let row = &mut probs[base + i * t..base + i * t + t];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &kv[(start + j) * d + c0..(start + j) * d + c0 + dh];
                        let sc = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                        row[j] = sc;
                        max = max.max(sc);
                    }
                    let mut total = 0.0;
                    for x in row[..=i].iter_mut() {
                        *x = (*x - max).exp();
                        total += *x;
                    }
                    for x in row[..=i].iter_mut() {
                        *x /= total;
                    }
                    let oi = &mut out[(start + i) * d + c0..(start + i) * d + c0 + dh];
                    for (j, &p) in row[..=i].iter().enumerate() {
                        let vj = &vv[(start + j) * d + c0..(start + j) * d + c0 + dh];
                        oi.iter_mut().zip(vj).for_each(|(o, x)| *o += p * x);
                    }
                }
            }
            start += t;
        }
        let rg = self.rg(&[q, k, v]);
        let op = AttentionOp { q, k, v, heads, segments: segments.to_vec(), probs };
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::Attention(Box::new(op)), rg))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        let mut params = BTreeMap::new();
        for (name, v) in &self.params {
            let g = grads[v.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
            params.insert(name.clone(), g);
        }
        Ok(Gradients { params, nodes: grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.value(v).shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), NumericsError> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Constant | Op::Param | Op::StopGradient(_) => {}
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if let Some(s) = self.slot(grads, v) {
                        s.iter_mut().zip(gd).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(gd).for_each(|(x, y)| *x += y);
                }
                if let Some(s) = self.slot(grads, *b) {
                    s.iter_mut().zip(gd).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(grads, *a) {
                    for ((x, y), w) in s.iter_mut().zip(gd).zip(vb) {
                        *x += y * w;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for ((x, y), w) in s.iter_mut().zip(gd).zip(va) {
                        *x += y * w;
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(gd).for_each(|(x, y)| *x += k * y);
                }
            }
            Op::MatMul(a, b) => {
                let da = mat_dims(self.value(*a))?;
                let db = mat_dims(self.value(*b))?;
                let (m, n) = (da.0, db.1);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(s) = self.slot(grads, *a) {
                    gemm(gd, (m, n), false, bv, db, true, s, true);
                }
                if let Some(s) = self.slot(grads, *b) {
                    gemm(av, da, true, gd, (m, n), false, s, true);
                }
            }
            Op::Affine(x, w, b) => {
                let dx = mat_dims(self.value(*x))?;
                let dw = mat_dims(self.value(*w))?;
                let (r, n) = (dx.0, dw.1);
                if let Some(s) = self.slot(grads, *x) {
                    gemm(gd, (r, n), false, self.value(*w).data(), dw, true, s, true);
                }
                if let Some(s) = self.slot(grads, *w) {
                    gemm(self.value(*x).data(), dx, true, gd, (r, n), false, s, true);
                }
                if let Some(s) = self.slot(grads, *b) {
                    for row in gd.chunks(n) {
                        s.iter_mut().zip(row).for_each(|(acc, y)| *acc += y);
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = mat_dims(self.value(*a))?;
                if let Some(s) = self.slot(grads, *a) {
                    // g has shape [c, r]
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += gd[j * r + i];
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                if let Some(s) = self.slot(grads, *a) {
                    for ((acc, y), &x) in s.iter_mut().zip(gd).zip(av) {
                        *acc += y * gelu_parts(x).1;
                    }
                }
            }
            Op::Exp(a) => {
                let out = node.value.data();
                if let Some(s) = self.slot(grads, *a) {
                    for ((acc, y), o) in s.iter_mut().zip(gd).zip(out) {
                        *acc += y * o;
                    }
                }
            }
            Op::Log(a) => {
                let av = self.value(*a).data();
                if let Some(s) = self.slot(grads, *a) {
                    for ((acc, y), x) in s.iter_mut().zip(gd).zip(av) {
                        *acc += y / x;
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let out = &node.value;
                let cols = out.last_dim();
                if let Some(s) = self.slot(grads, *a) {
                    for ((srow, grow), orow) in
                        s.chunks_mut(cols).zip(gd.chunks(cols)).zip(out.data().chunks(cols))
                    {
                        let total: f64 = grow.iter().sum();
                        for ((acc, y), o) in srow.iter_mut().zip(grow).zip(orow) {
                            *acc += y - o.exp() * total;
                        }
                    }
                }
            }
            Op::Gather(a, index) => {
                let cols = self.value(*a).last_dim();
                if let Some(s) = self.slot(grads, *a) {
                    for (r, &c) in index.iter().enumerate() {
                        s[r * cols + c] += gd[r];
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().for_each(|x| *x += gd[0]);
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().for_each(|x| *x += gd[0] / n);
                }
            }
            Op::SumLast(a) => {
                let cols = self.value(*a).last_dim();
                if let Some(s) = self.slot(grads, *a) {
                    for (row, y) in s.chunks_mut(cols).zip(gd) {
                        row.iter_mut().for_each(|x| *x += y);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(s) = self.slot(grads, p) {
                        s.iter_mut().zip(&gd[offset..offset + n]).for_each(|(x, y)| *x += y);
                    }
                    offset += n;
                }
            }
            Op::SelectRows(a, rows) => {
                let cols = self.value(*a).last_dim();
                if let Some(s) = self.slot(grads, *a) {
                    for (k, &r) in rows.iter().enumerate() {
                        let src = &gd[k * cols..(k + 1) * cols];
                        s[r * cols..(r + 1) * cols].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::SliceCols(a, start, len) => {
                let cols = self.value(*a).last_dim();
                if let Some(s) = self.slot(grads, *a) {
                    for (r, src) in gd.chunks(*len).enumerate() {
                        let dst = &mut s[r * cols + start..r * cols + start + len];
                        dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Attention(att) => self.attention_backward(att, gd, grads),
            Op::ConcatCols(parts) => {
                let total = node.value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if let Some(s) = self.slot(grads, p) {
                        for (r, dst) in s.chunks_mut(w).enumerate() {
                            let src = &gd[r * total + offset..r * total + offset + w];
                            dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += w;
                }
            }
        }
        Ok(())
    }
}

impl Graph {
    fn attention_backward(&self, att: &AttentionOp, gd: &[f64], grads: &mut [Option<Tensor>]) {
        let (n, d) = (self.value(att.q).rows(), self.value(att.q).last_dim());
        let dh = d / att.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(att.q).data(), self.value(att.k).data(), self.value(att.v).data());
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut ds = Vec::new();
        let (mut start, mut base) = (0, 0);
        for &t in &att.segments {
            for h in 0..att.heads {
                let c0 = h * dh;
                let p = &att.probs[base..base + t * t];
                for i in 0..t {
                    let goi = &gd[(start + i) * d + c0..(start + i) * d + c0 + dh];
                    // dP_ij = dO_i . V_j, then the softmax Jacobian
                    ds.clear();
                    let mut dot = 0.0;
                    for j in 0..=i {
                        let vj = &vv[(start + j) * d + c0..(start + j) * d + c0 + dh];
                        let dp = goi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                        ds.push(dp);
                        dot += dp * p[i * t + j];
                    }
                    for j in 0..=i {
                        let pij = p[i * t + j];
                        let dsij = pij * (ds[j] - dot) * scale;
                        let r_i = (start + i) * d + c0;
                        let r_j = (start + j) * d + c0;
                        for c in 0..dh {
                            dv[r_j + c] += pij * goi[c];
                            dq[r_i + c] += dsij * kv[r_j + c];
                            dk[r_j + c] += dsij * qv[r_i + c];
                        }
                    }
                }
                base += t * t;
            }
            start += t;
        }
        for (x, g) in [(att.q, dq), (att.k, dk), (att.v, dv)] {
            if let Some(s) = self.slot(grads, x) {
                s.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
        }
    }
}

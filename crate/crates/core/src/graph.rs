//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in creation order, which is already a topological
//! order, so `backward` walks the tape once in reverse.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub const RMS_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10000.0;
const BCE_CLIP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Head layout for attention and rotary embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Heads {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Var),
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    RmsNorm(Var, Var),
    Rope { x: Var, positions: Vec<usize>, d_head: usize },
    Attention { q: Var, k: Var, v: Var, heads: Heads, probs: Vec<f64>, tk: usize },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows(Var, Vec<usize>),
    ScatterAddRows { base: Var, src: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    Pick(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Bce { scores: Var, targets: Vec<f64> },
    ForwardKl { student: Var, teacher: Vec<f64>, probs: Vec<f64> },
    LogSumExpRows(Var),
    Mse(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation. Values are immutable once recorded.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dim_err(msg: String) -> Error {
    Error::Dimension(msg)
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf. Gradients are tracked iff the tensor has `requires_grad` set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = t.with_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    /// A parameter leaf: gradients are tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        let t = t.with_requires_grad(true);
        self.push(t, Op::Leaf, true)
    }

    /// Copies a value out of the graph as a gradient-free constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(dim_err(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let out = tensor::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`; a linear layer with weight stored as `[out × in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(dim_err(format!("linear {m}x{k} by ({n}x{k2})ᵀ")));
        }
        let out = tensor::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::Transpose(a), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(dim_err(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip_map(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|x| f(*x)).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(&[a]);
        self.push(t, op, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    /// Multiplies row `t` of `x` by `s[t]`; `s` holds one value per row.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let rows = self.value(x).rows();
        if self.value(s).len() != rows {
            return Err(dim_err(format!(
                "scale_rows: {} scales for {rows} rows",
                self.value(s).len()
            )));
        }
        let c = self.value(x).cols();
        let mut out = self.value(x).clone().with_requires_grad(false);
        out.set_grad(None);
        let sv = self.value(s).data().to_vec();
        for (t, f) in sv.iter().enumerate() {
            for v in out.row_mut(t) {
                *v *= f;
            }
        }
        debug_assert_eq!(out.cols(), c);
        let ng = self.ng(&[x, s]);
        Ok(self.push(out, Op::ScaleRows(x, s), ng))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, Op::Silu(a), |x| x / (1.0 + (-x).exp()))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), gelu)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = tensor::softmax(self.value(a));
        let ng = self.ng(&[a]);
        self.push(t, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let c = src.cols();
        let mut out = Tensor::zeros(src.shape());
        for i in 0..src.rows() {
            let row = src.row(i);
            let lse = tensor::logsumexp_row(row);
            for (o, v) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    pub fn rmsnorm(&mut self, x: Var, w: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(w).len() != d {
            return Err(dim_err(format!("rmsnorm weight {} for width {d}", self.value(w).len())));
        }
        let src = self.value(x);
        let wv = self.value(w).data();
        let mut out = Tensor::zeros(src.shape());
        for i in 0..src.rows() {
            let row = src.row(i);
            let r = rms(row);
            for ((o, v), wj) in out.row_mut(i).iter_mut().zip(row).zip(wv) {
                *o = v / r * wj;
            }
        }
        let ng = self.ng(&[x, w]);
        Ok(self.push(out, Op::RmsNorm(x, w), ng))
    }

    /// Rotary embedding on every `d_head`-wide head of each row, rotating
    /// adjacent dimension pairs by the row's absolute position.
    pub fn rope(&mut self, x: Var, positions: &[usize], d_head: usize) -> Result<Var> {
        let src = self.value(x);
        if src.rows() != positions.len() || d_head % 2 != 0 || src.cols() % d_head != 0 {
            return Err(dim_err(format!(
                "rope: {} rows, {} positions, width {}, d_head {d_head}",
                src.rows(),
                positions.len(),
                src.cols()
            )));
        }
        let mut out = src.clone().with_requires_grad(false);
        out.set_grad(None);
        for (i, &p) in positions.iter().enumerate() {
            rope_row(out.row_mut(i), p, d_head, false);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Rope { x, positions: positions.to_vec(), d_head }, ng))
    }

    /// Scaled dot-product attention with grouped key/value heads. Query row
    /// `i` sees key row `j` iff `k_pos[j] <= q_pos[i]`. Rotary embedding is
    /// expected to have been applied already.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        q_pos: &[usize],
        k_pos: &[usize],
        heads: Heads,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let Heads { n_heads, n_kv_heads, d_head } = heads;
        let tq = qv.rows();
        let tk = kv.rows();
        if qv.cols() != n_heads * d_head
            || kv.cols() != n_kv_heads * d_head
            || vv.cols() != n_kv_heads * d_head
            || vv.rows() != tk
            || q_pos.len() != tq
            || k_pos.len() != tk
            || n_kv_heads == 0
            || n_heads % n_kv_heads != 0
        {
            return Err(dim_err(format!(
                "attention q {:?} k {:?} v {:?} with {heads:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        let (out, probs) = attention_forward(qv.data(), kv.data(), vv.data(), q_pos, k_pos, tq, tk, heads)?;
        let ng = self.ng(&[q, k, v]);
        let t = Tensor::new(vec![tq, n_heads * d_head], out)?;
        Ok(self.push(t, Op::Attention { q, k, v, heads, probs, tk }, ng))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = tv.dims2()?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index(format!("token id {id} >= vocab {vocab}")));
            }
            data.extend_from_slice(tv.row(id));
        }
        let ng = self.ng(&[table]);
        Ok(self.push(Tensor::new(vec![ids.len(), d], data)?, Op::Embedding { table, ids: ids.to_vec() }, ng))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let c = src.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= src.rows() {
                return Err(Error::Index(format!("row {i} of {}", src.rows())));
            }
            data.extend_from_slice(src.row(i));
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(vec![idx.len(), c], data)?, Op::GatherRows(x, idx.to_vec()), ng))
    }

    /// `base` with `src[i]` added to row `idx[i]`.
    pub fn scatter_add_rows(&mut self, base: Var, src: Var, idx: &[usize]) -> Result<Var> {
        let (b, s) = (self.value(base), self.value(src));
        if b.cols() != s.cols() || s.rows() != idx.len() {
            return Err(dim_err(format!("scatter {:?} into {:?}", s.shape(), b.shape())));
        }
        let mut out = b.clone().with_requires_grad(false);
        out.set_grad(None);
        for (r, &i) in idx.iter().enumerate() {
            if i >= out.rows() {
                return Err(Error::Index(format!("row {i} of {}", out.rows())));
            }
            let srow = s.row(r).to_vec();
            for (o, v) in out.row_mut(i).iter_mut().zip(srow) {
                *o += v;
            }
        }
        let ng = self.ng(&[base, src]);
        Ok(self.push(out, Op::ScatterAddRows { base, src, idx: idx.to_vec() }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|p| self.value(*p).cols()).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != c {
                return Err(dim_err("concat_rows: width mismatch".into()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::new(vec![rows, c], data)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Picks `x[t, cols[t]]` for every row, giving a vector.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if cols.len() != src.rows() {
            return Err(dim_err("pick: one column per row".into()));
        }
        let mut data = Vec::with_capacity(cols.len());
        for (t, &c) in cols.iter().enumerate() {
            if c >= src.cols() {
                return Err(Error::Index(format!("column {c} of {}", src.cols())));
            }
            data.push(src.at(t, c));
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::vector(data), Op::Pick(x, cols.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let mut t = self.value(x).clone().with_requires_grad(false).reshape(shape)?;
        t.set_grad(None);
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Mean token negative log-likelihood.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        let (t, v) = l.dims2()?;
        if targets.len() != t {
            return Err(dim_err(format!("{} targets for {t} rows", targets.len())));
        }
        let mut probs = vec![0.0; t * v];
        let mut loss = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            if y >= v {
                return Err(Error::Index(format!("target {y} >= vocab {v}")));
            }
            let row = l.row(i);
            loss += tensor::logsumexp_row(row) - row[y];
            tensor::softmax_row(row, &mut probs[i * v..(i + 1) * v]);
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / t as f64),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            ng,
        ))
    }

    /// Mean binary cross-entropy of scores in (0,1) against 0/1 targets,
    /// with scores clipped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, scores: Var, targets: &[f64]) -> Result<Var> {
        let s = self.value(scores);
        if s.len() != targets.len() {
            return Err(dim_err(format!("bce: {} scores, {} targets", s.len(), targets.len())));
        }
        let n = targets.len() as f64;
        let loss = s
            .data()
            .iter()
            .zip(targets)
            .map(|(p, y)| {
                let p = p.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let ng = self.ng(&[scores]);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { scores, targets: targets.to_vec() }, ng))
    }

    /// Forward KL from a fixed teacher distribution (given as logits, never
    /// differentiated) to the student's softmax, averaged over rows.
    pub fn forward_kl(&mut self, teacher_logits: &Tensor, student: Var) -> Result<Var> {
        let s = self.value(student);
        if s.shape() != teacher_logits.shape() {
            return Err(dim_err("forward_kl: shape mismatch".into()));
        }
        let (t, v) = s.dims2()?;
        let teacher = tensor::softmax(teacher_logits).into_data();
        let probs = tensor::softmax(s).into_data();
        let mut loss = 0.0;
        for i in 0..t {
            let lse_s = tensor::logsumexp_row(s.row(i));
            let lse_t = tensor::logsumexp_row(teacher_logits.row(i));
            for j in 0..v {
                let pt = teacher[i * v + j];
                if pt > 0.0 {
                    let log_pt = teacher_logits.at(i, j) - lse_t;
                    let log_ps = s.at(i, j) - lse_s;
                    loss += pt * (log_pt - log_ps);
                }
            }
        }
        let ng = self.ng(&[student]);
        Ok(self.push(Tensor::scalar(loss / t as f64), Op::ForwardKl { student, teacher, probs }, ng))
    }

    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = (0..src.rows()).map(|i| tensor::logsumexp_row(src.row(i))).collect();
        let ng = self.ng(&[x]);
        self.push(Tensor::vector(data), Op::LogSumExpRows(x), ng)
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let s = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64;
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), ng))
    }

    /// Reverse pass from a scalar root. Every node that requires a gradient
    /// and is reachable from `loss` ends up with `grad` populated; all other
    /// nodes keep `grad == None`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            node.value.set_grad(if node.needs_grad { g } else { None });
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, d: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = out.cols();
                if wants(*a) {
                    acc(*a, tensor::matmul_nt(g, val(*b), m, n, k));
                }
                if wants(*b) {
                    acc(*b, tensor::matmul_tn(val(*a), g, m, k, n));
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = out.cols();
                if wants(*a) {
                    acc(*a, tensor::matmul(g, val(*b), m, n, k));
                }
                if wants(*b) {
                    acc(*b, tensor::matmul_tn(g, val(*a), m, n, k));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2().unwrap();
                acc(*a, tensor::transpose(g, n, m));
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|x| x * s).collect()),
            Op::ScaleRows(x, s) => {
                let c = out.cols();
                let sv = val(*s);
                let xv = val(*x);
                if wants(*x) {
                    let mut d = vec![0.0; g.len()];
                    for (t, f) in sv.iter().enumerate() {
                        for j in 0..c {
                            d[t * c + j] = g[t * c + j] * f;
                        }
                    }
                    acc(*x, d);
                }
                if wants(*s) {
                    let d = (0..sv.len())
                        .map(|t| (0..c).map(|j| g[t * c + j] * xv[t * c + j]).sum())
                        .collect();
                    acc(*s, d);
                }
            }
            Op::Silu(a) => {
                let d = g
                    .iter()
                    .zip(val(*a))
                    .map(|(gi, x)| {
                        let s = sigmoid(*x);
                        gi * (s + x * s * (1.0 - s))
                    })
                    .collect();
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.iter().zip(out.data()).map(|(gi, s)| gi * s * (1.0 - s)).collect();
                acc(*a, d);
            }
            Op::Tanh(a) => {
                let d = g.iter().zip(out.data()).map(|(gi, y)| gi * (1.0 - y * y)).collect();
                acc(*a, d);
            }
            Op::Gelu(a) => {
                let d = g.iter().zip(val(*a)).map(|(gi, x)| gi * gelu_grad(*x)).collect();
                acc(*a, d);
            }
            Op::Softmax(a) => {
                let c = out.cols();
                let y = out.data();
                let mut d = vec![0.0; g.len()];
                for r in 0..out.rows() {
                    let s = r * c;
                    let dot: f64 = (0..c).map(|j| g[s + j] * y[s + j]).sum();
                    for j in 0..c {
                        d[s + j] = y[s + j] * (g[s + j] - dot);
                    }
                }
                acc(*a, d);
            }
            Op::LogSoftmax(a) => {
                let c = out.cols();
                let y = out.data();
                let mut d = vec![0.0; g.len()];
                for r in 0..out.rows() {
                    let s = r * c;
                    let gs: f64 = g[s..s + c].iter().sum();
                    for j in 0..c {
                        d[s + j] = g[s + j] - y[s + j].exp() * gs;
                    }
                }
                acc(*a, d);
            }
            Op::RmsNorm(x, w) => {
                let xt = self.value(*x);
                let wv = val(*w);
                let c = xt.cols();
                let mut dx = vec![0.0; g.len()];
                let mut dw = vec![0.0; c];
                for r in 0..xt.rows() {
                    let row = xt.row(r);
                    let rr = rms(row);
                    let gr = &g[r * c..(r + 1) * c];
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += gr[j] * wv[j] * row[j];
                        dw[j] += gr[j] * row[j] / rr;
                    }
                    let k = dot / (c as f64 * rr * rr * rr);
                    for j in 0..c {
                        dx[r * c + j] = gr[j] * wv[j] / rr - row[j] * k;
                    }
                }
                if wants(*x) {
                    acc(*x, dx);
                }
                if wants(*w) {
                    acc(*w, dw);
                }
            }
            Op::Rope { x, positions, d_head } => {
                let c = out.cols();
                let mut d = g.to_vec();
                for (r, &p) in positions.iter().enumerate() {
                    rope_row(&mut d[r * c..(r + 1) * c], p, *d_head, true);
                }
                acc(*x, d);
            }
            Op::Attention { q, k, v, heads, probs, tk } => {
                let (dq, dk, dv) = attention_backward(g, val(*q), val(*k), val(*v), probs, *tk, *heads);
                if wants(*q) {
                    acc(*q, dq);
                }
                if wants(*k) {
                    acc(*k, dk);
                }
                if wants(*v) {
                    acc(*v, dv);
                }
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let c = tt.cols();
                let mut d = vec![0.0; tt.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        d[id * c + j] += g[r * c + j];
                    }
                }
                acc(*table, d);
            }
            Op::GatherRows(x, idx) => {
                let xt = self.value(*x);
                let c = xt.cols();
                let mut d = vec![0.0; xt.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += g[r * c + j];
                    }
                }
                acc(*x, d);
            }
            Op::ScatterAddRows { base, src, idx } => {
                let c = out.cols();
                acc(*base, g.to_vec());
                if wants(*src) {
                    let mut d = Vec::with_capacity(idx.len() * c);
                    for &i in idx {
                        d.extend_from_slice(&g[i * c..(i + 1) * c]);
                    }
                    acc(*src, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    acc(*p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::Pick(x, cols) => {
                let xt = self.value(*x);
                let c = xt.cols();
                let mut d = vec![0.0; xt.len()];
                for (t, &j) in cols.iter().enumerate() {
                    d[t * c + j] = g[t];
                }
                acc(*x, d);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.value(*logits).cols();
                let t = targets.len() as f64;
                let mut d = probs.clone();
                for (r, &y) in targets.iter().enumerate() {
                    d[r * v + y] -= 1.0;
                }
                d.iter_mut().for_each(|x| *x *= g[0] / t);
                acc(*logits, d);
            }
            Op::Bce { scores, targets } => {
                let n = targets.len() as f64;
                let d = val(*scores)
                    .iter()
                    .zip(targets)
                    .map(|(p, y)| {
                        let p = p.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
                        g[0] * (p - y) / (p * (1.0 - p)) / n
                    })
                    .collect();
                acc(*scores, d);
            }
            Op::ForwardKl { student, teacher, probs } => {
                let t = self.value(*student).rows() as f64;
                let d = probs.iter().zip(teacher).map(|(ps, pt)| g[0] * (ps - pt) / t).collect();
                acc(*student, d);
            }
            Op::LogSumExpRows(x) => {
                let xt = self.value(*x);
                let c = xt.cols();
                let mut d = tensor::softmax(xt).into_data();
                for r in 0..xt.rows() {
                    d[r * c..(r + 1) * c].iter_mut().for_each(|p| *p *= g[r]);
                }
                acc(*x, d);
            }
            Op::Mse(a, b) => {
                let n = val(*a).len() as f64;
                let diff: Vec<f64> = val(*a).iter().zip(val(*b)).map(|(p, q)| 2.0 * (p - q) / n * g[0]).collect();
                if wants(*b) {
                    acc(*b, diff.iter().map(|x| -x).collect());
                }
                acc(*a, diff);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn rms(row: &[f64]) -> f64 {
    (row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64 + RMS_EPS).sqrt()
}

/// Rotates adjacent pairs of every head in place; `inverse` applies the
/// transpose rotation (used for the gradient).
pub(crate) fn rope_row(row: &mut [f64], pos: usize, d_head: usize, inverse: bool) {
    let half = d_head / 2;
    for head in row.chunks_mut(d_head) {
        for c in 0..half {
            let theta = pos as f64 * ROPE_BASE.powf(-2.0 * c as f64 / d_head as f64);
            let (sin, cos) = theta.sin_cos();
            let sin = if inverse { -sin } else { sin };
            let (x0, x1) = (head[2 * c], head[2 * c + 1]);
            head[2 * c] = x0 * cos - x1 * sin;
            head[2 * c + 1] = x0 * sin + x1 * cos;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    q_pos: &[usize],
    k_pos: &[usize],
    tq: usize,
    tk: usize,
    heads: Heads,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let Heads { n_heads, n_kv_heads, d_head } = heads;
    let group = n_heads / n_kv_heads;
    let qw = n_heads * d_head;
    let kw = n_kv_heads * d_head;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut out = vec![0.0; tq * qw];
    let mut probs = vec![0.0; n_heads * tq * tk];
    let mut scores = vec![0.0; tk];
    for i in 0..tq {
        let visible: Vec<usize> = (0..tk).filter(|&j| k_pos[j] <= q_pos[i]).collect();
        if visible.is_empty() {
            return Err(Error::CacheUnderrun { query_position: q_pos[i] });
        }
        for h in 0..n_heads {
            let kh = h / group;
            let qrow = &q[i * qw + h * d_head..i * qw + (h + 1) * d_head];
            let mut max = f64::NEG_INFINITY;
            for &j in &visible {
                let krow = &k[j * kw + kh * d_head..j * kw + (kh + 1) * d_head];
                let mut s = 0.0;
                for c in 0..d_head {
                    s += qrow[c] * krow[c];
                }
                scores[j] = s * scale;
                max = max.max(scores[j]);
            }
            let mut sum = 0.0;
            for &j in &visible {
                scores[j] = (scores[j] - max).exp();
                sum += scores[j];
            }
            let prow = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
            let orow = &mut out[i * qw + h * d_head..i * qw + (h + 1) * d_head];
            for &j in &visible {
                let p = scores[j] / sum;
                prow[j] = p;
                let vrow = &v[j * kw + kh * d_head..j * kw + (kh + 1) * d_head];
                for c in 0..d_head {
                    orow[c] += p * vrow[c];
                }
            }
        }
    }
    Ok((out, probs))
}

fn attention_backward(
    g: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    tk: usize,
    heads: Heads,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let Heads { n_heads, n_kv_heads, d_head } = heads;
    let group = n_heads / n_kv_heads;
    let qw = n_heads * d_head;
    let kw = n_kv_heads * d_head;
    let tq = q.len() / qw;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; tk];
    for h in 0..n_heads {
        let kh = h / group;
        for i in 0..tq {
            let prow = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
            let grow = &g[i * qw + h * d_head..i * qw + (h + 1) * d_head];
            let mut dot = 0.0;
            for j in 0..tk {
                if prow[j] == 0.0 {
                    dp[j] = 0.0;
                    continue;
                }
                let vrow = &v[j * kw + kh * d_head..j * kw + (kh + 1) * d_head];
                let mut s = 0.0;
                for c in 0..d_head {
                    s += grow[c] * vrow[c];
                    dv[j * kw + kh * d_head + c] += prow[j] * grow[c];
                }
                dp[j] = s;
                dot += prow[j] * s;
            }
            for j in 0..tk {
                if prow[j] == 0.0 {
                    continue;
                }
                let ds = prow[j] * (dp[j] - dot) * scale;
                for c in 0..d_head {
                    dq[i * qw + h * d_head + c] += ds * k[j * kw + kh * d_head + c];
                    dk[j * kw + kh * d_head + c] += ds * q[i * qw + h * d_head + c];
                }
            }
        }
    }
    (dq, dk, dv)
}

//! Tape-based reverse-mode differentiation over dense 2-D tensors.
//!
//! Values are computed eagerly when an op is called. An op is recorded with
//! its backward rule only when at least one input requires a gradient;
//! otherwise the result is stored as a plain constant.

use std::collections::HashMap;

use super::gemm::gemm;
use super::tensor::{numel, Tensor, TensorId};
use crate::error::{Error, Result};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f32 = 1e-5;

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f32),
    Shift(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Gelu(Var),
    Tanh(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Std(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Softplus(Var),
    Square(Var),
    GatherRows {
        a: Var,
        rows: Vec<usize>,
    },
    Pick {
        a: Var,
        cols: Vec<usize>,
    },
    Minimum(Var, Var),
    Clamp {
        a: Var,
        lo: f32,
        hi: f32,
    },
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f32>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<TensorId, Var>,
    grads: Vec<Option<Vec<f32>>>,
    no_grad: bool,
}

fn gelu_tanh(x: f32) -> (f32, f32) {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    let u = C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044_715 * x * x);
    (y, dy)
}

// Lazily allocated gradient buffer for an input that needs one.
fn grad_slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f32>>], v: Var) -> Option<&'g mut Vec<f32>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A tape that binds every parameter as a constant, so nothing is
    /// recorded regardless of the tensors' `requires_grad` flags.
    pub fn inference() -> Self {
        Tape {
            no_grad: true,
            ..Tape::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of ops recorded with a backward rule.
    pub fn recorded_ops(&self) -> usize {
        self.nodes.iter().filter(|n| !matches!(n.op, Op::Leaf)).count()
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element var.
    pub fn item(&self, v: Var) -> f32 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter tensor. Binding the same tensor twice returns the
    /// same var, so tied weights accumulate one gradient.
    pub fn param(&mut self, t: &Tensor) -> Var {
        if let Some(&v) = self.bound.get(&t.id()) {
            return v;
        }
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad() && !self.no_grad,
            Op::Leaf,
        );
        self.bound.insert(t.id(), v);
        v
    }

    /// A constant input that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::DataLength { shape, len: data.len() });
        }
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::ShapeMismatch {
                op,
                left: s.to_vec(),
                right: vec![0, 0],
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), value, rg, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes the stored matrix.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), ta, self.value(b), tb, 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b, m, k, n, ta, tb }))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "minimum", Op::Minimum(a, b), f32::min)
    }

    /// Adds a length-`n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_row")?;
        if numel(self.shape(row)) != n {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: self.shape(a).to_vec(),
                right: self.shape(row).to_vec(),
            });
        }
        let rv = self.value(row);
        let mut out = self.value(a).to_vec();
        for r in 0..m {
            out[r * n..(r + 1) * n].iter_mut().zip(rv).for_each(|(o, b)| *o += b);
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(vec![m, n], out, rg, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        self.unary(a, Op::Shift(a), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), |x| gelu_tanh(x).0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f32::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f32::ln)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f32::exp)
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        self.unary(a, Op::Clamp { a, lo, hi }, |x| x.clamp(lo, hi))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(a)) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape,
            });
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, value, rg, Op::Reshape(a)))
    }

    fn rowwise(&self, a: Var) -> (usize, usize) {
        let s = self.shape(a);
        let n = *s.last().unwrap_or(&1);
        (numel(s) / n.max(1), n)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (m, n) = self.rowwise(a);
        let mut out = self.value(a).to_vec();
        for r in 0..m {
            let row = &mut out[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, rg, Op::Softmax(a))
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (m, n) = self.rowwise(a);
        let mut out = self.value(a).to_vec();
        for r in 0..m {
            let row = &mut out[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f32>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, rg, Op::LogSoftmax(a))
    }

    /// Layer normalization over the last dimension with affine gain and bias.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.rowwise(x);
        if numel(self.shape(gain)) != n || numel(self.shape(bias)) != n {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                left: self.shape(x).to_vec(),
                right: self.shape(gain).to_vec(),
            });
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        let (xhat, rstd) = if rg { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Row lookup into a `V×d` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::TokenOutOfRange { token: bad, vocab });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|&x| x as f64).sum::<f64>() as f32;
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = (v.iter().map(|&x| x as f64).sum::<f64>() / v.len().max(1) as f64) as f32;
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], rg, Op::Mean(a))
    }

    /// Population (divide-by-n) standard deviation over all elements.
    pub fn std(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.len().max(1) as f64;
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        let rg = self.rg(&[a]);
        self.push(vec![], vec![var.sqrt() as f32], rg, Op::Std(a))
    }

    /// Selects rows of an `m×n` matrix.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(a, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                left: vec![m, n],
                right: vec![bad],
            });
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&av[r * n..(r + 1) * n]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![rows.len(), n], out, rg, Op::GatherRows { a, rows: rows.to_vec() }))
    }

    /// Picks element `cols[r]` from each row `r`; result has shape `[m]`.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(a, "pick")?;
        if cols.len() != m || cols.iter().any(|&c| c >= n) {
            return Err(Error::ShapeMismatch {
                op: "pick",
                left: vec![m, n],
                right: vec![cols.len()],
            });
        }
        let av = self.value(a);
        let out = cols.iter().enumerate().map(|(r, &c)| av[r * n + c]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![m], out, rg, Op::Pick { a, cols: cols.to_vec() }))
    }

    /// Multi-head causal self-attention over `batch` right-padded sequences
    /// of length `seq`. `q`, `k`, `v` are `(batch·seq)×d`; heads split `d`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (rows, d) = self.dims2(q, "attention")?;
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(Error::ShapeMismatch {
                op: "attention",
                left: vec![rows, d],
                right: vec![batch, seq, heads],
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0f32; batch * heads * seq * seq];
        let mut out = vec![0.0f32; rows * d];
        let mut scores = vec![0.0f32; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qv[(b * seq + i) * d + off..][..dh];
                    let mut mx = f32::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &kv[(b * seq + j) * d + off..][..dh];
                        let s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f32>() * scale;
                        scores[j] = s;
                        mx = mx.max(s);
                    }
                    let mut z = 0.0;
                    for s in scores[..=i].iter_mut() {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    let prow = &mut probs[pbase + i * seq..][..seq];
                    let orow = &mut out[(b * seq + i) * d + off..][..dh];
                    for j in 0..=i {
                        let p = scores[j] / z;
                        prow[j] = p;
                        let vj = &vv[(b * seq + j) * d + off..][..dh];
                        orow.iter_mut().zip(vj).for_each(|(o, x)| *o += p * x);
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        let probs = if rg { probs } else { Vec::new() };
        Ok(self.push(
            vec![rows, d],
            out,
            rg,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
        ))
    }

    /// Gradient of the most recent [`Tape::backward`] for `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient computed for a bound tensor into its grad slot.
    /// Returns whether a gradient was written.
    pub fn write_grad(&self, t: &mut Tensor) -> bool {
        if !t.requires_grad() {
            return false;
        }
        match self.bound.get(&t.id()).and_then(|&v| self.grad(v)) {
            Some(g) => {
                t.accumulate_grad(g);
                true
            }
            None => false,
        }
    }

    /// Reverse sweep from a scalar loss. Gradients of a previous sweep on
    /// this tape are discarded; tensor grad slots accumulate via
    /// [`Tape::write_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(nodes, grads, $v)
            };
        }
        let val = |v: Var| -> &[f32] { &nodes[v.0].value };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n, ta, tb } => {
                if let Some(ga) = slot!(a) {
                    if ta {
                        gemm(k, n, m, val(b), tb, g, true, 1.0, ga);
                    } else {
                        gemm(m, n, k, g, false, val(b), !tb, 1.0, ga);
                    }
                }
                if let Some(gb) = slot!(b) {
                    if tb {
                        gemm(n, m, k, g, true, val(a), ta, 1.0, gb);
                    } else {
                        gemm(k, m, n, val(a), !ta, g, false, 1.0, gb);
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = slot!(a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if let Some(gb) = slot!(b) {
                    gb.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = slot!(a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if let Some(gb) = slot!(b) {
                    gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d);
                }
            }
            &Op::Mul(a, b) => {
                if let Some(ga) = slot!(a) {
                    for ((x, d), o) in ga.iter_mut().zip(g).zip(val(b)) {
                        *x += d * o;
                    }
                }
                if let Some(gb) = slot!(b) {
                    for ((x, d), o) in gb.iter_mut().zip(g).zip(val(a)) {
                        *x += d * o;
                    }
                }
            }
            &Op::Minimum(a, b) => {
                let (av, bv) = (val(a), val(b));
                if let Some(ga) = slot!(a) {
                    for j in 0..g.len() {
                        if av[j] <= bv[j] {
                            ga[j] += g[j];
                        }
                    }
                }
                if let Some(gb) = slot!(b) {
                    for j in 0..g.len() {
                        if av[j] > bv[j] {
                            gb[j] += g[j];
                        }
                    }
                }
            }
            &Op::AddRow(a, row) => {
                if let Some(ga) = slot!(a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if let Some(gr) = slot!(row) {
                    let n = gr.len();
                    for chunk in g.chunks(n) {
                        gr.iter_mut().zip(chunk).for_each(|(x, d)| *x += d);
                    }
                }
            }
            &Op::Scale(a, c) => {
                if let Some(ga) = slot!(a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += c * d);
                }
            }
            &Op::Shift(a) | &Op::Reshape(a) => {
                if let Some(ga) = slot!(a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
            }
            &Op::Softmax(a) => {
                if let Some(ga) = slot!(a) {
                    let n = *node.shape.last().unwrap_or(&1);
                    for ((gr, yr), dr) in ga.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: f32 = yr.iter().zip(dr).map(|(p, d)| p * d).sum();
                        for j in 0..n {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax(a) => {
                if let Some(ga) = slot!(a) {
                    let n = *node.shape.last().unwrap_or(&1);
                    for ((gr, yr), dr) in ga.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let total: f32 = dr.iter().sum();
                        for j in 0..n {
                            gr[j] += dr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = *node.shape.last().unwrap_or(&1);
                let gv = val(*gain);
                if let Some(gx) = slot!(*x) {
                    for r in 0..rstd.len() {
                        let dr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..n {
                            let dh = dr[c] * gv[c];
                            m1 += dh;
                            m2 += dh * hr[c];
                        }
                        m1 /= n as f32;
                        m2 /= n as f32;
                        for c in 0..n {
                            let dh = dr[c] * gv[c];
                            gx[r * n + c] += rstd[r] * (dh - m1 - hr[c] * m2);
                        }
                    }
                }
                if let Some(gg) = slot!(*gain) {
                    for (dr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            gg[c] += dr[c] * hr[c];
                        }
                    }
                }
                if let Some(gb) = slot!(*bias) {
                    for dr in g.chunks(n) {
                        gb.iter_mut().zip(dr).for_each(|(x, d)| *x += d);
                    }
                }
            }
            &Op::Gelu(a) => {
                if let Some(ga) = slot!(a) {
                    for ((x, d), xv) in ga.iter_mut().zip(g).zip(val(a)) {
                        *x += d * gelu_tanh(*xv).1;
                    }
                }
            }
            &Op::Tanh(a) => {
                if let Some(ga) = slot!(a) {
                    for ((x, d), t) in ga.iter_mut().zip(g).zip(y) {
                        *x += d * (1.0 - t * t);
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if let Some(ga) = slot!(a) {
                    for ((x, d), s) in ga.iter_mut().zip(g).zip(y) {
                        *x += d * s * (1.0 - s);
                    }
                }
            }
            &Op::Log(a) => {
                if let Some(ga) = slot!(a) {
                    for ((x, d), xv) in ga.iter_mut().zip(g).zip(val(a)) {
                        *x += d / xv;
                    }
                }
            }
            &Op::Exp(a) => {
                if let Some(ga) = slot!(a) {
                    for ((x, d), e) in ga.iter_mut().zip(g).zip(y) {
                        *x += d * e;
                    }
                }
            }
            &Op::Softplus(a) => {
                if let Some(ga) = slot!(a) {
                    for ((x, d), xv) in ga.iter_mut().zip(g).zip(val(a)) {
                        *x += d * sigmoid(*xv);
                    }
                }
            }
            &Op::Square(a) => {
                if let Some(ga) = slot!(a) {
                    for ((x, d), xv) in ga.iter_mut().zip(g).zip(val(a)) {
                        *x += 2.0 * d * xv;
                    }
                }
            }
            &Op::Clamp { a, lo, hi } => {
                if let Some(ga) = slot!(a) {
                    for ((x, d), xv) in ga.iter_mut().zip(g).zip(val(a)) {
                        if *xv >= lo && *xv <= hi {
                            *x += d;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = slot!(*table) {
                    let d = g.len() / ids.len().max(1);
                    for (r, &id) in ids.iter().enumerate() {
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(x, dv)| *x += dv);
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = slot!(a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            &Op::Mean(a) => {
                if let Some(ga) = slot!(a) {
                    let s = g[0] / ga.len().max(1) as f32;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            &Op::Std(a) => {
                if let Some(ga) = slot!(a) {
                    let sd = y[0];
                    if sd > 0.0 {
                        let av = val(a);
                        let n = av.len() as f32;
                        let mean = av.iter().sum::<f32>() / n;
                        for (x, v) in ga.iter_mut().zip(av) {
                            *x += g[0] * (v - mean) / (n * sd);
                        }
                    }
                }
            }
            Op::GatherRows { a, rows } => {
                if let Some(ga) = slot!(*a) {
                    let n = g.len() / rows.len().max(1);
                    for (i, &r) in rows.iter().enumerate() {
                        ga[r * n..(r + 1) * n]
                            .iter_mut()
                            .zip(&g[i * n..(i + 1) * n])
                            .for_each(|(x, d)| *x += d);
                    }
                }
            }
            Op::Pick { a, cols } => {
                if let Some(ga) = slot!(*a) {
                    let n = ga.len() / cols.len().max(1);
                    for (r, &c) in cols.iter().enumerate() {
                        ga[r * n + c] += g[r];
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let d = node.shape[1];
                let dh = d / heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let mut dq = vec![0.0f32; qv.len()];
                let mut dk = vec![0.0f32; kv.len()];
                let mut dv = vec![0.0f32; vv.len()];
                let mut dp = vec![0.0f32; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = h * dh;
                        let pbase = (b * heads + h) * seq * seq;
                        for i in 0..seq {
                            let prow = &probs[pbase + i * seq..][..seq];
                            let gi = &g[(b * seq + i) * d + off..][..dh];
                            let mut dot = 0.0;
                            for j in 0..=i {
                                let vj = &vv[(b * seq + j) * d + off..][..dh];
                                dp[j] = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                                dot += prow[j] * dp[j];
                                let dvj = &mut dv[(b * seq + j) * d + off..][..dh];
                                dvj.iter_mut().zip(gi).for_each(|(x, y)| *x += prow[j] * y);
                            }
                            let qi_base = (b * seq + i) * d + off;
                            for j in 0..=i {
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj_base = (b * seq + j) * d + off;
                                for c in 0..dh {
                                    dq[qi_base + c] += ds * kv[kj_base + c];
                                    dk[kj_base + c] += ds * qv[qi_base + c];
                                }
                            }
                        }
                    }
                }
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(gx) = slot!(var) {
                        gx.iter_mut().zip(&buf).for_each(|(x, d)| *x += d);
                    }
                }
            }
        }
    }
}

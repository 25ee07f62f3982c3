//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output and whatever it needs for the
//! backward pass. Nodes are stored in execution order, so a reverse sweep over
//! the tape is a valid topological traversal.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Head partition for [`Graph::attention`].
///
/// Queries and keys are `batch·tokens × heads·head_dim`. Values are
/// `batch·tokens × v_offsets[heads]`, head `h` owning value columns
/// `v_offsets[h]..v_offsets[h + 1]`; widths may differ per head and may be zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub tokens: usize,
    pub head_dim: usize,
    pub v_offsets: Vec<usize>,
}

impl AttentionLayout {
    /// Equal-width heads over a `width`-wide value tensor.
    pub fn uniform(batch: usize, tokens: usize, width: usize, heads: usize) -> Self {
        let head_dim = width / heads;
        Self {
            batch,
            tokens,
            head_dim,
            v_offsets: (0..=heads).map(|h| h * head_dim).collect(),
        }
    }

    pub fn heads(&self) -> usize {
        self.v_offsets.len() - 1
    }

    pub fn v_width(&self) -> usize {
        *self.v_offsets.last().unwrap()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    ScaleColumns(Var, Var),
    GatherColumns(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    SoftmaxRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    L1 {
        gates: Vec<Var>,
        lambda: f64,
    },
    AssembleTokens {
        patches: Var,
        cls: Var,
        pos: Var,
        batch: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Record of executed ops, consumed by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient of `v` into the tensor's gradient slot.
    pub fn write_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => t.set_grad(g.to_vec()),
            None => t.set_grad(vec![0.0; t.len()]),
        }
    }
}

fn dim_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{what}: shapes {a:?} and {b:?} are incompatible"))
}

const GELU_C: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    let s = libm::sqrt(2.0 / PI);
    0.5 * x * (1.0 + libm::tanh(s * (x + GELU_C * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let s = libm::sqrt(2.0 / PI);
    let t = libm::tanh(s * (x + GELU_C * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * s * (1.0 + 3.0 * GELU_C * x * x)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf; it takes part in differentiation iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).unwrap()
    }

    fn matrix(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Dimension(format!("{what}: expected a matrix, got shape {s:?}"))),
        }
    }

    fn vector_len(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul lhs")?;
        let (k2, n) = self.matrix(b, "matmul rhs")?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), self.value(b), &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.matrix(x, "add_bias")?;
        if self.vector_len(bias) != c {
            return Err(dim_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, bj) in row.iter_mut().zip(b) {
                *o += bj;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias(x, bias), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("mul", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    /// `x · diag(a)`: column `j` of `x` multiplied by `a[j]`.
    pub fn scale_columns(&mut self, x: Var, a: Var) -> Result<Var> {
        let (_, c) = self.matrix(x, "scale_columns")?;
        if self.vector_len(a) != c {
            return Err(dim_err("scale_columns", self.shape(x), self.shape(a)));
        }
        let gate = self.value(a);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, g) in row.iter_mut().zip(gate) {
                *o *= g;
            }
        }
        let rg = self.rg(&[x, a]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::ScaleColumns(x, a), rg))
    }

    pub fn gather_columns(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix(x, "gather_columns")?;
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::Dimension(format!("gather_columns: column {bad} out of {c}")));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(r * cols.len());
        for row in src.chunks_exact(c) {
            out.extend(cols.iter().map(|&j| row[j]));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![r, cols.len()], out, Op::GatherColumns(x, cols.to_vec()), rg))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix(x, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Dimension(format!("gather_rows: row {bad} out of {r}")));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![rows.len(), c], out, Op::GatherRows(x, rows.to_vec()), rg))
    }

    /// Row-wise normalization to zero mean and unit variance, then `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, d) = self.matrix(x, "layer_norm")?;
        if self.vector_len(gain) != d || self.vector_len(bias) != d {
            return Err(dim_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; r * d];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * d];
        for (i, row) in self.value(x).chunks_exact(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / libm::sqrt(var + eps);
            rstd[i] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            vec![r, d],
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu_scalar(v)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.matrix(x, "softmax_rows")?;
        let mut out = self.value(x).to_vec();
        out.chunks_exact_mut(c).for_each(softmax_in_place);
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::SoftmaxRows(x), rg))
    }

    /// Multi-head scaled dot-product attention, batched over `layout.batch`
    /// sequences. Scores are scaled by `1/√head_dim`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (rq, cq) = self.matrix(q, "attention q")?;
        let (rk, ck) = self.matrix(k, "attention k")?;
        let (rv, cv) = self.matrix(v, "attention v")?;
        let heads = layout.heads();
        let rows = layout.batch * layout.tokens;
        let offsets_ok = layout.v_offsets.first() == Some(&0)
            && layout.v_offsets.windows(2).all(|w| w[0] <= w[1]);
        if heads == 0
            || cq != ck
            || cq != heads * layout.head_dim
            || rq != rows
            || rk != rows
            || rv != rows
            || cv != layout.v_width()
            || !offsets_ok
        {
            return Err(Error::Dimension(format!(
                "attention: q {:?}, k {:?}, v {:?} inconsistent with {heads} heads of width {} over {} x {} tokens (value offsets {:?})",
                self.shape(q),
                self.shape(k),
                self.shape(v),
                layout.head_dim,
                layout.batch,
                layout.tokens,
                layout.v_offsets
            )));
        }
        let (n, dh) = (layout.tokens, layout.head_dim);
        let scale = 1.0 / libm::sqrt(dh as f64);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; layout.batch * heads * n * n];
        let mut out = vec![0.0; rows * cv];
        for b in 0..layout.batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * n * n..][..n * n];
                for i in 0..n {
                    let qi = &qv[(b * n + i) * cq + h * dh..][..dh];
                    let prow = &mut p[i * n..(i + 1) * n];
                    for (j, s) in prow.iter_mut().enumerate() {
                        let kj = &kv[(b * n + j) * ck + h * dh..][..dh];
                        *s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                    }
                    softmax_in_place(prow);
                }
                let (v0, v1) = (layout.v_offsets[h], layout.v_offsets[h + 1]);
                for i in 0..n {
                    let o = &mut out[(b * n + i) * cv..][v0..v1];
                    for j in 0..n {
                        let w = p[i * n + j];
                        let vj = &vv[(b * n + j) * cv..][v0..v1];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += w * vc;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            vec![rows, cv],
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.matrix(logits, "cross_entropy")?;
        if labels.len() != b {
            return Err(Error::Input(format!(
                "cross_entropy: {} labels for {b} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Input(format!("cross_entropy: label {bad} outside [0, {c})")));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (row, (&label, z)) in probs
            .chunks_exact_mut(c)
            .zip(labels.iter().zip(self.value(logits).chunks_exact(c)))
        {
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(z.iter().map(|v| libm::exp(v - max)).sum::<f64>());
            loss += lse - z[label];
            softmax_in_place(row);
        }
        loss /= b as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `lambda · Σ |a|` over every entry of every gate. Subgradient uses `sign(0) = 0`.
    pub fn l1_penalty(&mut self, gates: &[Var], lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) {
            return Err(Error::Input(format!("l1_penalty: lambda {lambda} must be >= 0")));
        }
        let total: f64 = gates
            .iter()
            .map(|g| self.value(*g).iter().map(|v| v.abs()).sum::<f64>())
            .sum();
        let rg = self.rg(gates);
        Ok(self.push(
            vec![1],
            vec![lambda * total],
            Op::L1 {
                gates: gates.to_vec(),
                lambda,
            },
            rg,
        ))
    }

    /// Builds the token matrix `[cls; patches] + pos` for each batch element.
    ///
    /// `patches` is `batch·(n−1) × d`, `cls` has `d` entries, `pos` is `n × d`;
    /// the result is `batch·n × d` with the class token first in each sequence.
    pub fn assemble_tokens(&mut self, patches: Var, cls: Var, pos: Var, batch: usize) -> Result<Var> {
        let (rp, d) = self.matrix(patches, "assemble_tokens patches")?;
        let (n, dp) = self.matrix(pos, "assemble_tokens pos")?;
        if dp != d || self.vector_len(cls) != d || batch == 0 || rp != batch * (n - 1) {
            return Err(Error::Dimension(format!(
                "assemble_tokens: patches {:?}, cls {:?}, pos {:?}, batch {batch}",
                self.shape(patches),
                self.shape(cls),
                self.shape(pos)
            )));
        }
        let (pv, cv, posv) = (self.value(patches), self.value(cls), self.value(pos));
        let mut out = vec![0.0; batch * n * d];
        for b in 0..batch {
            for t in 0..n {
                let src = if t == 0 {
                    cv
                } else {
                    &pv[(b * (n - 1) + t - 1) * d..][..d]
                };
                let dst = &mut out[(b * n + t) * d..][..d];
                for ((o, s), p) in dst.iter_mut().zip(src).zip(&posv[t * d..(t + 1) * d]) {
                    *o = s + p;
                }
            }
        }
        let rg = self.rg(&[patches, cls, pos]);
        Ok(self.push(
            vec![batch * n, d],
            out,
            Op::AssembleTokens {
                patches,
                cls,
                pos,
                batch,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.get(loss.0).map(|n| n.value.len()) != Some(1) {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes.get(loss.0).map(|n| n.shape.clone())
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: &Var| nodes[v.0].requires_grad;
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                let len = nodes[v.0].value.len();
                grads[v.0].get_or_insert_with(|| vec![0.0; len])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if wants(a) {
                    gemm_nt(m, n, k, g, &nodes[b.0].value, slot!(*a), true);
                }
                if wants(b) {
                    gemm_tn(k, m, n, &nodes[a.0].value, g, slot!(*b), true);
                }
            }
            Op::AddBias(x, bias) => {
                let c = nodes[bias.0].value.len();
                if wants(x) {
                    slot!(*x).iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if wants(bias) {
                    let db = slot!(*bias);
                    for row in g.chunks_exact(c) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        slot!(*v).iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    let bv = &nodes[b.0].value;
                    for ((d, g), y) in slot!(*a).iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                }
                if wants(b) {
                    let av = &nodes[a.0].value;
                    for ((d, g), x) in slot!(*b).iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                }
            }
            Op::Scale(x, c) => {
                if wants(x) {
                    slot!(*x).iter_mut().zip(g).for_each(|(d, g)| *d += g * c);
                }
            }
            Op::Sum(x) => {
                if wants(x) {
                    slot!(*x).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::ScaleColumns(x, a) => {
                let c = nodes[a.0].value.len();
                if wants(x) {
                    let av = &nodes[a.0].value;
                    for (drow, grow) in slot!(*x).chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for ((d, g), s) in drow.iter_mut().zip(grow).zip(av) {
                            *d += g * s;
                        }
                    }
                }
                if wants(a) {
                    let xv = &nodes[x.0].value;
                    let da = slot!(*a);
                    for (xrow, grow) in xv.chunks_exact(c).zip(g.chunks_exact(c)) {
                        for ((d, g), x) in da.iter_mut().zip(grow).zip(xrow) {
                            *d += g * x;
                        }
                    }
                }
            }
            Op::GatherColumns(x, cols) => {
                if wants(x) {
                    let c = nodes[x.0].shape[1];
                    let k = cols.len();
                    if k > 0 {
                        for (drow, grow) in slot!(*x).chunks_exact_mut(c).zip(g.chunks_exact(k)) {
                            for (&j, gv) in cols.iter().zip(grow) {
                                drow[j] += gv;
                            }
                        }
                    }
                }
            }
            Op::GatherRows(x, rows) => {
                if wants(x) {
                    let c = nodes[x.0].shape[1];
                    let dx = slot!(*x);
                    for (&r, grow) in rows.iter().zip(g.chunks_exact(c)) {
                        dx[r * c..(r + 1) * c].iter_mut().zip(grow).for_each(|(d, g)| *d += g);
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
                let d = nodes[gain.0].value.len();
                if wants(gain) {
                    let dg = slot!(*gain);
                    for (hrow, grow) in xhat.chunks_exact(d).zip(g.chunks_exact(d)) {
                        for ((s, h), g) in dg.iter_mut().zip(hrow).zip(grow) {
                            *s += g * h;
                        }
                    }
                }
                if wants(bias) {
                    let db = slot!(*bias);
                    for grow in g.chunks_exact(d) {
                        db.iter_mut().zip(grow).for_each(|(s, g)| *s += g);
                    }
                }
                if wants(x) {
                    let gv = &nodes[gain.0].value;
                    let dx = slot!(*x);
                    let mut dh = vec![0.0; d];
                    for (i, grow) in g.chunks_exact(d).enumerate() {
                        let hrow = &xhat[i * d..(i + 1) * d];
                        for j in 0..d {
                            dh[j] = grow[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhh = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let drow = &mut dx[i * d..(i + 1) * d];
                        for j in 0..d {
                            drow[j] += rstd[i] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if wants(x) {
                    let xv = &nodes[x.0].value;
                    for ((d, g), &v) in slot!(*x).iter_mut().zip(g).zip(xv) {
                        *d += g * gelu_grad(v);
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if wants(x) {
                    let c = node.shape[1];
                    let y = &node.value;
                    for ((drow, grow), yrow) in slot!(*x)
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(y.chunks_exact(c))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (g - dot);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => self.attention_backward(*q, *k, *v, layout, probs, g, grads),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if wants(logits) {
                    let c = nodes[logits.0].shape[1];
                    let scale = g[0] / labels.len() as f64;
                    let dz = slot!(*logits);
                    for (i, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            dz[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
            Op::L1 { gates, lambda } => {
                for gate in gates {
                    if wants(gate) {
                        let av = &nodes[gate.0].value;
                        for (d, &a) in slot!(*gate).iter_mut().zip(av) {
                            let sign = if a > 0.0 {
                                1.0
                            } else if a < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            *d += g[0] * lambda * sign;
                        }
                    }
                }
            }
            Op::AssembleTokens {
                patches,
                cls,
                pos,
                batch,
            } => {
                let (n, d) = (nodes[pos.0].shape[0], nodes[pos.0].shape[1]);
                if wants(patches) {
                    let dp = slot!(*patches);
                    for b in 0..*batch {
                        for t in 1..n {
                            let src = &g[(b * n + t) * d..][..d];
                            let dst = &mut dp[(b * (n - 1) + t - 1) * d..][..d];
                            dst.iter_mut().zip(src).for_each(|(a, g)| *a += g);
                        }
                    }
                }
                if wants(cls) {
                    let dc = slot!(*cls);
                    for b in 0..*batch {
                        dc.iter_mut()
                            .zip(&g[b * n * d..][..d])
                            .for_each(|(a, g)| *a += g);
                    }
                }
                if wants(pos) {
                    let dpos = slot!(*pos);
                    for b in 0..*batch {
                        dpos.iter_mut()
                            .zip(&g[b * n * d..][..n * d])
                            .for_each(|(a, g)| *a += g);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let nodes = &self.nodes;
        let (n, dh, heads) = (layout.tokens, layout.head_dim, layout.heads());
        let cq = heads * dh;
        let cv = layout.v_width();
        let scale = 1.0 / libm::sqrt(dh as f64);
        let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
        let rows = layout.batch * n;
        let mut dq = vec![0.0; rows * cq];
        let mut dk = vec![0.0; rows * cq];
        let mut dv = vec![0.0; rows * cv];
        let mut ds = vec![0.0; n * n];
        for b in 0..layout.batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * n * n..][..n * n];
                let (v0, v1) = (layout.v_offsets[h], layout.v_offsets[h + 1]);
                // dP = dO · Vᵀ and dV = Pᵀ · dO
                for i in 0..n {
                    let go = &g[(b * n + i) * cv..][v0..v1];
                    for j in 0..n {
                        let vj = &vv[(b * n + j) * cv..][v0..v1];
                        ds[i * n + j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                        let w = p[i * n + j];
                        let dvj = &mut dv[(b * n + j) * cv..][v0..v1];
                        dvj.iter_mut().zip(go).for_each(|(d, g)| *d += w * g);
                    }
                }
                // softmax backward, then fold in the score scale
                for i in 0..n {
                    let prow = &p[i * n..(i + 1) * n];
                    let srow = &mut ds[i * n..(i + 1) * n];
                    let dot: f64 = srow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for (s, pv) in srow.iter_mut().zip(prow) {
                        *s = pv * (*s - dot) * scale;
                    }
                }
                for i in 0..n {
                    for j in 0..n {
                        let s = ds[i * n + j];
                        let (qi, kj) = ((b * n + i) * cq + h * dh, (b * n + j) * cq + h * dh);
                        for c in 0..dh {
                            dq[qi + c] += s * kv[kj + c];
                            dk[kj + c] += s * qv[qi + c];
                        }
                    }
                }
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if nodes[var.0].requires_grad {
                let len = nodes[var.0].value.len();
                let slot = grads[var.0].get_or_insert_with(|| vec![0.0; len]);
                slot.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
            }
        }
    }
}

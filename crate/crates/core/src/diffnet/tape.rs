//! Reverse-mode tape over vector-valued nodes.
//!
//! Every node holds a dense `f64` vector (scalars have length 1). Parameters
//! are read from a borrowed [`ParamSet`] and never mutated here; gradients
//! flow into a separate [`Gradients`] accumulator.

use super::tensor::{Gradients, ParamId, ParamSet};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    ParamRow { param: ParamId, row: usize },
    ParamVec { param: ParamId },
    MatVec { param: ParamId, x: NodeId },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Concat(Vec<NodeId>),
    Slice { x: NodeId, start: usize },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    RowDots { rows: Vec<NodeId>, v: NodeId },
    LogSoftmax { x: NodeId, mask: Vec<bool> },
    Softmax { x: NodeId, mask: Vec<bool> },
    Pick { x: NodeId, index: usize },
    Sum(NodeId),
    Entropy(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

/// Adjoints of every node after a backward pass.
#[derive(Debug, Clone)]
pub struct Adjoints(Vec<Vec<f64>>);

impl Adjoints {
    pub fn get(&self, n: NodeId) -> &[f64] {
        &self.0[n.0]
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, n: NodeId) -> &[f64] {
        &self.nodes[n.0].value
    }

    pub fn scalar(&self, n: NodeId) -> f64 {
        self.nodes[n.0].value[0]
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf whose adjoint can be read after backward.
    pub fn input(&mut self, value: Vec<f64>) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn zeros(&mut self, n: usize) -> NodeId {
        self.input(vec![0.0; n])
    }

    /// Row `row` of a matrix parameter (embedding lookup).
    pub fn param_row(&mut self, param: ParamId, row: usize) -> Result<NodeId> {
        let t = self.params.get(param);
        if row >= t.rows {
            return Err(shape_err(
                "param_row",
                format!("row {row} out of range for `{}` ({} rows)", t.name, t.rows),
            ));
        }
        let v = t.row(row).iter().map(|&x| x as f64).collect();
        Ok(self.push(Op::ParamRow { param, row }, v))
    }

    /// Whole parameter flattened to a vector (biases).
    pub fn param_vec(&mut self, param: ParamId) -> NodeId {
        let v = self.params.get(param).data.iter().map(|&x| x as f64).collect();
        self.push(Op::ParamVec { param }, v)
    }

    /// `W · x` for a `rows × cols` parameter `W`.
    pub fn matvec(&mut self, param: ParamId, x: NodeId) -> Result<NodeId> {
        let w = self.params.get(param);
        let xv = &self.nodes[x.0].value;
        if xv.len() != w.cols {
            return Err(shape_err(
                "matvec",
                format!("`{}` is {}x{}, input has {}", w.name, w.rows, w.cols, xv.len()),
            ));
        }
        let out = (0..w.rows)
            .map(|i| {
                w.row(i)
                    .iter()
                    .zip(xv)
                    .map(|(&a, &b)| a as f64 * b)
                    .sum::<f64>()
            })
            .collect();
        Ok(self.push(Op::MatVec { param, x }, out))
    }

    fn same_len(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (la, lb) = (self.nodes[a.0].value.len(), self.nodes[b.0].value.len());
        if la != lb {
            return Err(shape_err(op, format!("lengths {la} and {lb}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len("add", a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len("mul", a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a).iter().map(|x| x * factor).collect();
        self.push(Op::Scale(a, factor), v)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let v = parts.iter().flat_map(|p| self.value(*p).iter().copied()).collect();
        self.push(Op::Concat(parts.to_vec()), v)
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if start + len > xv.len() {
            return Err(shape_err(
                "slice",
                format!("[{start}, {}) out of {}", start + len, xv.len()),
            ));
        }
        let v = xv[start..start + len].to_vec();
        Ok(self.push(Op::Slice { x, start }, v))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).iter().map(|&z| sigmoid(z)).collect();
        self.push(Op::Sigmoid(x), v)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).iter().map(|z| z.tanh()).collect();
        self.push(Op::Tanh(x), v)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).iter().map(|&z| z.max(0.0)).collect();
        self.push(Op::Relu(x), v)
    }

    /// `[row_0 · v, row_1 · v, ...]`.
    pub fn row_dots(&mut self, rows: &[NodeId], v: NodeId) -> Result<NodeId> {
        let vv = self.value(v);
        let mut out = Vec::with_capacity(rows.len());
        for r in rows {
            let rv = self.value(*r);
            if rv.len() != vv.len() {
                return Err(shape_err(
                    "row_dots",
                    format!("row of length {} against vector of {}", rv.len(), vv.len()),
                ));
            }
            out.push(rv.iter().zip(vv).map(|(a, b)| a * b).sum());
        }
        Ok(self.push(Op::RowDots { rows: rows.to_vec(), v }, out))
    }

    fn check_mask(&self, op: &'static str, x: NodeId, mask: &[bool]) -> Result<()> {
        let n = self.value(x).len();
        if mask.len() != n {
            return Err(shape_err(op, format!("mask of {} for {n} scores", mask.len())));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidArgument(format!("{op}: every position is masked")));
        }
        Ok(())
    }

    fn log_normalizer(&self, x: NodeId, mask: &[bool]) -> f64 {
        let xv = self.value(x);
        let max = xv
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = xv
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| (v - max).exp())
            .sum();
        max + sum.ln()
    }

    /// Log-probabilities over unmasked positions; masked ones are `−∞`.
    pub fn log_softmax(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        self.check_mask("log_softmax", x, mask)?;
        let lz = self.log_normalizer(x, mask);
        let v = self
            .value(x)
            .iter()
            .zip(mask)
            .map(|(&s, &m)| if m { s - lz } else { f64::NEG_INFINITY })
            .collect();
        Ok(self.push(Op::LogSoftmax { x, mask: mask.to_vec() }, v))
    }

    /// Probabilities over unmasked positions; masked ones are 0.
    pub fn masked_softmax(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        self.check_mask("masked_softmax", x, mask)?;
        let lz = self.log_normalizer(x, mask);
        let v = self
            .value(x)
            .iter()
            .zip(mask)
            .map(|(&s, &m)| if m { (s - lz).exp() } else { 0.0 })
            .collect();
        Ok(self.push(Op::Softmax { x, mask: mask.to_vec() }, v))
    }

    pub fn pick(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if index >= xv.len() {
            return Err(shape_err("pick", format!("index {index} out of {}", xv.len())));
        }
        let v = vec![xv[index]];
        Ok(self.push(Op::Pick { x, index }, v))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = vec![self.value(x).iter().sum()];
        self.push(Op::Sum(x), v)
    }

    /// Entropy `−Σ p log p` of a log-probability node (`−∞` entries skipped).
    pub fn entropy(&mut self, logp: NodeId) -> NodeId {
        let h = -self
            .value(logp)
            .iter()
            .filter(|l| l.is_finite())
            .map(|&l| l.exp() * l)
            .sum::<f64>();
        self.push(Op::Entropy(logp), vec![h])
    }

    /// Backpropagates scalar seeds `(node, d loss / d node)` and accumulates
    /// parameter gradients into `grads`.
    pub fn backward(&self, seeds: &[(NodeId, f64)], grads: &mut Gradients) -> Result<Adjoints> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument("backward on an empty tape".into()));
        }
        let mut adj: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        let mut last = 0;
        for &(n, g) in seeds {
            if n.0 >= self.nodes.len() {
                return Err(Error::InvalidArgument(format!("seed node {} not on this tape", n.0)));
            }
            if self.nodes[n.0].value.len() != 1 {
                return Err(shape_err("backward", "seed nodes must be scalars".into()));
            }
            adj[n.0][0] += g;
            last = last.max(n.0);
        }
        for i in (0..=last).rev() {
            if adj[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut adj[i]);
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::ParamRow { param, row } => {
                    for (d, s) in grads.row_mut(*param, *row).iter_mut().zip(&g) {
                        *d += s;
                    }
                }
                Op::ParamVec { param } => {
                    for (d, s) in grads.dense_mut(*param).iter_mut().zip(&g) {
                        *d += s;
                    }
                }
                Op::MatVec { param, x } => {
                    let w = self.params.get(*param);
                    let xv = &self.nodes[x.0].value;
                    let dw = grads.dense_mut(*param);
                    let ax = &mut adj[x.0];
                    for (r, &gr) in g.iter().enumerate() {
                        if gr == 0.0 {
                            continue;
                        }
                        let wrow = w.row(r);
                        let drow = &mut dw[r * w.cols..(r + 1) * w.cols];
                        for c in 0..w.cols {
                            drow[c] += gr * xv[c];
                            ax[c] += gr * wrow[c] as f64;
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(&mut adj[a.0], &g);
                    add_into(&mut adj[b.0], &g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                    let gb: Vec<f64> = g.iter().zip(av).map(|(g, a)| g * a).collect();
                    add_into(&mut adj[a.0], &ga);
                    add_into(&mut adj[b.0], &gb);
                }
                Op::Scale(a, f) => {
                    for (d, s) in adj[a.0].iter_mut().zip(&g) {
                        *d += s * f;
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        add_into(&mut adj[p.0], &g[off..off + n]);
                        off += n;
                    }
                }
                Op::Slice { x, start } => {
                    add_into(&mut adj[x.0][*start..*start + g.len()], &g);
                }
                Op::Sigmoid(x) => {
                    for ((d, s), y) in adj[x.0].iter_mut().zip(&g).zip(&node.value) {
                        *d += s * y * (1.0 - y);
                    }
                }
                Op::Tanh(x) => {
                    for ((d, s), y) in adj[x.0].iter_mut().zip(&g).zip(&node.value) {
                        *d += s * (1.0 - y * y);
                    }
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    for ((d, s), &z) in adj[x.0].iter_mut().zip(&g).zip(xv) {
                        if z > 0.0 {
                            *d += s;
                        }
                    }
                }
                Op::RowDots { rows, v } => {
                    let vv = self.nodes[v.0].value.clone();
                    let mut gv = vec![0.0; vv.len()];
                    for (r, &gr) in rows.iter().zip(&g) {
                        if gr == 0.0 {
                            continue;
                        }
                        let rv = &self.nodes[r.0].value;
                        for k in 0..vv.len() {
                            gv[k] += gr * rv[k];
                        }
                        for (d, &x) in adj[r.0].iter_mut().zip(&vv) {
                            *d += gr * x;
                        }
                    }
                    add_into(&mut adj[v.0], &gv);
                }
                Op::LogSoftmax { x, mask } => {
                    // d l_i / d x_j = δ_ij − p_j
                    let total: f64 = g.iter().zip(mask).filter(|(_, &m)| m).map(|(g, _)| g).sum();
                    for (j, d) in adj[x.0].iter_mut().enumerate() {
                        if mask[j] {
                            *d += g[j] - total * node.value[j].exp();
                        }
                    }
                }
                Op::Softmax { x, mask } => {
                    let p = &node.value;
                    let dot: f64 = g.iter().zip(p).map(|(g, p)| g * p).sum();
                    for (j, d) in adj[x.0].iter_mut().enumerate() {
                        if mask[j] {
                            *d += p[j] * (g[j] - dot);
                        }
                    }
                }
                Op::Pick { x, index } => {
                    adj[x.0][*index] += g[0];
                }
                Op::Sum(x) => {
                    adj[x.0].iter_mut().for_each(|d| *d += g[0]);
                }
                Op::Entropy(l) => {
                    // H = −Σ e^{l} l  ⇒  ∂H/∂l_i = −e^{l_i}(l_i + 1)
                    let lv = &self.nodes[l.0].value;
                    for (d, &li) in adj[l.0].iter_mut().zip(lv) {
                        if li.is_finite() {
                            *d += -g[0] * li.exp() * (li + 1.0);
                        }
                    }
                }
            }
            adj[i] = g;
        }
        Ok(Adjoints(adj))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

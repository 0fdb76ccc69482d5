//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and [`Graph::backward`] is a single reverse sweep.

use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Variable,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Pow(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MeanPoolBags {
        table: Var,
        bags: Vec<Vec<usize>>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Pick {
        x: Var,
        cols: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Gradients of a scalar root with respect to every leaf on the tape.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for a leaf (`variable` or `param`) node, if it was reached.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients keyed by parameter id. A parameter bound more than once on
    /// the tape receives the sum over its bindings, in tape order.
    pub fn param_grads(&self) -> BTreeMap<usize, Tensor> {
        let mut out: BTreeMap<usize, Tensor> = BTreeMap::new();
        for &(id, node) in &self.params {
            if let Some(g) = &self.leaves[node] {
                match out.get_mut(&id) {
                    Some(acc) => acc.add_assign(g).expect("same parameter, same shape"),
                    None => {
                        out.insert(id, g.clone());
                    }
                }
            }
        }
        out
    }
}

fn gelu_inner(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::get`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Variable, true)
    }

    /// A leaf bound to parameter `id`; see [`Gradients::param_grads`].
    pub fn param(&mut self, id: usize, value: Tensor) -> Var {
        self.push(value, Op::Param(id), true)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let needs = self.needs(x);
        self.push(value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// Adds `bias` (`[c]`) to every row of `x` (`[.., c]`).
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(bias).len() != c {
            return Err(Error::shape(format!(
                "row bias of {:?} does not fit {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..value.rows() {
            for (v, bb) in value.row_mut(r).iter_mut().zip(&b) {
                *v += bb;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddRow(x, bias), needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    /// `a × bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [n, k2]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(Error::shape(format!(
                    "matmul_t needs [m x k] and [n x k], got {sa:?} and {sb:?}"
                )))
            }
        };
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            0.0,
        );
        let value = Tensor::matrix(m, n, out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMulT(a, b), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Transpose(x), needs))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| gelu_inner(v).0, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Usage("log of a non-positive value".into()));
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    /// Elementwise `x^p` for non-negative `x`.
    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < 0.0) {
            return Err(Error::Usage("powf of a negative base".into()));
        }
        Ok(self.unary(x, |v| v.powf(p), Op::Pow(x, p)))
    }

    /// Softmax along `axis`. Axis `rank-1` is the row-wise case; axis 0 of
    /// a matrix is handled by transposition.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let rank = self.value(x).rank();
        if axis + 1 == rank {
            return Ok(self.softmax_rows(x));
        }
        if axis == 0 && rank == 2 {
            let t = self.transpose(x)?;
            let s = self.softmax_rows(t);
            return self.transpose(s);
        }
        Err(Error::shape(format!("softmax axis {axis} invalid for rank {rank}")))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mut value = Tensor::zeros(src.shape());
        for r in 0..src.rows() {
            softmax_row(src.row(r), value.row_mut(r));
        }
        let needs = self.needs(x);
        self.push(value, Op::Softmax(x), needs)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mut value = Tensor::zeros(src.shape());
        for r in 0..src.rows() {
            let row = src.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (d, s) in value.row_mut(r).iter_mut().zip(row) {
                *d = s - lse;
            }
        }
        let needs = self.needs(x);
        self.push(value, Op::LogSoftmax(x), needs)
    }

    /// Row-wise layer normalization with affine `gain` and `bias` (`[c]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Usage("layer_norm eps must be positive".into()));
        }
        let src = self.value(x);
        let c = src.cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape(format!(
                "layer_norm affine params must have {c} entries"
            )));
        }
        let rows = src.rows();
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = src.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (j, v) in row.iter().enumerate() {
                xhat[r * c + j] = (v - mean) * is;
            }
        }
        let gd = self.value(gain).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; xhat.len()];
        for r in 0..rows {
            for j in 0..c {
                out[r * c + j] = xhat[r * c + j] * gd[j] + bd[j];
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Gathers rows of `table` (`[V×d]`) into `[ids.len()×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = (t.rows(), t.cols());
        if ids.is_empty() {
            return Err(Error::shape("embedding lookup with no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index { index: id, size: v });
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::matrix(ids.len(), d, out)?;
        let needs = self.needs(table);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Mean of `table` rows per bag, `[bags.len()×d]`. Empty bags give zero rows.
    pub fn mean_pool_bags(&mut self, table: Var, bags: &[Vec<usize>]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = (t.rows(), t.cols());
        if bags.is_empty() {
            return Err(Error::shape("mean_pool_bags with no bags"));
        }
        let mut out = vec![0.0; bags.len() * d];
        for (b, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                continue;
            }
            let dst = &mut out[b * d..(b + 1) * d];
            for &id in bag {
                if id >= v {
                    return Err(Error::Index { index: id, size: v });
                }
                for (o, x) in dst.iter_mut().zip(t.row(id)) {
                    *o += x;
                }
            }
            let inv = 1.0 / bag.len() as f64;
            dst.iter_mut().for_each(|o| *o *= inv);
        }
        let value = Tensor::matrix(bags.len(), d, out)?;
        let needs = self.needs(table);
        Ok(self.push(
            value,
            Op::MeanPoolBags {
                table,
                bags: bags.to_vec(),
            },
            needs,
        ))
    }

    /// Inverted dropout with an explicit seeded mask. `p = 0` returns `x`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Usage(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Dropout { x, mask }, needs))
    }

    /// Columns `start..start+len` of a row-major tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        let c = src.cols();
        if len == 0 || start + len > c {
            return Err(Error::shape(format!(
                "column slice {start}..{} out of {c}",
                start + len
            )));
        }
        let rows = src.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src.row(r)[start..start + len]);
        }
        let value = Tensor::matrix(rows, len, out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SliceCols { x, start }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).rows(),
            None => return Err(Error::shape("concat of nothing")),
        };
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::matrix(rows, total, out)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Selects rows of a matrix by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let (n, c) = (src.rows(), src.cols());
        if rows.is_empty() {
            return Err(Error::shape("gather of no rows"));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(Error::Index { index: r, size: n });
            }
            out.extend_from_slice(src.row(r));
        }
        let value = Tensor::matrix(rows.len(), c, out)?;
        let needs = self.needs(x);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            needs,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &rows)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) => self.value(p).cols(),
            None => return Err(Error::shape("concat of nothing")),
        };
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::shape("concat_rows column counts differ"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / cols;
        let value = Tensor::matrix(rows, cols, out)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), needs))
    }

    /// `out[i] = x[i, cols[i]]`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let (n, c) = (src.rows(), src.cols());
        if cols.len() != n {
            return Err(Error::shape(format!(
                "pick needs one column per row ({n}), got {}",
                cols.len()
            )));
        }
        let mut out = Vec::with_capacity(n);
        for (r, &j) in cols.iter().enumerate() {
            if j >= c {
                return Err(Error::Index { index: j, size: c });
            }
            out.push(src.row(r)[j]);
        }
        let value = Tensor::vector(out)?;
        let needs = self.needs(x);
        Ok(self.push(
            value,
            Op::Pick {
                x,
                cols: cols.to_vec(),
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(value, Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let needs = self.needs(x);
        self.push(value, Op::Mean(x), needs)
    }

    /// Scales each row to unit L2 norm. A zero row is an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let mut value = src.clone();
        let mut norms = Vec::with_capacity(src.rows());
        for r in 0..src.rows() {
            let norm = src.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Data(format!("row {r} has zero or non-finite norm")));
            }
            value.row_mut(r).iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let needs = self.needs(x);
        Ok(self.push(value, Op::L2NormalizeRows { x, norms }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// Allows one more call to [`Graph::backward`] on this tape.
    pub fn reset_backward(&mut self) {
        self.backward_done = false;
    }

    /// Reverse sweep from a scalar `root`.
    ///
    /// A second call without [`Graph::reset_backward`] is a usage error.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this tape; call reset_backward first".into(),
            ));
        }
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        if !root_value.item().is_finite() {
            return Err(Error::Usage("backward from a non-finite root".into()));
        }
        let seed = Tensor::filled(root_value.shape(), 1.0);
        self.backward_done = true;

        let n = root.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, g, &mut grads, &mut leaves, i);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| match node.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { leaves, params })
    }

    fn propagate(
        &self,
        node: &Node,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        leaves: &mut [Option<Tensor>],
        index: usize,
    ) {
        let nodes = &self.nodes;
        macro_rules! with_acc {
            ($v:expr, |$t:ident| $body:expr) => {
                if let Some($t) = slot(nodes, grads, $v) {
                    $body
                }
            };
        }
        let gd = g.data();
        match &node.op {
            Op::Constant => {}
            Op::Variable | Op::Param(_) => leaves[index] = Some(g),
            Op::Add(a, b) => {
                with_acc!(*a, |t| add_into(t.data_mut(), gd));
                with_acc!(*b, |t| add_into(t.data_mut(), gd));
            }
            Op::Sub(a, b) => {
                with_acc!(*a, |t| add_into(t.data_mut(), gd));
                with_acc!(*b, |t| t
                    .data_mut()
                    .iter_mut()
                    .zip(gd)
                    .for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                with_acc!(*a, |t| t
                    .data_mut()
                    .iter_mut()
                    .zip(gd.iter().zip(bv))
                    .for_each(|(x, (gg, bb))| *x += gg * bb));
                with_acc!(*b, |t| t
                    .data_mut()
                    .iter_mut()
                    .zip(gd.iter().zip(av))
                    .for_each(|(x, (gg, aa))| *x += gg * aa));
            }
            Op::Scale(a, c) => {
                with_acc!(*a, |t| t
                    .data_mut()
                    .iter_mut()
                    .zip(gd)
                    .for_each(|(x, y)| *x += c * y));
            }
            Op::AddRow(x, bias) => {
                with_acc!(*x, |t| add_into(t.data_mut(), gd));
                with_acc!(*bias, |t| {
                    let c = t.len();
                    for row in gd.chunks(c) {
                        add_into(t.data_mut(), row);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let nn = self.value(*b).cols();
                // dA = G·Bᵀ, dB = Aᵀ·G
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                with_acc!(*a, |t| gemm(m, nn, k, gd, false, bv, true, t.data_mut(), 1.0));
                with_acc!(*b, |t| gemm(k, m, nn, av, true, gd, false, t.data_mut(), 1.0));
            }
            Op::MatMulT(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let nn = self.value(*b).rows();
                // out = A·Bᵀ; dA = G·B, dB = Gᵀ·A
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                with_acc!(*a, |t| gemm(m, nn, k, gd, false, bv, false, t.data_mut(), 1.0));
                with_acc!(*b, |t| gemm(nn, m, k, gd, true, av, false, t.data_mut(), 1.0));
            }
            Op::Transpose(x) => {
                let gt = g.transpose().expect("matrix");
                with_acc!(*x, |t| add_into(t.data_mut(), gt.data()));
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                with_acc!(*x, |t| t
                    .data_mut()
                    .iter_mut()
                    .zip(gd.iter().zip(y))
                    .for_each(|(d, (gg, yy))| *d += gg * (1.0 - yy * yy)));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                with_acc!(*x, |t| t
                    .data_mut()
                    .iter_mut()
                    .zip(gd.iter().zip(xv))
                    .for_each(|(d, (gg, xx))| *d += gg * gelu_inner(*xx).1));
            }
            Op::Exp(x) => {
                let y = node.value.data();
                with_acc!(*x, |t| t
                    .data_mut()
                    .iter_mut()
                    .zip(gd.iter().zip(y))
                    .for_each(|(d, (gg, yy))| *d += gg * yy));
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                with_acc!(*x, |t| t
                    .data_mut()
                    .iter_mut()
                    .zip(gd.iter().zip(xv))
                    .for_each(|(d, (gg, xx))| *d += gg / xx));
            }
            Op::Pow(x, p) => {
                let xv = self.value(*x).data();
                with_acc!(*x, |t| t
                    .data_mut()
                    .iter_mut()
                    .zip(gd.iter().zip(xv))
                    .for_each(|(d, (gg, xx))| {
                        if *xx != 0.0 || *p >= 1.0 {
                            *d += gg * p * xx.powf(p - 1.0);
                        }
                    }));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                with_acc!(*x, |t| {
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), &gd[r * y.cols()..(r + 1) * y.cols()]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yy), gg) in t.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d += yy * (gg - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                with_acc!(*x, |t| {
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), &gd[r * y.cols()..(r + 1) * y.cols()]);
                        let total: f64 = gr.iter().sum();
                        for ((d, yy), gg) in t.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d += gg - yy.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let rows = node.value.rows();
                let gv = self.value(*gain).data();
                with_acc!(*x, |t| {
                    let td = t.data_mut();
                    for r in 0..rows {
                        let gr = &gd[r * c..(r + 1) * c];
                        let xr = &xhat[r * c..(r + 1) * c];
                        let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx =
                            dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            td[r * c + j] += inv_std[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                });
                with_acc!(*gain, |t| {
                    let td = t.data_mut();
                    for (i, (gg, xh)) in gd.iter().zip(xhat.iter()).enumerate() {
                        td[i % c] += gg * xh;
                    }
                });
                with_acc!(*bias, |t| {
                    for row in gd.chunks(c) {
                        add_into(t.data_mut(), row);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                with_acc!(*table, |t| {
                    let d = t.cols();
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(t.row_mut(id), &gd[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::MeanPoolBags { table, bags } => {
                with_acc!(*table, |t| {
                    let d = t.cols();
                    for (b, bag) in bags.iter().enumerate() {
                        if bag.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / bag.len() as f64;
                        let gr = &gd[b * d..(b + 1) * d];
                        for &id in bag {
                            for (dst, gg) in t.row_mut(id).iter_mut().zip(gr) {
                                *dst += gg * inv;
                            }
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                with_acc!(*x, |t| t
                    .data_mut()
                    .iter_mut()
                    .zip(gd.iter().zip(mask))
                    .for_each(|(d, (gg, m))| *d += gg * m));
            }
            Op::SliceCols { x, start } => {
                let len = node.value.cols();
                with_acc!(*x, |t| {
                    for r in 0..node.value.rows() {
                        add_into(
                            &mut t.row_mut(r)[*start..start + len],
                            &gd[r * len..(r + 1) * len],
                        );
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    with_acc!(p, |t| {
                        for r in 0..node.value.rows() {
                            add_into(t.row_mut(r), &gd[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::GatherRows { x, rows } => {
                let c = node.value.cols();
                with_acc!(*x, |t| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(t.row_mut(r), &gd[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    with_acc!(p, |t| add_into(t.data_mut(), &gd[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Pick { x, cols } => {
                with_acc!(*x, |t| {
                    for (r, &j) in cols.iter().enumerate() {
                        t.row_mut(r)[j] += gd[r];
                    }
                });
            }
            Op::Sum(x) => {
                let gg = gd[0];
                with_acc!(*x, |t| t.data_mut().iter_mut().for_each(|d| *d += gg));
            }
            Op::Mean(x) => {
                let gg = gd[0] / self.value(*x).len() as f64;
                with_acc!(*x, |t| t.data_mut().iter_mut().for_each(|d| *d += gg));
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let c = y.cols();
                with_acc!(*x, |t| {
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), &gd[r * c..(r + 1) * c]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yy), gg) in t.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d += (gg - yy * dot) / norms[r];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                with_acc!(*x, |t| add_into(t.data_mut(), gd));
            }
        }
    }
}

/// Accumulator for `v`, allocated on first use; None when `v` needs no gradient.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut Tensor> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape())))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

//! Tape of recorded operations and its reverse sweep.
//!
//! Nodes are appended in evaluation order, so the tape is already
//! topologically sorted. `backward` walks it once from the root down and
//! accumulates gradients additively into every input.

use std::collections::BTreeMap;

use super::gemm::{gemm, MatRef};
use super::tensor::{row_nll, softmax_in_place, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow { a: Var, row: Var },
    MulCol { a: Var, col: Var },
    DivCol { a: Var, col: Var },
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Silu(Var),
    XLogX(Var),
    SoftmaxRows(Var),
    SumRows(Var),
    SumCols(Var),
    SumAll(Var),
    GatherRows { a: Var, idx: Vec<usize> },
    ScatterAddRows { a: Var, idx: Vec<usize> },
    GatherElems { a: Var, idx: Vec<(usize, usize)> },
    Slice { a: Var, row0: usize, col0: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every `requires_grad` leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    /// Gradient for `var`, or zeros shaped like `like` when the leaf was unused.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.grads
            .get(&var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        dims(self.value(v))
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Record a leaf. Its gradient is reported iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_grad(false))
    }

    pub fn param(&mut self, tensor: &Tensor) -> Var {
        self.leaf(tensor.clone().with_grad(true))
    }

    /// `a @ b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(shape_err(
                "matmul",
                format!("[{m},{k}] x [{br},{bc}]{}", if trans_b { "^T" } else { "" }),
            ));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = MatRef::new(self.value(a).data(), m, k);
            let bm = MatRef::new(self.value(b).data(), br, bc);
            let bv = if trans_b { bm.t() } else { bm };
            gemm(av, bv, &mut out, false);
        }
        let ng = self.ng(&[a, b]);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul { a, b, trans_b }, ng, "matmul")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        self.push(t, op, ng, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    /// `a[r, c] + row[0, c]` for every row `r`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(shape_err("add_row", format!("[{r},{c}] + {:?}", self.value(row).shape())));
        }
        let bias = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, b) in chunk.iter_mut().zip(bias) {
                *o += b;
            }
        }
        let ng = self.ng(&[a, row]);
        self.push(Tensor::matrix(r, c, out)?, Op::AddRow { a, row }, ng, "add_row")
    }

    fn col_broadcast(&mut self, a: Var, col: Var, divide: bool) -> Result<Var> {
        let name = if divide { "div_col" } else { "mul_col" };
        let (r, c) = self.shape(a);
        if self.shape(col) != (r, 1) {
            return Err(shape_err(name, format!("[{r},{c}] with {:?}", self.value(col).shape())));
        }
        let s = self.value(col).data();
        let mut out = self.value(a).data().to_vec();
        for (chunk, &k) in out.chunks_mut(c).zip(s) {
            for o in chunk.iter_mut() {
                if divide {
                    *o /= k;
                } else {
                    *o *= k;
                }
            }
        }
        let ng = self.ng(&[a, col]);
        let op = if divide { Op::DivCol { a, col } } else { Op::MulCol { a, col } };
        self.push(Tensor::matrix(r, c, out)?, op, ng, name)
    }

    /// `a[r, c] * col[r, 0]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.col_broadcast(a, col, false)
    }

    /// `a[r, c] / col[r, 0]`.
    pub fn div_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.col_broadcast(a, col, true)
    }

    fn map(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let va = self.value(a);
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())?;
        let ng = self.ng(&[a]);
        self.push(t, op, ng, name)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, k), "scale", |x| x * k)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        self.map(a, Op::AddScalar(a), "add_scalar", |x| x + k)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), "exp", f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Log(a), "log", f64::ln)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Silu(a), "silu", |x| x * sigmoid(x))
    }

    /// Elementwise `x ln x` with `0 ln 0 = 0`; inputs must be nonnegative.
    pub fn xlogx(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::InvalidDistribution("xlogx of a negative value".into()));
        }
        self.map(a, Op::XLogX(a), "xlogx", |x| if x == 0.0 { 0.0 } else { x * x.ln() })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut t = self.value(a).clone().with_grad(false);
        let c = t.cols();
        for row in t.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let ng = self.ng(&[a]);
        self.push(t, Op::SoftmaxRows(a), ng, "softmax_rows")
    }

    /// Sum along columns: `[r, c] -> [r, 1]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (_, c) = self.shape(a);
        let out: Vec<f64> = self.value(a).data().chunks(c).map(|ch| ch.iter().sum()).collect();
        let ng = self.ng(&[a]);
        self.push(Tensor::col(out), Op::SumRows(a), ng, "sum_rows")
    }

    /// Sum along rows: `[r, c] -> [1, c]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (_, c) = self.shape(a);
        let mut out = vec![0.0; c];
        for chunk in self.value(a).data().chunks(c) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::row(out), Op::SumCols(a), ng, "sum_cols")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng, "sum_all")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean along rows: `[r, c] -> [1, c]`.
    pub fn mean_cols(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).0 as f64;
        let s = self.sum_cols(a)?;
        self.scale(s, 1.0 / r)
    }

    /// Rows `idx` of `a`, in order. Embedding lookup is a gather on the table.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::OutOfRange {
                    what: "gather_rows",
                    index: i,
                    limit: r,
                });
            }
            out.extend_from_slice(self.value(a).row_slice(i));
        }
        if idx.is_empty() {
            return Err(shape_err("gather_rows", "empty index list"));
        }
        let ng = self.ng(&[a]);
        self.push(
            Tensor::matrix(idx.len(), c, out)?,
            Op::GatherRows { a, idx: idx.to_vec() },
            ng,
            "gather_rows",
        )
    }

    /// `out[idx[i]] += a[i]` into a zero `[out_rows, c]` matrix.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], out_rows: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if idx.len() != r {
            return Err(shape_err("scatter_add_rows", format!("{r} rows but {} indices", idx.len())));
        }
        let mut out = vec![0.0; out_rows * c];
        for (i, &dst) in idx.iter().enumerate() {
            if dst >= out_rows {
                return Err(Error::OutOfRange {
                    what: "scatter_add_rows",
                    index: dst,
                    limit: out_rows,
                });
            }
            for (o, v) in out[dst * c..(dst + 1) * c].iter_mut().zip(self.value(a).row_slice(i)) {
                *o += v;
            }
        }
        let ng = self.ng(&[a]);
        self.push(
            Tensor::matrix(out_rows, c, out)?,
            Op::ScatterAddRows { a, idx: idx.to_vec() },
            ng,
            "scatter_add_rows",
        )
    }

    /// Elements `a[r, c]` for each `(r, c)` in `idx`, as a column.
    pub fn gather_elems(&mut self, a: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.shape(a);
        let mut out = Vec::with_capacity(idx.len());
        for &(i, j) in idx {
            if i >= r || j >= c {
                return Err(Error::OutOfRange {
                    what: "gather_elems",
                    index: i * c + j,
                    limit: r * c,
                });
            }
            out.push(self.value(a).get(i, j));
        }
        if out.is_empty() {
            return Err(shape_err("gather_elems", "empty index list"));
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::col(out), Op::GatherElems { a, idx: idx.to_vec() }, ng, "gather_elems")
    }

    /// Sub-matrix `a[rows, cols]`.
    pub fn slice(&mut self, a: Var, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if rows.end > r || cols.end > c || rows.is_empty() || cols.is_empty() {
            return Err(shape_err("slice", format!("[{rows:?}, {cols:?}] of [{r},{c}]")));
        }
        let w = cols.len();
        let mut out = Vec::with_capacity(rows.len() * w);
        for i in rows.clone() {
            out.extend_from_slice(&self.value(a).row_slice(i)[cols.clone()]);
        }
        let ng = self.ng(&[a]);
        self.push(
            Tensor::matrix(rows.len(), w, out)?,
            Op::Slice {
                a,
                row0: rows.start,
                col0: cols.start,
            },
            ng,
            "slice",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.shape(p).1)
            .ok_or_else(|| shape_err("concat_rows", "no parts"))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != c {
                return Err(shape_err("concat_rows", format!("column counts {c} and {pc}")));
            }
            out.extend_from_slice(self.value(p).data());
            rows += pr;
        }
        let ng = self.ng(parts);
        self.push(Tensor::matrix(rows, c, out)?, Op::ConcatRows(parts.to_vec()), ng, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| shape_err("concat_cols", "no parts"))?;
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p).1).collect();
        if parts.iter().any(|&p| self.shape(p).0 != r) {
            return Err(shape_err("concat_cols", "row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            for i in 0..r {
                out[i * total + offset..i * total + offset + w].copy_from_slice(self.value(p).row_slice(i));
            }
            offset += w;
        }
        let ng = self.ng(parts);
        self.push(Tensor::matrix(r, total, out)?, Op::ConcatCols(parts.to_vec()), ng, "concat_cols")
    }

    /// Per-row layer normalisation with affine `gamma`, `beta` of shape `[1, c]`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(shape_err("layernorm", "gamma/beta must be [1, cols]"));
        }
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for i in 0..r {
            let row = self.value(x).row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            Tensor::matrix(r, c, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
            "layernorm",
        )
    }

    /// Mean `-log softmax(logits)[target]` over rows, as a `[1, 1]` node.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (t, v) = self.shape(logits);
        if targets.len() != t {
            return Err(shape_err("cross_entropy_mean", format!("{t} rows but {} targets", targets.len())));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            if target >= v {
                return Err(Error::OutOfRange {
                    what: "target token",
                    index: target,
                    limit: v,
                });
            }
            total += row_nll(self.value(logits).row_slice(r), target);
            softmax_in_place(&mut probs[r * v..(r + 1) * v]);
        }
        let ng = self.ng(&[logits]);
        self.push(
            Tensor::scalar(total / t as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
            "cross_entropy_mean",
        )
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("root must be scalar, got shape {:?}", self.value(root).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for (idx, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[idx];
            if let (Op::Leaf, true, Some(g)) = (&node.op, node.value.requires_grad(), g) {
                out.grads
                    .insert(Var(idx), Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(out)
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        let (r, c) = dims(out);
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.shape(*a);
                let (br, bc) = self.shape(*b);
                let n = c;
                let gm = MatRef::new(g, m, n);
                let bv = MatRef::new(self.value(*b).data(), br, bc);
                let av = MatRef::new(self.value(*a).data(), m, k);
                // dA = G B^T  (or G B when b was used transposed)
                acc(*a, &mut |s| {
                    let bt = if *trans_b { bv } else { bv.t() };
                    gemm(gm, bt, s, true);
                });
                // dB = A^T G  (or G^T A)
                acc(*b, &mut |s| {
                    if *trans_b {
                        gemm(gm.t(), av, s, true);
                    } else {
                        gemm(av.t(), gm, s, true);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / vb[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                    }
                });
            }
            Op::AddRow { a, row } => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*row, &mut |s| {
                    for chunk in g.chunks(c) {
                        add_into(s, chunk);
                    }
                });
            }
            Op::MulCol { a, col } => {
                let (va, vc) = (self.value(*a).data(), self.value(*col).data());
                acc(*a, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[i * c + j] * vc[i];
                        }
                    }
                });
                acc(*col, &mut |s| {
                    for i in 0..r {
                        s[i] += (0..c).map(|j| g[i * c + j] * va[i * c + j]).sum::<f64>();
                    }
                });
            }
            Op::DivCol { a, col } => {
                let (va, vc) = (self.value(*a).data(), self.value(*col).data());
                acc(*a, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[i * c + j] / vc[i];
                        }
                    }
                });
                acc(*col, &mut |s| {
                    for i in 0..r {
                        let dot: f64 = (0..c).map(|j| g[i * c + j] * va[i * c + j]).sum();
                        s[i] -= dot / (vc[i] * vc[i]);
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * k)),
            Op::AddScalar(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::Exp(a) => {
                let y = out.data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i];
                    }
                });
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / x[i];
                    }
                });
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        let sg = sigmoid(x[i]);
                        s[i] += g[i] * sg * (1.0 + x[i] * (1.0 - sg));
                    }
                });
            }
            Op::XLogX(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * (x[i].ln() + 1.0);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = out.data();
                acc(*a, &mut |s| {
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(g, y)| g * y).sum();
                        for j in row {
                            s[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::SumRows(a) => {
                let ac = self.shape(*a).1;
                acc(*a, &mut |s| {
                    for (chunk, gi) in s.chunks_mut(ac).zip(g) {
                        chunk.iter_mut().for_each(|v| *v += gi);
                    }
                });
            }
            Op::SumCols(a) => acc(*a, &mut |s| {
                for chunk in s.chunks_mut(c) {
                    add_into(chunk, g);
                }
            }),
            Op::SumAll(a) => acc(*a, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::GatherRows { a, idx } => acc(*a, &mut |s| {
                for (k, &i) in idx.iter().enumerate() {
                    add_into(&mut s[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                }
            }),
            Op::ScatterAddRows { a, idx } => acc(*a, &mut |s| {
                for (k, &i) in idx.iter().enumerate() {
                    add_into(&mut s[k * c..(k + 1) * c], &g[i * c..(i + 1) * c]);
                }
            }),
            Op::GatherElems { a, idx } => {
                let ac = self.shape(*a).1;
                acc(*a, &mut |s| {
                    for (k, &(i, j)) in idx.iter().enumerate() {
                        s[i * ac + j] += g[k];
                    }
                });
            }
            Op::Slice { a, row0, col0 } => {
                let ac = self.shape(*a).1;
                acc(*a, &mut |s| {
                    for i in 0..r {
                        let dst = (row0 + i) * ac + col0;
                        add_into(&mut s[dst..dst + c], &g[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(p, &mut |s| add_into(s, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    acc(p, &mut |s| {
                        for i in 0..r {
                            add_into(&mut s[i * w..(i + 1) * w], &g[i * c + offset..i * c + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gm = self.value(*gamma).data();
                acc(*gamma, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                acc(*beta, &mut |s| {
                    for chunk in g.chunks(c) {
                        add_into(s, chunk);
                    }
                });
                acc(*x, &mut |s| {
                    let n = c as f64;
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let dxhat: Vec<f64> = row.clone().map(|k| g[k] * gm[k - i * c]).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(&xhat[row.clone()]).map(|(d, h)| d * h).sum();
                        for (jj, k) in row.enumerate() {
                            s[k] += inv_std[i] / n * (n * dxhat[jj] - sum_d - xhat[k] * sum_dx);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.shape(*logits).1;
                let scale = g[0] / targets.len() as f64;
                acc(*logits, &mut |s| {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            s[i * v + j] += scale * (probs[i * v + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

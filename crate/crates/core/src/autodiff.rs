//! Define-by-run reverse-mode differentiation over dense 2-D `f64` tensors.
//!
//! A [`Graph`] is the tape: every operation appends a node holding its
//! output value and the inputs needed for its backward rule. Nodes are
//! appended in evaluation order, so a reverse sweep over the node list is
//! a valid reverse topological order. Graphs are rebuilt per step and are
//! confined to one thread.
//!
//! Parameters live in a [`ParamStore`]; [`Graph::new`] registers them as
//! the first nodes so that `Var` ids `0..P` are the parameters.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `rows × cols` array. Scalars are `1 × 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Tensor::new", &[data.len()], &[rows, cols]));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn row(data: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn column(data: Vec<f64>) -> Self {
        Tensor {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Scalar value of a `1 × 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

/// Naive `a · b` for row-major buffers.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
}

/// `a · bᵀ` with `a: m × k`, `b: n × k`.
fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `aᵀ · b` with `a: k × m`, `b: k × n`.
fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let x = a[p * m + i];
            if x == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Index of a parameter in its store (and of its node in any graph built
/// over that store).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// All values concatenated in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }

    /// Overwrite all values from a flat buffer in declaration order.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::shape(
                "ParamStore::load_flat",
                &[flat.len()],
                &[self.numel()],
            ));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore::new()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl From<ParamId> for Var {
    fn from(p: ParamId) -> Self {
        Var(p.0)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Abs(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Reciprocal(Var),
    Scale(Var, f64),
    Clamp(Var, f64, f64),
    MaskedSoftmax(Var, Arc<[bool]>),
    LayerNorm(Var, Vec<f64>),
    MeanPool(Var, Arc<[bool]>, usize),
    MaxPool(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The differentiation tape.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    n_params: usize,
}

/// Gradients from one backward sweep, indexed by node.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<[usize; 2]>,
    n_params: usize,
}

impl Gradients {
    /// Gradient of a node, `None` for constants and nodes off the loss path.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let [r, c] = self.shapes[v.0];
        self.grads[v.0].as_ref().map(|g| Tensor {
            rows: r,
            cols: c,
            data: g.clone(),
        })
    }

    /// One tensor per parameter (zeros where the loss does not depend on it).
    pub fn params(&self) -> Vec<Tensor> {
        (0..self.n_params)
            .map(|i| {
                let [r, c] = self.shapes[i];
                Tensor {
                    rows: r,
                    cols: c,
                    data: self.grads[i].clone().unwrap_or_else(|| vec![0.0; r * c]),
                }
            })
            .collect()
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl Graph {
    /// Tape seeded with every parameter of `params` as a differentiable leaf.
    pub fn new(params: &ParamStore) -> Self {
        let nodes = params
            .tensors
            .iter()
            .map(|t| Node {
                value: t.clone(),
                op: Op::Leaf,
                requires_grad: true,
            })
            .collect();
        Graph {
            nodes,
            n_params: params.len(),
        }
    }

    /// Tape without parameters.
    pub fn empty() -> Self {
        Graph {
            nodes: Vec::new(),
            n_params: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&self, id: ParamId) -> Var {
        debug_assert!(id.0 < self.n_params);
        Var(id.0)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf that is not a parameter (used by gradient checks).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, &sa, &sb));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        Tensor {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
        }
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = &self.nodes[a.0].value;
        Tensor {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ([m, k], [k2, n]) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let mut out = Tensor::zeros(m, n);
        matmul_into(
            &self.value(a).data,
            &self.value(b).data,
            &mut out.data,
            m,
            k,
            n,
        );
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ([m, k], [n, k2]) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::shape("matmul_nt", &[m, k], &[n, k2]));
        }
        let mut out = Tensor::zeros(m, n);
        matmul_nt_into(
            &self.value(a).data,
            &self.value(b).data,
            &mut out.data,
            m,
            k,
            n,
        );
        Ok(self.push(out, Op::MatMulNT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Add a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let ([m, n], [r, c]) = (self.shape(a), self.shape(row));
        if r != 1 || c != n {
            return Err(Error::shape("add_row", &[m, n], &[r, c]));
        }
        let (x, b) = (&self.value(a).data, &self.value(row).data);
        let data = x.iter().enumerate().map(|(i, &v)| v + b[i % n]).collect();
        Ok(self.push(
            Tensor {
                rows: m,
                cols: n,
                data,
            },
            Op::AddRow(a, row),
            &[a, row],
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Multiply every row of `a` elementwise by a `1 × c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let ([m, n], [r, c]) = (self.shape(a), self.shape(row));
        if r != 1 || c != n {
            return Err(Error::shape("mul_row", &[m, n], &[r, c]));
        }
        let (x, b) = (&self.value(a).data, &self.value(row).data);
        let data = x.iter().enumerate().map(|(i, &v)| v * b[i % n]).collect();
        Ok(self.push(
            Tensor {
                rows: m,
                cols: n,
                data,
            },
            Op::MulRow(a, row),
            &[a, row],
        ))
    }

    /// `|a|`; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::abs);
        self.push(out, Op::Abs(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::ln);
        self.push(out, Op::Log(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x * x);
        self.push(out, Op::Square(a), &[a])
    }

    pub fn reciprocal(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::recip);
        self.push(out, Op::Reciprocal(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| c * x);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.map(a, |x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi), &[a])
    }

    /// Row-wise softmax over positions where `mask` is true. Masked
    /// positions get exactly zero weight. `mask` has the shape of `a`.
    pub fn masked_softmax(&mut self, a: Var, mask: Arc<[bool]>) -> Result<Var> {
        let [m, n] = self.shape(a);
        if mask.len() != m * n {
            return Err(Error::shape("masked_softmax", &[m, n], &[mask.len()]));
        }
        let x = &self.value(a).data;
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = r * n..(r + 1) * n;
            let mx = row
                .clone()
                .filter(|&k| mask[k])
                .map(|k| x[k])
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(Error::domain(format!(
                    "masked_softmax row {r} is fully masked"
                )));
            }
            let mut z = 0.0;
            for k in row.clone() {
                if mask[k] {
                    let e = (x[k] - mx).exp();
                    out[k] = e;
                    z += e;
                }
            }
            for k in row {
                if mask[k] {
                    out[k] /= z;
                }
            }
        }
        let t = Tensor {
            rows: m,
            cols: n,
            data: out,
        };
        Ok(self.push(t, Op::MaskedSoftmax(a, mask), &[a]))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let [m, n] = self.shape(a);
        let x = &self.value(a).data;
        let mut out = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let t = Tensor {
            rows: m,
            cols: n,
            data: out,
        };
        self.push(t, Op::LayerNorm(a, inv_std), &[a])
    }

    /// Mean over the rows flagged in `row_mask`, giving a `1 × c` row.
    pub fn mean_pool(&mut self, a: Var, row_mask: Arc<[bool]>) -> Result<Var> {
        let [m, n] = self.shape(a);
        if row_mask.len() != m {
            return Err(Error::shape("mean_pool", &[m, n], &[row_mask.len()]));
        }
        let count = row_mask.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::domain("mean_pool over zero rows"));
        }
        let x = &self.value(a).data;
        let mut out = vec![0.0; n];
        for r in (0..m).filter(|&r| row_mask[r]) {
            for (o, v) in out.iter_mut().zip(&x[r * n..(r + 1) * n]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= count as f64;
        }
        Ok(self.push(Tensor::row(out), Op::MeanPool(a, row_mask, count), &[a]))
    }

    /// Column-wise max over the rows flagged in `row_mask`; ties go to the
    /// first row.
    pub fn max_pool(&mut self, a: Var, row_mask: &[bool]) -> Result<Var> {
        let [m, n] = self.shape(a);
        if row_mask.len() != m {
            return Err(Error::shape("max_pool", &[m, n], &[row_mask.len()]));
        }
        if !row_mask.iter().any(|&b| b) {
            return Err(Error::domain("max_pool over zero rows"));
        }
        let x = &self.value(a).data;
        let mut arg = vec![usize::MAX; n];
        let mut out = vec![f64::NEG_INFINITY; n];
        for r in (0..m).filter(|&r| row_mask[r]) {
            for c in 0..n {
                if x[r * n + c] > out[c] || arg[c] == usize::MAX {
                    out[c] = x[r * n + c];
                    arg[c] = r;
                }
            }
        }
        Ok(self.push(Tensor::row(out), Op::MaxPool(a, arg), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.shape(parts[0])[0];
        for &p in parts {
            if self.shape(p)[0] != m {
                return Err(Error::shape(
                    "concat_cols",
                    &self.shape(parts[0]),
                    &self.shape(p),
                ));
            }
        }
        let n: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        Ok(self.push(
            Tensor {
                rows: m,
                cols: n,
                data,
            },
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.shape(parts[0])[1];
        for &p in parts {
            if self.shape(p)[1] != n {
                return Err(Error::shape(
                    "concat_rows",
                    &self.shape(parts[0]),
                    &self.shape(p),
                ));
            }
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
        }
        let m = data.len() / n.max(1);
        Ok(self.push(
            Tensor {
                rows: m,
                cols: n,
                data,
            },
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let [m, n] = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape("gather_rows", &[m, n], &[bad]));
        }
        let x = &self.value(a);
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(x.row_slice(i));
        }
        let t = Tensor {
            rows: idx.len(),
            cols: n,
            data,
        };
        Ok(self.push(t, Op::GatherRows(a, idx.to_vec()), &[a]))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let [m, n] = self.shape(a);
        if start >= end || end > n {
            return Err(Error::shape("slice_cols", &[m, n], &[start, end]));
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            data.extend_from_slice(&x.row_slice(r)[start..end]);
        }
        let t = Tensor {
            rows: m,
            cols: end - start,
            data,
        };
        Ok(self.push(t, Op::SliceCols(a, start, end), &[a]))
    }

    /// Sum of all entries as a `1 × 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// `Σ_k c_k · a_k` for scalar nodes, skipping zero weights.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(c, v) in terms {
            if c == 0.0 {
                continue;
            }
            let t = if c == 1.0 { v } else { self.scale(v, c) };
            acc = Some(match acc {
                None => t,
                Some(a) => self.add(a, t)?,
            });
        }
        Ok(match acc {
            Some(a) => a,
            None => self.constant(Tensor::scalar(0.0)),
        })
    }

    /// Reverse sweep from a scalar `loss`. The tape is left untouched, so
    /// repeated calls give identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != [1, 1] {
            return Err(Error::shape("backward", &self.shape(loss), &[1, 1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| g.filter(|_| self.nodes[i].requires_grad))
                .collect(),
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            n_params: self.n_params,
        })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ([m, k], [_, n]) = (val(*a).shape(), val(*b).shape());
                if wants(*a) {
                    acc(*a, &|s| matmul_nt_into(g, &val(*b).data, s, m, n, k));
                }
                if wants(*b) {
                    acc(*b, &|s| matmul_tn_into(&val(*a).data, g, s, m, k, n));
                }
            }
            Op::MatMulNT(a, b) => {
                // c = a bᵀ: da = g b, db = gᵀ a
                let ([m, k], [n, _]) = (val(*a).shape(), val(*b).shape());
                if wants(*a) {
                    acc(*a, &|s| matmul_into(g, &val(*b).data, s, m, n, k));
                }
                if wants(*b) {
                    acc(*b, &|s| matmul_tn_into(g, &val(*a).data, s, m, n, k));
                }
            }
            Op::Add(a, b) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::AddRow(a, row) => {
                let n = out.cols;
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*row, &|s| {
                    for (i, y) in g.iter().enumerate() {
                        s[i % n] += y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (x, y) = (&val(*a).data, &val(*b).data);
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i];
                    }
                });
                acc(*b, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * x[i];
                    }
                });
            }
            Op::MulRow(a, row) => {
                let n = out.cols;
                let (x, r) = (&val(*a).data, &val(*row).data);
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * r[i % n];
                    }
                });
                acc(*row, &|s| {
                    for (i, gi) in g.iter().enumerate() {
                        s[i % n] += gi * x[i];
                    }
                });
            }
            Op::Abs(a) => {
                let x = &val(*a).data;
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        let sign = if x[i] > 0.0 {
                            1.0
                        } else if x[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        s[i] += g[i] * sign;
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &|s| {
                for i in 0..s.len() {
                    let y = out.data[i];
                    s[i] += g[i] * y * (1.0 - y);
                }
            }),
            Op::Relu(a) => {
                let x = &val(*a).data;
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        if x[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Exp(a) => acc(*a, &|s| {
                for i in 0..s.len() {
                    s[i] += g[i] * out.data[i];
                }
            }),
            Op::Log(a) => {
                let x = &val(*a).data;
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / x[i];
                    }
                });
            }
            Op::Square(a) => {
                let x = &val(*a).data;
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += 2.0 * g[i] * x[i];
                    }
                });
            }
            Op::Reciprocal(a) => acc(*a, &|s| {
                for i in 0..s.len() {
                    let y = out.data[i];
                    s[i] -= g[i] * y * y;
                }
            }),
            Op::Scale(a, c) => acc(*a, &|s| {
                for i in 0..s.len() {
                    s[i] += c * g[i];
                }
            }),
            Op::Clamp(a, lo, hi) => {
                let x = &val(*a).data;
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        if x[i] > *lo && x[i] < *hi {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::MaskedSoftmax(a, mask) => {
                let n = out.cols;
                acc(*a, &|s| {
                    for r in 0..out.rows {
                        let row = r * n..(r + 1) * n;
                        let dot: f64 = row.clone().map(|k| out.data[k] * g[k]).sum();
                        for k in row {
                            if mask[k] {
                                s[k] += out.data[k] * (g[k] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm(a, inv_std) => {
                let n = out.cols;
                acc(*a, &|s| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let row = r * n..(r + 1) * n;
                        let xh = &out.data[row.clone()];
                        let gr = &g[row.clone()];
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgx = gr.iter().zip(xh).map(|(p, q)| p * q).sum::<f64>() / n as f64;
                        for (k, i) in row.enumerate() {
                            s[i] += is * (gr[k] - mg - xh[k] * mgx);
                        }
                    }
                });
            }
            Op::MeanPool(a, row_mask, count) => {
                let n = out.cols;
                acc(*a, &|s| {
                    for (r, &keep) in row_mask.iter().enumerate() {
                        if keep {
                            for c in 0..n {
                                s[r * n + c] += g[c] / *count as f64;
                            }
                        }
                    }
                });
            }
            Op::MaxPool(a, arg) => {
                let n = out.cols;
                acc(*a, &|s| {
                    for (c, &r) in arg.iter().enumerate() {
                        s[r * n + c] += g[c];
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let m = out.rows;
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols;
                    acc(p, &|s| {
                        for r in 0..m {
                            for c in 0..w {
                                s[r * w + c] += g[r * out.cols + off + c];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    acc(p, &|s| {
                        for k in 0..len {
                            s[k] += g[off + k];
                        }
                    });
                    off += len;
                }
            }
            Op::GatherRows(a, idx) => {
                let n = out.cols;
                acc(*a, &|s| {
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..n {
                            s[src * n + c] += g[r * n + c];
                        }
                    }
                });
            }
            Op::SliceCols(a, start, end) => {
                let n = val(*a).cols;
                let w = end - start;
                acc(*a, &|s| {
                    for r in 0..out.rows {
                        for c in 0..w {
                            s[r * n + start + c] += g[r * w + c];
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &|s| s.iter_mut().for_each(|x| *x += g[0])),
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

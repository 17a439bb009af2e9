//! Minimal reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node whose inputs are
//! earlier nodes, so node order is already a topological order and the
//! backward pass is a single reverse sweep. Vectors are `1 x n` tensors;
//! the only broadcasting is the explicit row-wise ops ([`Graph::add_row`],
//! [`Graph::mul_row`]).
//!
//! ```
//! use sentispread::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::row(vec![1.0, 2.0]));
//! let sq = g.mul(x, x);
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("{} values for shape {rows}x{cols}", data.len()),
            });
        }
        Ok(Tensor {
            shape: [rows, cols],
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            shape: [rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Tensor {
            shape: [rows, cols],
            data: vec![v; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: [1, 1],
            data: vec![v],
        }
    }

    pub fn row(data: Vec<f64>) -> Self {
        Tensor {
            shape: [1, data.len()],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|x| x.len() != c) {
            return Err(Error::Shape {
                op: "from_rows",
                detail: "ragged rows".into(),
            });
        }
        Ok(Tensor {
            shape: [r, c],
            data: rows.concat(),
        })
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

// Dense kernels ---------------------------------------------------------------

/// `a (m x k) * b (k x n)`
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T * b` with `a (k x m)`, `b (k x n)`.
fn mm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a * b^T` with `a (m x k)`, `b (n x k)`.
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

fn transpose(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    out
}

// Graph -----------------------------------------------------------------------

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Transpose(Var),
    Reshape(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRow(Var, usize),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Sqrt(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn shape_err(op: &'static str, detail: String) -> ! {
    // Shape errors are programming errors in model code; fail loudly.
    panic!("{}", Error::Shape { op, detail })
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; gradients are not tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf; receives gradients on [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let [m, k] = av.shape;
        let [k2, n] = bv.shape;
        if k != k2 {
            shape_err("matmul", format!("{m}x{k} * {k2}x{n}"));
        }
        let out = Tensor {
            shape: [m, n],
            data: mm(&av.data, &bv.data, m, k, n),
        };
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng)
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            shape_err(name, format!("{:?} vs {:?}", av.shape, bv.shape));
        }
        Tensor {
            shape: av.shape,
            data: av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, "add", |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, "sub", |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, "mul", |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Mul(a, b), ng)
    }

    fn row_broadcast(&self, x: Var, r: Var, name: &'static str) -> (&Tensor, &Tensor) {
        let (xv, rv) = (self.value(x), self.value(r));
        if rv.shape != [1, xv.shape[1]] {
            shape_err(name, format!("{:?} with row {:?}", xv.shape, rv.shape));
        }
        (xv, rv)
    }

    /// `x + r` with `r` (1 x c) added to every row.
    pub fn add_row(&mut self, x: Var, r: Var) -> Var {
        let (xv, rv) = self.row_broadcast(x, r, "add_row");
        let c = xv.shape[1];
        let data = xv
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + rv.data[i % c])
            .collect();
        let t = Tensor {
            shape: xv.shape,
            data,
        };
        let ng = self.ng(&[x, r]);
        self.push(t, Op::AddRow(x, r), ng)
    }

    /// `x * r` with `r` (1 x c) multiplied into every row.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Var {
        let (xv, rv) = self.row_broadcast(x, r, "mul_row");
        let c = xv.shape[1];
        let data = xv
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v * rv.data[i % c])
            .collect();
        let t = Tensor {
            shape: xv.shape,
            data,
        };
        let ng = self.ng(&[x, r]);
        self.push(t, Op::MulRow(x, r), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xv = self.value(x);
        let t = Tensor {
            shape: xv.shape,
            data: xv.data.iter().map(|v| v * s).collect(),
        };
        let ng = self.ng(&[x]);
        self.push(t, Op::Scale(x, s), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor {
            shape: xv.shape,
            data: xv.data.iter().map(|v| v.max(0.0)).collect(),
        };
        let ng = self.ng(&[x]);
        self.push(t, Op::Relu(x), ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [r, c] = xv.shape;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv.data[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * c..(i + 1) * c];
            let mut z = 0.0;
            for (o, v) in out.iter_mut().zip(row) {
                *o = (v - mx).exp();
                z += *o;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        }
        let t = Tensor {
            shape: xv.shape,
            data,
        };
        let ng = self.ng(&[x]);
        self.push(t, Op::Softmax(x), ng)
    }

    /// Row-wise normalization to zero mean and unit (population) variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let [r, c] = xv.shape;
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &xv.data[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for (o, v) in xhat[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let t = Tensor {
            shape: [r, c],
            data: xhat.clone(),
        };
        let ng = self.ng(&[x]);
        self.push(t, Op::LayerNorm { x, xhat, inv_std }, ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [r, c] = xv.shape;
        let t = Tensor {
            shape: [c, r],
            data: transpose(&xv.data, r, c),
        };
        let ng = self.ng(&[x]);
        self.push(t, Op::Transpose(x), ng)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let xv = self.value(x);
        if rows * cols != xv.len() {
            shape_err("reshape", format!("{:?} -> {rows}x{cols}", xv.shape));
        }
        let t = Tensor {
            shape: [rows, cols],
            data: xv.data.clone(),
        };
        let ng = self.ng(&[x]);
        self.push(t, Op::Reshape(x), ng)
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let [r, c] = xv.shape;
        if start + len > c {
            shape_err("slice_cols", format!("{start}+{len} > {c}"));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv.data[i * c + start..i * c + start + len]);
        }
        let t = Tensor {
            shape: [r, len],
            data,
        };
        let ng = self.ng(&[x]);
        self.push(t, Op::SliceCols(x, start), ng)
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let [r, c] = xv.shape;
        if start + len > r {
            shape_err("slice_rows", format!("{start}+{len} > {r}"));
        }
        let t = Tensor {
            shape: [len, c],
            data: xv.data[start * c..(start + len) * c].to_vec(),
        };
        let ng = self.ng(&[x]);
        self.push(t, Op::SliceRows(x, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.value(parts[0]).rows();
        if parts.iter().any(|p| self.value(*p).rows() != r) {
            shape_err("concat_cols", "row counts differ".into());
        }
        let c: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(i));
            }
        }
        let t = Tensor { shape: [r, c], data };
        let ng = self.ng(parts);
        self.push(t, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.value(parts[0]).cols();
        if parts.iter().any(|p| self.value(*p).cols() != c) {
            shape_err("concat_rows", "column counts differ".into());
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&self.value(*p).data);
        }
        let r = data.len() / c.max(1);
        let t = Tensor { shape: [r, c], data };
        let ng = self.ng(parts);
        self.push(t, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Var {
        let xv = self.value(x);
        if row >= xv.rows() {
            shape_err("select_row", format!("row {row} of {}", xv.rows()));
        }
        let t = Tensor::row(xv.row_slice(row).to_vec());
        let ng = self.ng(&[x]);
        self.push(t, Op::SelectRow(x, row), ng)
    }

    /// Column means, `1 x c`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [r, c] = xv.shape;
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (o, v) in data.iter_mut().zip(xv.row_slice(i)) {
                *o += v;
            }
        }
        for o in &mut data {
            *o /= r as f64;
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::row(data), Op::MeanRows(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data.iter().sum::<f64>() / xv.len() as f64;
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Mean of squared differences, `1 x 1`.
    pub fn mse(&mut self, pred: Var, target: Var) -> Var {
        let d = self.zip_same(pred, target, "mse", |x, y| x - y);
        let s = d.data.iter().map(|v| v * v).sum::<f64>() / d.len() as f64;
        let ng = self.ng(&[pred, target]);
        self.push(Tensor::scalar(s), Op::Mse(pred, target), ng)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor {
            shape: xv.shape,
            data: xv.data.iter().map(|v| v.sqrt()).collect(),
        };
        let ng = self.ng(&[x]);
        self.push(t, Op::Sqrt(x), ng)
    }

    /// Euclidean norm of all entries, `1 x 1`.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let sq = self.mul(x, x);
        let s = self.sum(sq);
        self.sqrt(s)
    }

    /// Reverse sweep from a scalar `loss`. Gradients of trainable leaves are
    /// added to whatever they already hold; call [`Graph::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).shape != [1, 1] {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be 1x1, got {:?}", self.value(loss).shape),
            });
        }
        let mut tmp: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        tmp[loss.0] = Some(Tensor::scalar(1.0));

        fn acc(tmp: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut tmp[v.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = tmp[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let want = |v: &Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {
                    match &mut self.grads[i] {
                        Some(t) => t.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let [m, k] = av.shape;
                    let n = bv.shape[1];
                    if want(a) {
                        let da = mm_nt(&g.data, &bv.data, m, n, k);
                        acc(&mut tmp, *a, Tensor { shape: [m, k], data: da });
                    }
                    if want(b) {
                        let db = mm_tn(&av.data, &g.data, m, k, n);
                        acc(&mut tmp, *b, Tensor { shape: [k, n], data: db });
                    }
                }
                Op::Add(a, b) => {
                    if want(a) {
                        acc(&mut tmp, *a, g.clone());
                    }
                    if want(b) {
                        acc(&mut tmp, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if want(a) {
                        acc(&mut tmp, *a, g.clone());
                    }
                    if want(b) {
                        let neg = Tensor {
                            shape: g.shape,
                            data: g.data.iter().map(|v| -v).collect(),
                        };
                        acc(&mut tmp, *b, neg);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if want(a) {
                        let d = g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
                        acc(&mut tmp, *a, Tensor { shape: g.shape, data: d });
                    }
                    if want(b) {
                        let d = g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                        acc(&mut tmp, *b, Tensor { shape: g.shape, data: d });
                    }
                }
                Op::AddRow(x, r) => {
                    let c = g.shape[1];
                    if want(r) {
                        let mut d = vec![0.0; c];
                        for (j, v) in g.data.iter().enumerate() {
                            d[j % c] += v;
                        }
                        acc(&mut tmp, *r, Tensor::row(d));
                    }
                    if want(x) {
                        acc(&mut tmp, *x, g);
                    }
                }
                Op::MulRow(x, r) => {
                    let (xv, rv) = (self.value(*x), self.value(*r));
                    let c = g.shape[1];
                    if want(r) {
                        let mut d = vec![0.0; c];
                        for (j, (gv, xv)) in g.data.iter().zip(&xv.data).enumerate() {
                            d[j % c] += gv * xv;
                        }
                        acc(&mut tmp, *r, Tensor::row(d));
                    }
                    if want(x) {
                        let d = g
                            .data
                            .iter()
                            .enumerate()
                            .map(|(j, gv)| gv * rv.data[j % c])
                            .collect();
                        acc(&mut tmp, *x, Tensor { shape: g.shape, data: d });
                    }
                }
                Op::Scale(x, s) => {
                    let d = g.data.iter().map(|v| v * s).collect();
                    acc(&mut tmp, *x, Tensor { shape: g.shape, data: d });
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let d = g
                        .data
                        .iter()
                        .zip(&xv.data)
                        .map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 })
                        .collect();
                    acc(&mut tmp, *x, Tensor { shape: g.shape, data: d });
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let [r, c] = y.shape;
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        let (yr, gr) = (&y.data[i * c..(i + 1) * c], &g.data[i * c..(i + 1) * c]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[i * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut tmp, *x, Tensor { shape: [r, c], data: d });
                }
                Op::LayerNorm { x, xhat, inv_std } => {
                    let [r, c] = g.shape;
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        let gr = &g.data[i * c..(i + 1) * c];
                        let xr = &xhat[i * c..(i + 1) * c];
                        let mg = gr.iter().sum::<f64>() / c as f64;
                        let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            d[i * c + j] = inv_std[i] * (gr[j] - mg - xr[j] * mgx);
                        }
                    }
                    acc(&mut tmp, *x, Tensor { shape: [r, c], data: d });
                }
                Op::Transpose(x) => {
                    let [r, c] = g.shape;
                    acc(&mut tmp, *x, Tensor { shape: [c, r], data: transpose(&g.data, r, c) });
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape;
                    acc(&mut tmp, *x, Tensor { shape, data: g.data });
                }
                Op::SliceCols(x, start) => {
                    let [r, c] = self.value(*x).shape;
                    let len = g.shape[1];
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        d[i * c + start..i * c + start + len]
                            .copy_from_slice(&g.data[i * len..(i + 1) * len]);
                    }
                    acc(&mut tmp, *x, Tensor { shape: [r, c], data: d });
                }
                Op::SliceRows(x, start) => {
                    let [r, c] = self.value(*x).shape;
                    let mut d = vec![0.0; r * c];
                    d[start * c..start * c + g.data.len()].copy_from_slice(&g.data);
                    acc(&mut tmp, *x, Tensor { shape: [r, c], data: d });
                }
                Op::ConcatCols(parts) => {
                    let [r, c] = g.shape;
                    let mut off = 0;
                    for p in parts {
                        let pc = self.value(*p).cols();
                        if want(p) {
                            let mut d = Vec::with_capacity(r * pc);
                            for i in 0..r {
                                d.extend_from_slice(&g.data[i * c + off..i * c + off + pc]);
                            }
                            acc(&mut tmp, *p, Tensor { shape: [r, pc], data: d });
                        }
                        off += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        if want(p) {
                            let shape = self.value(*p).shape;
                            acc(&mut tmp, *p, Tensor { shape, data: g.data[off..off + n].to_vec() });
                        }
                        off += n;
                    }
                }
                Op::SelectRow(x, row) => {
                    let [r, c] = self.value(*x).shape;
                    let mut d = vec![0.0; r * c];
                    d[row * c..(row + 1) * c].copy_from_slice(&g.data);
                    acc(&mut tmp, *x, Tensor { shape: [r, c], data: d });
                }
                Op::MeanRows(x) => {
                    let [r, c] = self.value(*x).shape;
                    let mut d = Vec::with_capacity(r * c);
                    for _ in 0..r {
                        d.extend(g.data.iter().map(|v| v / r as f64));
                    }
                    acc(&mut tmp, *x, Tensor { shape: [r, c], data: d });
                }
                Op::Sum(x) => {
                    let shape = self.value(*x).shape;
                    acc(&mut tmp, *x, Tensor::full(shape[0], shape[1], g.data[0]));
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let v = g.data[0] / xv.len() as f64;
                    acc(&mut tmp, *x, Tensor::full(xv.rows(), xv.cols(), v));
                }
                Op::Mse(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let k = 2.0 * g.data[0] / av.len() as f64;
                    let diff: Vec<f64> = av.data.iter().zip(&bv.data).map(|(x, y)| k * (x - y)).collect();
                    if want(b) {
                        let neg = diff.iter().map(|v| -v).collect();
                        acc(&mut tmp, *b, Tensor { shape: av.shape, data: neg });
                    }
                    if want(a) {
                        acc(&mut tmp, *a, Tensor { shape: av.shape, data: diff });
                    }
                }
                Op::Sqrt(x) => {
                    let y = &node.value;
                    let d = g.data.iter().zip(&y.data).map(|(gv, yv)| gv * 0.5 / yv).collect();
                    acc(&mut tmp, *x, Tensor { shape: g.shape, data: d });
                }
            }
        }
        Ok(())
    }
}

// Parameters and weight manifests --------------------------------------------------

/// Named trainable tensors, serialized as a flat JSON manifest.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Registers every tensor as a trainable leaf of `g`, in order.
    pub fn attach(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Gradients of attached leaves; zeros where a leaf received none.
    pub fn grads(&self, g: &Graph, vars: &[Var]) -> Vec<Tensor> {
        vars.iter()
            .zip(&self.tensors)
            .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
            .collect()
    }

    pub fn to_manifest(&self, kind: &str, meta: serde_json::Value) -> serde_json::Value {
        let m = Manifest {
            kind: kind.to_string(),
            meta,
            tensors: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(n, t)| ManifestEntry {
                    name: n.clone(),
                    shape: t.shape,
                    values: t.data.clone(),
                })
                .collect(),
        };
        serde_json::to_value(m).expect("manifest serializes")
    }

    /// Returns the parameters plus the manifest's `meta` object.
    pub fn from_manifest(v: serde_json::Value, kind: &str) -> Result<(Self, serde_json::Value)> {
        let m: Manifest = serde_json::from_value(v)?;
        if m.kind != kind {
            return Err(Error::Invalid(format!(
                "manifest kind {:?}, expected {kind:?}",
                m.kind
            )));
        }
        let mut ps = ParamSet::default();
        for e in m.tensors {
            ps.push(e.name, Tensor::new(e.shape[0], e.shape[1], e.values)?);
        }
        Ok((ps, m.meta))
    }
}

// Optimizers --------------------------------------------------------------------

pub trait Optimizer {
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()>;
}

fn check_grads(params: &[Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::DimMismatch {
            expected: params.len(),
            got: grads.len(),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape != g.shape {
            return Err(Error::Shape {
                op: "optimizer",
                detail: format!("param {i}: {:?} vs grad {:?}", p.shape, g.shape),
            });
        }
        if let Some(j) = g.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of param {i} at entry {j}")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        check_grads(params, grads)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, gv), mv), vv) in p.data.iter_mut().zip(&g.data).zip(m).zip(v) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * weight_decay * *pv;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            lr: 1e-4,
            alpha: 0.99,
            eps: 1e-8,
            momentum: 0.9,
            weight_decay: 1e-7,
        }
    }
}

/// RMSprop with momentum and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub cfg: RmsPropConfig,
    square_avg: Vec<Vec<f64>>,
    momentum_buf: Vec<Vec<f64>>,
    t: u64,
}

impl RmsProp {
    pub fn new(cfg: RmsPropConfig) -> Self {
        RmsProp {
            cfg,
            square_avg: Vec::new(),
            momentum_buf: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

impl Optimizer for RmsProp {
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        check_grads(params, grads)?;
        if self.square_avg.is_empty() {
            self.square_avg = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.momentum_buf = self.square_avg.clone();
        }
        self.t += 1;
        let RmsPropConfig {
            lr,
            alpha,
            eps,
            momentum,
            weight_decay,
        } = self.cfg;
        for ((p, g), (sq, buf)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.square_avg.iter_mut().zip(self.momentum_buf.iter_mut()))
        {
            for (((pv, gv), s), b) in p.data.iter_mut().zip(&g.data).zip(sq).zip(buf) {
                *s = alpha * *s + (1.0 - alpha) * gv * gv;
                *b = momentum * *b + gv / (s.sqrt() + eps);
                *pv -= lr * weight_decay * *pv;
                *pv -= lr * *b;
            }
        }
        Ok(())
    }
}

// Finite-difference checking ----------------------------------------------------------

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub n_checked: usize,
}

/// Compares [`Graph::backward`] against central differences for every entry
/// of `params`. `build` must construct the same scalar loss from the
/// attached parameter vars each time it is called.
pub fn grad_check(
    params: &[Tensor],
    eps: f64,
    build: impl Fn(&mut Graph, &[Var]) -> Var,
) -> Result<GradCheck> {
    let eval = |ps: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        n_checked: 0,
    };
    for (pi, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params[pi].rows(), params[pi].cols()));
        for j in 0..params[pi].len() {
            let orig = work[pi].data[j];
            work[pi].data[j] = orig + eps;
            let up = eval(&work);
            work[pi].data[j] = orig - eps;
            let down = eval(&work);
            work[pi].data[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-6);
            out.max_abs_err = out.max_abs_err.max(abs);
            out.max_rel_err = out.max_rel_err.max(rel);
            out.n_checked += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn squared_norm_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 2.0]));
        let sq = g.mul(x, x);
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 2.0]));
        let y = g.scale(x, 3.0);
        let s = g.sum(y);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0, 6.0]);
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::row(vec![1.0]));
        let p = g.param(Tensor::row(vec![2.0]));
        let m = g.mul(c, p);
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(p).unwrap().data(), &[1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    #[should_panic(expected = "matmul")]
    fn matmul_shape_mismatch_panics() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        g.matmul(a, b);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.constant(rand_t(&mut rng, 5, 7));
        let x = g.scale(x, 30.0);
        let y = g.softmax(x);
        for r in 0..5 {
            let s: f64 = g.value(y).row_slice(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let x = g.constant(rand_t(&mut rng, 4, 16));
        let x = g.scale(x, 10.0);
        let y = g.layer_norm(x, 1e-12);
        for r in 0..4 {
            let row = g.value(y).row_slice(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-7);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_t(&mut rng, 3, 4);
        let b = rand_t(&mut rng, 4, 5);
        let r = rand_t(&mut rng, 1, 5);
        let check = |ps: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var| {
            let res = grad_check(ps, 1e-5, f).unwrap();
            assert!(res.max_rel_err < 1e-4, "{res:?}");
        };
        let ps = [a.clone(), b.clone(), r.clone()];
        check(&ps, &|g, v| {
            let m = g.matmul(v[0], v[1]);
            let m = g.add_row(m, v[2]);
            let m = g.mul_row(m, v[2]);
            let s = g.softmax(m);
            let w = g.mul(s, m);
            g.sum(w)
        });
        check(&ps, &|g, v| {
            let m = g.matmul(v[0], v[1]);
            let m = g.layer_norm(m, 1e-5);
            let sq = g.mul(m, m);
            let t = g.transpose(sq);
            let sl = g.slice_cols(t, 1, 2);
            let mr = g.mean_rows(sl);
            let r2 = g.scale(v[2], 0.3);
            let c = g.concat_cols(&[mr, r2]);
            g.mean(c)
        });
        check(&ps, &|g, v| {
            let m = g.matmul(v[0], v[1]);
            let rr = g.reshape(m, 5, 3);
            let top = g.select_row(rr, 2);
            let mid = g.slice_rows(rr, 1, 2);
            let mid = g.mean_rows(mid);
            let rows = g.concat_rows(&[top, mid]);
            let tgt = g.constant(Tensor::full(2, 3, 0.25));
            let e = g.mse(rows, tgt);
            let n = g.l2_norm(v[2]);
            let d = g.sub(e, n);
            let q = g.add(d, n);
            g.add(q, e)
        });
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Adam::new(AdamConfig::default());
        let mut p = vec![Tensor::scalar(0.0)];
        opt.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        assert!((p[0].item() + 1e-4).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::row(vec![0.3, -0.7])];
        let g = [Tensor::zeros(1, 2)];
        Adam::new(AdamConfig::default()).step(&mut p, &g).unwrap();
        assert_eq!(p[0].data(), &[0.3, -0.7]);
        let cfg = RmsPropConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        RmsProp::new(cfg).step(&mut p, &g).unwrap();
        assert_eq!(p[0].data(), &[0.3, -0.7]);
    }

    #[test]
    fn rmsprop_weight_decay_shrinks() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut opt = RmsProp::new(RmsPropConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        });
        for _ in 0..10 {
            let before = p[0].item();
            opt.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
            assert!(p[0].item() < before && p[0].item() > 0.0);
        }
    }

    #[test]
    fn rmsprop_descends_quadratic_bowl() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut opt = RmsProp::new(RmsPropConfig::default());
        let mut prev = 1.0f64;
        for _ in 0..100 {
            let g = Tensor::scalar(2.0 * p[0].item());
            opt.step(&mut p, &[g]).unwrap();
            assert!(p[0].item().abs() < prev);
            prev = p[0].item().abs();
        }
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut p = vec![Tensor::scalar(1.0)];
        let err = Adam::new(AdamConfig::default())
            .step(&mut p, &[Tensor::scalar(f64::NAN)])
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn optimizer_steps_are_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = vec![rand_t(&mut rng, 3, 3)];
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            let g = vec![rand_t(&mut rng, 3, 3)];
            opt.step(&mut p, &g).unwrap();
        }
        let g = vec![rand_t(&mut rng, 3, 3)];
        let (mut p1, mut o1) = (p.clone(), opt.clone());
        let (mut p2, mut o2) = (p.clone(), opt.clone());
        o1.step(&mut p1, &g).unwrap();
        o2.step(&mut p2, &g).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(o1, o2);
    }

    #[test]
    fn manifest_round_trip() {
        let mut ps = ParamSet::default();
        ps.push("w", Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        ps.push("b", Tensor::row(vec![0.5, -0.5]));
        let v = ps.to_manifest("test", serde_json::json!({"k": 1}));
        let (back, meta) = ParamSet::from_manifest(v.clone(), "test").unwrap();
        assert_eq!(back, ps);
        assert_eq!(meta["k"], 1);
        assert!(ParamSet::from_manifest(v, "other").is_err());
    }
}

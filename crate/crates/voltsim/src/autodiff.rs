//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! The tape supports exactly the operations needed by the training losses in
//! this crate: dense layers, elementwise nonlinearities, softmax/cumsum knot
//! construction and the piecewise-linear spline inversion. Gradients are exact
//! (no numerical differentiation anywhere on the training path).

use std::cell::RefCell;
use std::ops::Range;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VoltError};

const LN_2PI: f64 = 1.8378770664093453;

/// Row-major dense matrix. Row vectors are `1 x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length mismatch");
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_row(row: &[f64]) -> Self {
        Tensor::new(1, row.len(), row.to_vec())
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "empty row set");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let mut out = Tensor::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        out
    }

    /// `self^T * other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rows, other.rows, "t_matmul dimension mismatch");
        let mut out = Tensor::zeros(self.cols, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[i * other.cols..(i + 1) * other.cols];
                let dst = &mut out.data[k * other.cols..(k + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        out
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.cols, "matmul_t dimension mismatch");
        let mut out = Tensor::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                let a = &self.data[i * self.cols..(i + 1) * self.cols];
                let b = &other.data[j * other.cols..(j + 1) * other.cols];
                out.data[i * other.rows + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        out
    }
}

// Bitwise-lossless serialization: little-endian f64 bytes, base64-encoded.
#[derive(Serialize, Deserialize)]
struct TensorRepr {
    rows: usize,
    cols: usize,
    b64: String,
}

impl Serialize for Tensor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut bytes = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let repr = TensorRepr {
            rows: self.rows,
            cols: self.cols,
            b64: base64::engine::general_purpose::STANDARD.encode(&bytes),
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Tensor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = TensorRepr::deserialize(d)?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&repr.b64)
            .map_err(serde::de::Error::custom)?;
        if bytes.len() != repr.rows * repr.cols * 8 {
            return Err(serde::de::Error::custom("tensor payload length mismatch"));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(repr.rows, repr.cols, data))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    AddRow(usize, usize),
    Exp(usize),
    Ln(usize),
    Square(usize),
    Softplus(usize),
    Relu(usize),
    Sigmoid(usize),
    SoftmaxRows(usize),
    CumsumRows(usize),
    Sum(usize),
    Mean(usize),
    ConcatCols(usize, usize),
    SliceCols(usize, Range<usize>),
    /// Piecewise-linear monotone spline inversion on the unit square.
    /// Inputs: knot abscissae `u`, ordinates `v` (batch x n_knots, increasing,
    /// last = 1, implicit origin 0) and targets `x` (batch x 1). Output is
    /// batch x 2: column 0 the preimage `z`, column 1 `ln` of the bin slope.
    SplineInverse { u: usize, v: usize, x: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Computation tape. Create one per loss evaluation; it is not reusable.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> Tensor {
        self.nodes.borrow()[var.0].value.clone()
    }

    pub fn scalar_value(&self, var: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let t = &nodes[var.0].value;
        assert_eq!(t.len(), 1, "expected scalar node");
        t.data[0]
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "add shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.rows, ta.cols, data);
        drop(nodes);
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "sub shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let value = Tensor::new(ta.rows, ta.cols, data);
        drop(nodes);
        self.push(value, Op::Sub(a.0, b.0))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "mul shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.rows, ta.cols, data);
        drop(nodes);
        self.push(value, Op::Mul(a.0, b.0))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "div shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x / y).collect();
        let value = Tensor::new(ta.rows, ta.cols, data);
        drop(nodes);
        self.push(value, Op::Div(a.0, b.0))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            Tensor::new(t.rows, t.cols, t.data.iter().map(|x| x * c).collect())
        };
        self.push(value, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            Tensor::new(t.rows, t.cols, t.data.iter().map(|x| x + c).collect())
        };
        self.push(value, Op::AddScalar(a.0))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul(&nodes[b.0].value)
        };
        self.push(value, Op::MatMul(a.0, b.0))
    }

    /// Broadcast-add a `1 x c` row vector to each row of an `r x c` matrix.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tr) = (&nodes[a.0].value, &nodes[row.0].value);
            assert_eq!(tr.rows, 1, "add_row expects a row vector");
            assert_eq!(ta.cols, tr.cols, "add_row width mismatch");
            let mut out = ta.clone();
            for i in 0..out.rows {
                for j in 0..out.cols {
                    out.data[i * out.cols + j] += tr.data[j];
                }
            }
            out
        };
        self.push(value, Op::AddRow(a.0, row.0))
    }

    pub fn exp(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            Tensor::new(t.rows, t.cols, t.data.iter().map(|x| x.exp()).collect())
        };
        self.push(value, Op::Exp(a.0))
    }

    pub fn ln(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            Tensor::new(t.rows, t.cols, t.data.iter().map(|x| x.ln()).collect())
        };
        self.push(value, Op::Ln(a.0))
    }

    pub fn square(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            Tensor::new(t.rows, t.cols, t.data.iter().map(|x| x * x).collect())
        };
        self.push(value, Op::Square(a.0))
    }

    pub fn softplus(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            Tensor::new(t.rows, t.cols, t.data.iter().map(|&x| softplus(x)).collect())
        };
        self.push(value, Op::Softplus(a.0))
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            Tensor::new(t.rows, t.cols, t.data.iter().map(|&x| x.max(0.0)).collect())
        };
        self.push(value, Op::Relu(a.0))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            Tensor::new(t.rows, t.cols, t.data.iter().map(|&x| sigmoid(x)).collect())
        };
        self.push(value, Op::Sigmoid(a.0))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            softmax_rows(&nodes[a.0].value)
        };
        self.push(value, Op::SoftmaxRows(a.0))
    }

    pub fn cumsum_rows(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            cumsum_rows(&nodes[a.0].value)
        };
        self.push(value, Op::CumsumRows(a.0))
    }

    pub fn sum(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            Tensor::new(1, 1, vec![nodes[a.0].value.data.iter().sum()])
        };
        self.push(value, Op::Sum(a.0))
    }

    pub fn mean(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            Tensor::new(1, 1, vec![t.data.iter().sum::<f64>() / t.len() as f64])
        };
        self.push(value, Op::Mean(a.0))
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(ta.rows, tb.rows, "concat_cols row mismatch");
            let cols = ta.cols + tb.cols;
            let mut data = Vec::with_capacity(ta.rows * cols);
            for i in 0..ta.rows {
                data.extend_from_slice(ta.row(i));
                data.extend_from_slice(tb.row(i));
            }
            Tensor::new(ta.rows, cols, data)
        };
        self.push(value, Op::ConcatCols(a.0, b.0))
    }

    pub fn slice_cols(&self, a: Var, range: Range<usize>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            assert!(range.end <= t.cols, "slice_cols out of range");
            let cols = range.len();
            let mut data = Vec::with_capacity(t.rows * cols);
            for i in 0..t.rows {
                data.extend_from_slice(&t.row(i)[range.clone()]);
            }
            Tensor::new(t.rows, cols, data)
        };
        self.push(value, Op::SliceCols(a.0, range))
    }

    /// See [`Op::SplineInverse`]. `x` values may lie outside `[0, 1]`; the
    /// boundary bins extend linearly.
    pub fn spline_inverse(&self, u: Var, v: Var, x: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (tu, tv, tx) = (&nodes[u.0].value, &nodes[v.0].value, &nodes[x.0].value);
            assert_eq!(tu.rows, tv.rows, "spline knot batch mismatch");
            assert_eq!(tu.cols, tv.cols, "spline knot count mismatch");
            assert_eq!(tx.rows, tu.rows, "spline target batch mismatch");
            assert_eq!(tx.cols, 1, "spline target must be a column");
            let mut out = Tensor::zeros(tu.rows, 2);
            for r in 0..tu.rows {
                let (z, ln_s) = spline_invert_row(tu.row(r), tv.row(r), tx.data[r]);
                out.data[2 * r] = z;
                out.data[2 * r + 1] = ln_s;
            }
            out
        };
        self.push(value, Op::SplineInverse { u: u.0, v: v.0, x: x.0 })
    }

    /// Reverse pass from a scalar `loss` node. Returns the gradient tensors of
    /// the requested nodes (typically parameter leaves).
    pub fn backward(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "loss must be scalar");
        if !nodes[loss.0].value.data[0].is_finite() {
            return Err(VoltError::NonFinite("loss".into()));
        }
        let mut grads: Vec<Tensor> = nodes
            .iter()
            .map(|nd| Tensor::zeros(nd.value.rows, nd.value.cols))
            .collect();
        grads[loss.0].data[0] = 1.0;

        for idx in (0..=loss.0).rev() {
            let g = grads[idx].clone();
            if g.data.iter().all(|&x| x == 0.0) {
                continue;
            }
            match &nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], &g.data);
                    accumulate(&mut grads[*b], &g.data);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[*a], &g.data);
                    for (d, s) in grads[*b].data.iter_mut().zip(&g.data) {
                        *d -= s;
                    }
                }
                Op::Mul(a, b) => {
                    let bd: Vec<f64> =
                        g.data.iter().zip(&nodes[*b].value.data).map(|(x, y)| x * y).collect();
                    let ad: Vec<f64> =
                        g.data.iter().zip(&nodes[*a].value.data).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[*a], &bd);
                    accumulate(&mut grads[*b], &ad);
                }
                Op::Div(a, b) => {
                    let bv = &nodes[*b].value.data;
                    let av = &nodes[*a].value.data;
                    let da: Vec<f64> = g.data.iter().zip(bv).map(|(x, y)| x / y).collect();
                    let db: Vec<f64> = g
                        .data
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(x, (a, b))| -x * a / (b * b))
                        .collect();
                    accumulate(&mut grads[*a], &da);
                    accumulate(&mut grads[*b], &db);
                }
                Op::Scale(a, c) => {
                    let d: Vec<f64> = g.data.iter().map(|x| x * c).collect();
                    accumulate(&mut grads[*a], &d);
                }
                Op::AddScalar(a) => accumulate(&mut grads[*a], &g.data),
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(&nodes[*b].value);
                    let db = nodes[*a].value.t_matmul(&g);
                    accumulate(&mut grads[*a], &da.data);
                    accumulate(&mut grads[*b], &db.data);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads[*a], &g.data);
                    let cols = g.cols;
                    let gr = &mut grads[*row];
                    for i in 0..g.rows {
                        for j in 0..cols {
                            gr.data[j] += g.data[i * cols + j];
                        }
                    }
                }
                Op::Exp(a) => {
                    let d: Vec<f64> =
                        g.data.iter().zip(&nodes[idx].value.data).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[*a], &d);
                }
                Op::Ln(a) => {
                    let d: Vec<f64> =
                        g.data.iter().zip(&nodes[*a].value.data).map(|(x, y)| x / y).collect();
                    accumulate(&mut grads[*a], &d);
                }
                Op::Square(a) => {
                    let d: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&nodes[*a].value.data)
                        .map(|(x, y)| 2.0 * x * y)
                        .collect();
                    accumulate(&mut grads[*a], &d);
                }
                Op::Softplus(a) => {
                    let d: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&nodes[*a].value.data)
                        .map(|(x, &y)| x * sigmoid(y))
                        .collect();
                    accumulate(&mut grads[*a], &d);
                }
                Op::Relu(a) => {
                    let d: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&nodes[*a].value.data)
                        .map(|(x, &y)| if y > 0.0 { *x } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[*a], &d);
                }
                Op::Sigmoid(a) => {
                    let d: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&nodes[idx].value.data)
                        .map(|(x, &s)| x * s * (1.0 - s))
                        .collect();
                    accumulate(&mut grads[*a], &d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &nodes[idx].value;
                    let mut d = vec![0.0; y.len()];
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = &g.data[r * y.cols..(r + 1) * y.cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..y.cols {
                            d[r * y.cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads[*a], &d);
                }
                Op::CumsumRows(a) => {
                    let mut d = vec![0.0; g.len()];
                    for r in 0..g.rows {
                        let mut acc = 0.0;
                        for c in (0..g.cols).rev() {
                            acc += g.data[r * g.cols + c];
                            d[r * g.cols + c] = acc;
                        }
                    }
                    accumulate(&mut grads[*a], &d);
                }
                Op::Sum(a) => {
                    let ga = &mut grads[*a];
                    for x in ga.data.iter_mut() {
                        *x += g.data[0];
                    }
                }
                Op::Mean(a) => {
                    let ga = &mut grads[*a];
                    let s = g.data[0] / ga.len() as f64;
                    for x in ga.data.iter_mut() {
                        *x += s;
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = nodes[*a].value.cols;
                    let cb = nodes[*b].value.cols;
                    for r in 0..g.rows {
                        let gr = &g.data[r * (ca + cb)..(r + 1) * (ca + cb)];
                        for c in 0..ca {
                            grads[*a].data[r * ca + c] += gr[c];
                        }
                        for c in 0..cb {
                            grads[*b].data[r * cb + c] += gr[ca + c];
                        }
                    }
                }
                Op::SliceCols(a, range) => {
                    let cols = nodes[*a].value.cols;
                    let w = range.len();
                    for r in 0..g.rows {
                        for c in 0..w {
                            grads[*a].data[r * cols + range.start + c] += g.data[r * w + c];
                        }
                    }
                }
                Op::SplineInverse { u, v, x } => {
                    let tu = &nodes[*u].value;
                    let tv = &nodes[*v].value;
                    let tx = &nodes[*x].value;
                    let nk = tu.cols;
                    for r in 0..tu.rows {
                        let gz = g.data[2 * r];
                        let gs = g.data[2 * r + 1];
                        if gz == 0.0 && gs == 0.0 {
                            continue;
                        }
                        let ur = tu.row(r);
                        let vr = tv.row(r);
                        let xv = tx.data[r];
                        let bin = spline_bin(vr, xv);
                        let (u0, u1) = padded(ur, bin);
                        let (v0, v1) = padded(vr, bin);
                        let du = u1 - u0;
                        let dv = v1 - v0;
                        let a = (xv - v0) / dv;
                        // z = u0 (1 - a) + u1 a; ln_s = ln(dv) - ln(du)
                        let gu0 = gz * (1.0 - a) + gs / du;
                        let gu1 = gz * a - gs / du;
                        let gv_common = gz * du / (dv * dv);
                        let gv0 = gv_common * (xv - v1) - gs / dv;
                        let gv1 = -gv_common * (xv - v0) + gs / dv;
                        grads[*x].data[r] += gz * du / dv;
                        // the implicit origin knot is the constant 0; its
                        // gradient has nowhere to go when bin == 0
                        if bin > 0 {
                            grads[*u].data[r * nk + bin - 1] += gu0;
                            grads[*v].data[r * nk + bin - 1] += gv0;
                        }
                        grads[*u].data[r * nk + bin] += gu1;
                        grads[*v].data[r * nk + bin] += gv1;
                    }
                }
            }
        }

        Ok(wrt.iter().map(|v| grads[v.0].clone()).collect())
    }
}

fn accumulate(dst: &mut Tensor, src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.data.iter_mut().zip(src) {
        *d += s;
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

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

pub fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..t.rows {
        let row = &mut out.data[r * t.cols..(r + 1) * t.cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

pub fn cumsum_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..t.rows {
        let row = &mut out.data[r * t.cols..(r + 1) * t.cols];
        for c in 1..row.len() {
            row[c] += row[c - 1];
        }
    }
    out
}

/// Knot array access with the implicit origin knot at 0.
fn padded(knots: &[f64], bin: usize) -> (f64, f64) {
    let lo = if bin == 0 { 0.0 } else { knots[bin - 1] };
    (lo, knots[bin])
}

/// Bin index for ordinate value `x` within `v` (boundary bins absorb tails).
pub(crate) fn spline_bin(v: &[f64], x: f64) -> usize {
    let n = v.len();
    if x <= v[0] {
        return 0;
    }
    // first bin whose upper ordinate is >= x
    match v.binary_search_by(|p| p.partial_cmp(&x).unwrap()) {
        Ok(i) => i.min(n - 1),
        Err(i) => i.min(n - 1),
    }
}

/// Bin index for abscissa value `z` within `u` (same convention).
pub(crate) fn spline_bin_forward(u: &[f64], z: f64) -> usize {
    spline_bin(u, z)
}

/// Invert the unit-square spline at `x`: returns `(z, ln_slope)` where
/// `ln_slope` refers to the forward map's slope in the active bin.
pub(crate) fn spline_invert_row(u: &[f64], v: &[f64], x: f64) -> (f64, f64) {
    let bin = spline_bin(v, x);
    let (u0, u1) = padded(u, bin);
    let (v0, v1) = padded(v, bin);
    let s = (v1 - v0) / (u1 - u0);
    (u0 + (x - v0) / s, s.ln())
}

/// Evaluate the unit-square spline at `z`: returns `(x, ln_slope)`.
pub(crate) fn spline_eval_row(u: &[f64], v: &[f64], z: f64) -> (f64, f64) {
    let bin = spline_bin_forward(u, z);
    let (u0, u1) = padded(u, bin);
    let (v0, v1) = padded(v, bin);
    let s = (v1 - v0) / (u1 - u0);
    (v0 + (z - u0) * s, s.ln())
}

/// `ln` of the standard normal density.
pub fn std_normal_ln_pdf(x: f64) -> f64 {
    -0.5 * x * x - 0.5 * LN_2PI
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn finite_diff<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    #[test]
    fn quadratic_loss_gradient_is_identity() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::from_row(&[1.0, -2.0, 0.5]));
        let sq = tape.square(p);
        let loss = tape.scale(tape.sum(sq), 0.5);
        let g = tape.backward(loss, &[p]).unwrap();
        assert_eq!(g[0].data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn constant_loss_zero_gradient() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::from_row(&[1.0, 2.0]));
        let c = tape.leaf(Tensor::from_row(&[3.0]));
        let loss = tape.sum(c);
        let g = tape.backward(loss, &[p]).unwrap();
        assert!(g[0].data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let x0: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |p: &[f64]| {
            let tape = Tape::new();
            let w = tape.leaf(Tensor::new(3, 4, p.to_vec()));
            let inp = tape.leaf(Tensor::new(2, 3, vec![0.3, -0.2, 0.5, 1.0, 0.1, -0.4]));
            let h = tape.matmul(inp, w);
            let act = tape.softplus(h);
            let sm = tape.softmax_rows(act);
            let cs = tape.cumsum_rows(sm);
            let ln = tape.ln(tape.add_scalar(cs, 1.0));
            tape.scalar_value(tape.mean(ln))
        };
        let tape = Tape::new();
        let w = tape.leaf(Tensor::new(3, 4, x0.clone()));
        let inp = tape.leaf(Tensor::new(2, 3, vec![0.3, -0.2, 0.5, 1.0, 0.1, -0.4]));
        let h = tape.matmul(inp, w);
        let act = tape.softplus(h);
        let sm = tape.softmax_rows(act);
        let cs = tape.cumsum_rows(sm);
        let ln = tape.ln(tape.add_scalar(cs, 1.0));
        let loss = tape.mean(ln);
        let g = tape.backward(loss, &[w]).unwrap();
        let gn = finite_diff(f, &x0, 1e-5);
        for (a, b) in g[0].data().iter().zip(&gn) {
            assert_relative_eq!(a, b, max_relative = 1e-5, epsilon = 1e-9);
        }
    }

    #[test]
    fn spline_inverse_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let n = 6;
        let raw: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let targets = [0.15, 0.55, 0.95, 1.2, -0.3];
        for &x in &targets {
            let f = |p: &[f64]| {
                let tape = Tape::new();
                let ur = tape.leaf(Tensor::from_row(&p[..n]));
                let vr = tape.leaf(Tensor::from_row(&p[n..]));
                let u = tape.cumsum_rows(tape.softmax_rows(ur));
                let v = tape.cumsum_rows(tape.softmax_rows(vr));
                let xx = tape.leaf(Tensor::from_row(&[x]));
                let out = tape.spline_inverse(u, v, xx);
                tape.scalar_value(tape.sum(out))
            };
            let tape = Tape::new();
            let ur = tape.leaf(Tensor::from_row(&raw[..n]));
            let vr = tape.leaf(Tensor::from_row(&raw[n..]));
            let u = tape.cumsum_rows(tape.softmax_rows(ur));
            let v = tape.cumsum_rows(tape.softmax_rows(vr));
            let xx = tape.leaf(Tensor::from_row(&[x]));
            let out = tape.spline_inverse(u, v, xx);
            let loss = tape.sum(out);
            let g = tape.backward(loss, &[ur, vr]).unwrap();
            let gn = finite_diff(f, &raw, 1e-6);
            let analytic: Vec<f64> = g[0].data().iter().chain(g[1].data()).cloned().collect();
            for (a, b) in analytic.iter().zip(&gn) {
                assert_relative_eq!(a, b, max_relative = 1e-4, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn spline_round_trip() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let n = 8;
        let raw_u = Tensor::from_row(
            &(0..n).map(|_| rng.random_range(-1.5..1.5)).collect::<Vec<_>>(),
        );
        let raw_v = Tensor::from_row(
            &(0..n).map(|_| rng.random_range(-1.5..1.5)).collect::<Vec<_>>(),
        );
        let u = cumsum_rows(&softmax_rows(&raw_u));
        let v = cumsum_rows(&softmax_rows(&raw_v));
        for _ in 0..10_000 {
            let z = rng.random_range(-0.5..1.5);
            let (x, ls_f) = spline_eval_row(u.data(), v.data(), z);
            let (z2, ls_i) = spline_invert_row(u.data(), v.data(), x);
            assert_relative_eq!(z, z2, epsilon = 1e-9);
            assert_relative_eq!(ls_f, ls_i, epsilon = 1e-9);
        }
    }

    #[test]
    fn tensor_serde_round_trip_is_bitwise() {
        let t = Tensor::new(2, 3, vec![1.0, -2.5, 1e-300, f64::MIN_POSITIVE, 3.7, 0.0]);
        let s = serde_json::to_string(&t).unwrap();
        let t2: Tensor = serde_json::from_str(&s).unwrap();
        for (a, b) in t.data().iter().zip(t2.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

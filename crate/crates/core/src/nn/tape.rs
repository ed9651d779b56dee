//! Tape-based reverse-mode automatic differentiation over [`Mat`] values.
//!
//! Every forward op appends a node holding its value and the information its
//! backward rule needs. [`Tape::backward`] walks the nodes in reverse and
//! returns gradients for every parameter that was read through
//! [`Tape::param`]. Forward ops reject shape mismatches and non-finite
//! results.

use rand::Rng;

use super::params::{Grads, ParamId, ParameterSet};
use super::Mat;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var, f64),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Transpose(Var),
    MeanRows(Var),
    SumAll(Var),
    Gather(Var, Vec<usize>),
    Maxout(Var, Vec<usize>),
    Scatter(Var, Vec<usize>),
    Pad(Var),
    Pick(Var, usize, usize),
}

struct Node {
    value: Option<Mat>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParameterSet,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    grad_enabled: bool,
    clamped_logs: usize,
}

fn bcast(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<Bcast> {
    if a == b {
        Ok(Bcast::Same)
    } else if b == (1, 1) {
        Ok(Bcast::Scalar)
    } else if b.0 == 1 && b.1 == a.1 {
        Ok(Bcast::Row)
    } else if b.1 == 1 && b.0 == a.0 {
        Ok(Bcast::Col)
    } else {
        Err(Error::Shape { op, left: a, right: b })
    }
}

#[inline]
fn bcast_index(kind: Bcast, r: usize, c: usize, b_cols: usize) -> usize {
    match kind {
        Bcast::Same => r * b_cols + c,
        Bcast::Row => c,
        Bcast::Col => r,
        Bcast::Scalar => 0,
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParameterSet) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            grad_enabled: true,
            clamped_logs: 0,
        }
    }

    /// A tape that records values only; `backward` yields no parameter gradients.
    pub fn inference(params: &'p ParameterSet) -> Self {
        let mut t = Tape::new(params);
        t.grad_enabled = false;
        t
    }

    pub fn params(&self) -> &'p ParameterSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of `log` evaluations whose argument fell below the floor.
    pub fn clamped_logs(&self) -> usize {
        self.clamped_logs
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Mat) -> Result<Var> {
        self.push(value, Op::Const, false, "constant")
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(Mat::zeros(rows, cols), Op::Const, false, "constant")
            .expect("zeros are finite")
    }

    /// Reads a parameter onto the tape; repeated reads share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(Error::Shape {
                op: "matmul",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let out = av.matmul(bv);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg, "matmul")
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let name = if mul { "mul" } else { "add" };
        let (av, bv) = (self.value(a), self.value(b));
        let kind = bcast(name, av.shape(), bv.shape())?;
        let (rows, cols) = av.shape();
        let mut out = av.clone();
        let bd = bv.data();
        let bc = bv.cols();
        for r in 0..rows {
            let row = out.row_mut(r);
            for (c, o) in row.iter_mut().enumerate() {
                let x = bd[bcast_index(kind, r, c, bc)];
                if mul {
                    *o *= x;
                } else {
                    *o += x;
                }
            }
        }
        let _ = cols;
        let rg = self.rg(a) || self.rg(b);
        let op = if mul { Op::Mul(a, b, kind) } else { Op::Add(a, b, kind) };
        self.push(out, op, rg, name)
    }

    /// Elementwise sum; `b` may be a row (`1 × c`), column (`r × 1`) or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(out, Op::Affine(x, scale), rg, "affine")
    }

    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 1.0)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg, "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg, "sigmoid")
    }

    /// `ln(max(x, floor))`; arguments below `floor` contribute no gradient and
    /// bump [`Tape::clamped_logs`].
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Result<Var> {
        let xv = self.value(x);
        let clamped = xv.data().iter().filter(|&&v| v < floor).count();
        let out = xv.map(|v| v.max(floor).ln());
        self.clamped_logs += clamped;
        let rg = self.rg(x);
        self.push(out, Op::Log(x, floor), rg, "log")
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    /// Row-wise softmax where columns with `mask[c] == false` get exactly zero
    /// weight.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        if xv.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let (rows, cols) = xv.shape();
        if let Some(m) = mask {
            if m.len() != cols {
                return Err(Error::Shape {
                    op: "softmax mask",
                    left: (rows, cols),
                    right: (1, m.len()),
                });
            }
            if !m.iter().any(|&k| k) {
                return Err(Error::validation("softmax: every position masked"));
            }
        }
        let keep = |c: usize| mask.is_none_or(|m| m[c]);
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let max = (0..cols)
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let o = out.row_mut(r);
            let mut z = 0.0;
            for c in 0..cols {
                if keep(c) {
                    let e = (row[c] - max).exp();
                    o[c] = e;
                    z += e;
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg, "softmax")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.shape(parts[0]),
                    right: s,
                });
            }
            cols += s.1;
        }
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: self.shape(parts[0]),
                    right: v.shape(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Mat::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            rg,
            "concat_rows",
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                left: xv.shape(),
                right: (start, len),
            });
        }
        let mut out = Mat::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        let rg = self.rg(x);
        self.push(out, Op::SliceCols(x, start), rg, "slice_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                left: xv.shape(),
                right: (start, len),
            });
        }
        let c = xv.cols();
        let out = Mat::from_vec(len, c, xv.data()[start * c..(start + len) * c].to_vec());
        let rg = self.rg(x);
        self.push(out, Op::SliceRows(x, start), rg, "slice_rows")
    }

    pub fn row(&mut self, x: Var, r: usize) -> Result<Var> {
        self.slice_rows(x, r, 1)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(out, Op::Transpose(x), rg, "transpose")
    }

    /// Column means: `r × c -> 1 × c`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        if rows == 0 {
            return Err(Error::validation("mean_rows over zero rows"));
        }
        let mut out = Mat::zeros(1, cols);
        for r in 0..rows {
            for (o, v) in out.row_mut(0).iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        out.scale_in_place(1.0 / rows as f64);
        let rg = self.rg(x);
        self.push(out, Op::MeanRows(x), rg, "mean_rows")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let out = Mat::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::SumAll(x), rg, "sum_all")
    }

    /// Row lookup: `table[ids[i]]` for each `i`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, cols) = tv.shape();
        let mut out = Mat::zeros(ids.len(), cols);
        for (i, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(Error::validation(format!(
                    "gather: id {id} out of range for table with {rows} rows"
                )));
            }
            out.row_mut(i).copy_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        self.push(out, Op::Gather(table, ids.to_vec()), rg, "gather")
    }

    /// Pairwise max over adjacent columns: `r × 2k -> r × k`.
    pub fn maxout(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        if cols % 2 != 0 {
            return Err(Error::validation(format!("maxout needs an even width, got {cols}")));
        }
        let k = cols / 2;
        let mut out = Mat::zeros(rows, k);
        let mut argmax = Vec::with_capacity(rows * k);
        for r in 0..rows {
            let row = xv.row(r);
            for j in 0..k {
                let (a, b) = (row[2 * j], row[2 * j + 1]);
                let pick = if b > a { 2 * j + 1 } else { 2 * j };
                out.set(r, j, row[pick]);
                argmax.push(r * cols + pick);
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Maxout(x, argmax), rg, "maxout")
    }

    /// Sums the entries of row vector `x` into a `1 × size` row at `ids`.
    pub fn scatter(&mut self, x: Var, ids: &[usize], size: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != 1 || xv.cols() != ids.len() {
            return Err(Error::Shape {
                op: "scatter",
                left: xv.shape(),
                right: (1, ids.len()),
            });
        }
        let mut out = Mat::zeros(1, size);
        for (&id, &v) in ids.iter().zip(xv.data()) {
            if id >= size {
                return Err(Error::validation(format!(
                    "scatter: id {id} out of range for width {size}"
                )));
            }
            out.data_mut()[id] += v;
        }
        let rg = self.rg(x);
        self.push(out, Op::Scatter(x, ids.to_vec()), rg, "scatter")
    }

    /// Zero-pads `x` at the bottom and right to `rows × cols`.
    pub fn pad(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() > rows || xv.cols() > cols {
            return Err(Error::Shape {
                op: "pad",
                left: xv.shape(),
                right: (rows, cols),
            });
        }
        let mut out = Mat::zeros(rows, cols);
        for r in 0..xv.rows() {
            out.row_mut(r)[..xv.cols()].copy_from_slice(xv.row(r));
        }
        let rg = self.rg(x);
        self.push(out, Op::Pad(x), rg, "pad")
    }

    pub fn pick(&mut self, x: Var, row: usize, col: usize) -> Result<Var> {
        let xv = self.value(x);
        if row >= xv.rows() || col >= xv.cols() {
            return Err(Error::Shape {
                op: "pick",
                left: xv.shape(),
                right: (row, col),
            });
        }
        let out = Mat::scalar(xv.get(row, col));
        let rg = self.rg(x);
        self.push(out, Op::Pick(x, row, col), rg, "pick")
    }

    /// Inverted dropout. Identity when not training or when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !training || rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::validation(format!("dropout rate {rate} not in [0, 1)")));
        }
        let (r, c) = self.shape(x);
        let keep = 1.0 / (1.0 - rate);
        let mask = (0..r * c)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let m = self.constant(Mat::from_vec(r, c, mask))?;
        self.mul(x, m)
    }

    /// Mean of scalar nodes, summed left to right.
    pub fn mean_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x)?;
        }
        self.affine(acc, 1.0 / xs.len() as f64, 0.0)
    }

    /// Reverse pass from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                left: self.shape(loss),
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Mat>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));
        let mut out = Grads::new(self.params.len());

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = self.value(Var(i));
            match &node.op {
                Op::Const => {}
                Op::Param(id) => out.set(*id, g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        // dA = G · Bᵀ
                        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                        let mut da = Mat::zeros(m, k);
                        for r in 0..m {
                            let gr = g.row(r);
                            for p in 0..k {
                                let br = bv.row(p);
                                da.set(r, p, gr.iter().zip(br).map(|(x, y)| x * y).sum());
                            }
                        }
                        let _ = n;
                        accum(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        // dB = Aᵀ · G
                        let mut db = Mat::zeros(bv.rows(), bv.cols());
                        let n = bv.cols();
                        for r in 0..av.rows() {
                            let gr = g.row(r);
                            for p in 0..av.cols() {
                                let a = av.get(r, p);
                                if a == 0.0 {
                                    continue;
                                }
                                let row = &mut db.data_mut()[p * n..(p + 1) * n];
                                for (d, gv) in row.iter_mut().zip(gr) {
                                    *d += a * gv;
                                }
                            }
                        }
                        accum(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b, kind) => {
                    if self.rg(*b) {
                        let db = reduce_bcast(&g, *kind, self.shape(*b), |_, _| 1.0);
                        accum(&mut grads, *b, db);
                    }
                    if self.rg(*a) {
                        accum(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b, kind) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*b) {
                        let db = reduce_bcast(&g, *kind, bv.shape(), |r, c| av.get(r, c));
                        accum(&mut grads, *b, db);
                    }
                    if self.rg(*a) {
                        let bc = bv.cols();
                        let mut da = g;
                        for r in 0..da.rows() {
                            for (c, d) in da.row_mut(r).iter_mut().enumerate() {
                                *d *= bv.data()[bcast_index(*kind, r, c, bc)];
                            }
                        }
                        accum(&mut grads, *a, da);
                    }
                }
                Op::Affine(x, scale) => {
                    let mut dx = g;
                    dx.scale_in_place(*scale);
                    accum(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let mut dx = g;
                    for (d, yv) in dx.data_mut().iter_mut().zip(y.data()) {
                        *d *= 1.0 - yv * yv;
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let mut dx = g;
                    for (d, yv) in dx.data_mut().iter_mut().zip(y.data()) {
                        *d *= yv * (1.0 - yv);
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::Log(x, floor) => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        *d = if *v >= *floor { *d / v } else { 0.0 };
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::Softmax(x) => {
                    let mut dx = g;
                    for r in 0..dx.rows() {
                        let yr = y.row(r);
                        let dot: f64 = dx.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (d, yv) in dx.row_mut(r).iter_mut().zip(yr) {
                            *d = yv * (*d - dot);
                        }
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (pr, pc) = self.shape(p);
                        if self.rg(p) {
                            let mut dp = Mat::zeros(pr, pc);
                            for r in 0..pr {
                                dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                            }
                            accum(&mut grads, p, dp);
                        }
                        off += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (pr, pc) = self.shape(p);
                        if self.rg(p) {
                            let dp = Mat::from_vec(pr, pc, g.data()[off * pc..(off + pr) * pc].to_vec());
                            accum(&mut grads, p, dp);
                        }
                        off += pr;
                    }
                }
                Op::SliceCols(x, start) => {
                    let (xr, xc) = self.shape(*x);
                    let mut dx = Mat::zeros(xr, xc);
                    for r in 0..xr {
                        let gr = g.row(r);
                        dx.row_mut(r)[*start..*start + gr.len()].copy_from_slice(gr);
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::SliceRows(x, start) => {
                    let (xr, xc) = self.shape(*x);
                    add_into(&mut grads, *x, (xr, xc), |dx| {
                        for (d, v) in dx.data_mut()[start * xc..].iter_mut().zip(g.data()) {
                            *d += v;
                        }
                    });
                }
                Op::Transpose(x) => accum(&mut grads, *x, g.transpose()),
                Op::MeanRows(x) => {
                    let (xr, xc) = self.shape(*x);
                    let s = 1.0 / xr as f64;
                    let mut dx = Mat::zeros(xr, xc);
                    for r in 0..xr {
                        for (d, v) in dx.row_mut(r).iter_mut().zip(g.row(0)) {
                            *d = v * s;
                        }
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::SumAll(x) => {
                    let (xr, xc) = self.shape(*x);
                    accum(&mut grads, *x, Mat::filled(xr, xc, g.item()));
                }
                Op::Gather(table, ids) => {
                    let shape = self.shape(*table);
                    add_into(&mut grads, *table, shape, |dt| {
                        for (i, &id) in ids.iter().enumerate() {
                            for (d, v) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                                *d += v;
                            }
                        }
                    });
                }
                Op::Maxout(x, argmax) => {
                    let shape = self.shape(*x);
                    add_into(&mut grads, *x, shape, |dx| {
                        for (&idx, v) in argmax.iter().zip(g.data()) {
                            dx.data_mut()[idx] += v;
                        }
                    });
                }
                Op::Scatter(x, ids) => {
                    let dx = Mat::row_vector(ids.iter().map(|&id| g.data()[id]).collect());
                    accum(&mut grads, *x, dx);
                }
                Op::Pad(x) => {
                    let (xr, xc) = self.shape(*x);
                    let mut dx = Mat::zeros(xr, xc);
                    for r in 0..xr {
                        dx.row_mut(r).copy_from_slice(&g.row(r)[..xc]);
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::Pick(x, r, c) => {
                    let shape = self.shape(*x);
                    let gv = g.item();
                    add_into(&mut grads, *x, shape, |dx| {
                        let cols = dx.cols();
                        dx.data_mut()[r * cols + c] += gv;
                    });
                }
            }
        }
        Ok(out)
    }
}

fn accum(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn add_into(grads: &mut [Option<Mat>], v: Var, shape: (usize, usize), f: impl FnOnce(&mut Mat)) {
    let slot = grads[v.0].get_or_insert_with(|| Mat::zeros(shape.0, shape.1));
    f(slot);
}

/// Reduces `g ⊙ factor` onto the broadcast operand's shape.
fn reduce_bcast(g: &Mat, kind: Bcast, shape: (usize, usize), factor: impl Fn(usize, usize) -> f64) -> Mat {
    let mut out = Mat::zeros(shape.0, shape.1);
    let cols = shape.1;
    for r in 0..g.rows() {
        for (c, gv) in g.row(r).iter().enumerate() {
            let idx = bcast_index(kind, r, c, cols);
            out.data_mut()[idx] += gv * factor(r, c);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Group;

    fn one_param(value: Mat) -> (ParameterSet, ParamId) {
        let mut p = ParameterSet::new();
        let id = p.add("x", Group::QgCore, value).unwrap();
        (p, id)
    }

    #[test]
    fn square_gradient() {
        let (p, id) = one_param(Mat::scalar(3.0));
        let mut t = Tape::new(&p);
        let x = t.param(id);
        let y = t.mul(x, x).unwrap();
        assert_eq!(t.scalar(y), 9.0);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(id).unwrap().item(), 6.0);
    }

    #[test]
    fn elementary_values() {
        let p = ParameterSet::new();
        let mut t = Tape::new(&p);
        let z = t.constant(Mat::scalar(0.0)).unwrap();
        let th = t.tanh(z).unwrap();
        let sg = t.sigmoid(z).unwrap();
        assert_eq!(t.scalar(th), 0.0);
        assert_eq!(t.scalar(sg), 0.5);
        let a = t.constant(Mat::row_vector(vec![1.0, 2.0])).unwrap();
        let b = t.constant(Mat::row_vector(vec![3.0])).unwrap();
        let c = t.concat_cols(&[a, b]).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let p = ParameterSet::new();
        let mut t = Tape::new(&p);
        let a = t.zeros(2, 3);
        let b = t.zeros(2, 3);
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("(2, 3)"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_masked() {
        let p = ParameterSet::new();
        let mut t = Tape::new(&p);
        let z = t.zeros(1, 3);
        let s = t.softmax(z).unwrap();
        for v in t.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = t.constant(Mat::row_vector(vec![5.0, 1.0, 2.0])).unwrap();
        let s = t.softmax_masked(x, Some(&[true, false, true])).unwrap();
        assert_eq!(t.value(s).get(0, 1), 0.0);
        assert!((t.value(s).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_nan() {
        let p = ParameterSet::new();
        let mut t = Tape::new(&p);
        let x = t.nodes.len();
        t.nodes.push(Node {
            value: Some(Mat::row_vector(vec![f64::NAN, 0.0])),
            op: Op::Const,
            requires_grad: false,
        });
        assert!(t.softmax(Var(x)).is_err());
    }

    #[test]
    fn maxout_pairs_and_subgradient() {
        let (p, id) = one_param(Mat::row_vector(vec![1.0, 3.0, 2.0, 5.0]));
        let mut t = Tape::new(&p);
        let x = t.param(id);
        let m = t.maxout(x).unwrap();
        assert_eq!(t.value(m).data(), &[3.0, 5.0]);
        let s = t.sum_all(m).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(id).unwrap().data(), &[0.0, 1.0, 0.0, 1.0]);

        let mut t = Tape::new(&p);
        let odd = t.zeros(1, 3);
        assert!(t.maxout(odd).is_err());
    }

    #[test]
    fn dropout_identity_cases() {
        let (p, id) = one_param(Mat::row_vector(vec![1.0, -2.0, 3.0]));
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let mut t = Tape::new(&p);
        let x = t.param(id);
        assert_eq!(t.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(t.dropout(x, 0.3, false, &mut rng).unwrap(), x);
    }

    #[test]
    fn inference_tape_yields_no_grads() {
        let (p, id) = one_param(Mat::scalar(2.0));
        let mut t = Tape::inference(&p);
        let x = t.param(id);
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(id).is_none());
    }

    #[test]
    fn log_clamp_counts() {
        let p = ParameterSet::new();
        let mut t = Tape::new(&p);
        let x = t.constant(Mat::row_vector(vec![0.0, 1.0])).unwrap();
        let l = t.log_clamped(x, 1e-12).unwrap();
        assert_eq!(t.clamped_logs(), 1);
        assert!((t.value(l).get(0, 0) - (1e-12f64).ln()).abs() < 1e-9);
    }
}

//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation of one forward evaluation. Parameters
//! enter through [`Graph::param`] and are deduplicated per graph, so a block
//! that reuses a weight (tied arms, recurrent steps) accumulates all of its
//! gradient contributions into the same slot.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::{GradStore, ParamId, ParamStore};
use crate::tensor::Matrix;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulConst(Var, Matrix),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Sqrt(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ShiftRows(Var, isize),
    MeanRows(Var),
    SumAll(Var),
    Custom(Vec<(Var, Matrix)>),
}

struct Node {
    value: Matrix,
    op: Op,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    training: bool,
    rng: Option<ChaCha8Rng>,
}

impl<'a> Graph<'a> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
            training: false,
            rng: None,
        }
    }

    /// Training-mode graph; dropout masks are drawn from `rng`.
    pub fn training(store: &'a ParamStore, rng: ChaCha8Rng) -> Self {
        Self {
            training: true,
            rng: Some(rng),
            ..Self::new(store)
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Input or constant. Gradients are still computed for it.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.index()] {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param);
        self.param_nodes[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    /// Adds a `1 x C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (rows, cols) = self.shape(a);
        assert_eq!(self.shape(row), (1, cols), "add_row expects a 1x{cols} row");
        let r = self.value(row).clone();
        let mut value = self.value(a).clone();
        for i in 0..rows {
            for (x, b) in value.row_mut(i).iter_mut().zip(r.as_slice()) {
                *x += b;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    /// Scales row `i` of `a` by `col[i]` (`col` is `N x 1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (rows, _) = self.shape(a);
        assert_eq!(self.shape(col), (rows, 1), "mul_col expects an {rows}x1 column");
        let c = self.value(col).clone();
        let mut value = self.value(a).clone();
        for i in 0..rows {
            let s = c[(i, 0)];
            value.row_mut(i).iter_mut().for_each(|x| *x *= s);
        }
        self.push(value, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 - x);
        self.push(value, Op::OneMinus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    /// Element-wise square root of a nonnegative input; the derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0).sqrt());
        self.push(value, Op::Sqrt(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = crate::tensor::softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with learnable `1 x C` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        assert_eq!(self.shape(gain), (1, cols));
        assert_eq!(self.shape(bias), (1, cols));
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let g = self.value(gain).as_slice().to_vec();
        let b = self.value(bias).as_slice().to_vec();
        let mut value = xhat.clone();
        for r in 0..rows {
            for (c, v) in value.row_mut(r).iter_mut().enumerate() {
                *v = *v * g[c] + b[c];
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let value = Matrix::concat_cols(&mats);
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let value = Matrix::concat_rows(&mats);
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_cols(start, len);
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_rows(start, len);
        self.push(value, Op::SliceRows(a, start))
    }

    /// `out[t] = a[t + offset]`, zero where `t + offset` falls outside the sequence.
    pub fn shift_rows(&mut self, a: Var, offset: isize) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        let mut value = Matrix::zeros(rows, cols);
        for t in 0..rows {
            let src = t as isize + offset;
            if src >= 0 && (src as usize) < rows {
                value.row_mut(t).copy_from_slice(av.row(src as usize));
            }
        }
        self.push(value, Op::ShiftRows(a, offset))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_rows();
        self.push(value, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    /// Inverted dropout; identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return a;
        }
        let (rows, cols) = self.shape(a);
        let keep = 1.0 - p;
        let rng = self.rng.as_mut().expect("training graph carries an rng");
        let mask: Vec<f64> = (0..rows * cols)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Matrix::from_vec(rows, cols, mask);
        let value = self.value(a).zip_map(&mask, |x, m| x * m);
        self.push(value, Op::MulConst(a, mask))
    }

    /// Scalar node whose local gradients were computed analytically by the caller.
    pub fn custom_scalar(&mut self, value: f64, local_grads: Vec<(Var, Matrix)>) -> Var {
        for (v, g) in &local_grads {
            assert_eq!(self.shape(*v), g.shape(), "custom gradient shape mismatch");
        }
        self.push(Matrix::scalar(value), Op::Custom(local_grads))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let da = dout.matmul_nt(self.value(*b));
                    let db = self.value(*a).matmul_tn(&dout);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, dout.clone());
                    acc(&mut grads, *b, dout.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, dout.scale(-1.0));
                    acc(&mut grads, *a, dout.clone());
                }
                Op::Mul(a, b) => {
                    let da = dout.zip_map(self.value(*b), |g, y| g * y);
                    let db = dout.zip_map(self.value(*a), |g, x| g * x);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddRow(a, row) => {
                    let db = dout.mean_rows().scale(dout.rows() as f64);
                    acc(&mut grads, *row, db);
                    acc(&mut grads, *a, dout.clone());
                }
                Op::MulCol(a, col) => {
                    let av = self.value(*a);
                    let cv = self.value(*col);
                    let mut da = dout.clone();
                    let mut dc = Matrix::zeros(cv.rows(), 1);
                    for i in 0..dout.rows() {
                        let s = cv[(i, 0)];
                        dc[(i, 0)] = crate::tensor::dot(dout.row(i), av.row(i));
                        da.row_mut(i).iter_mut().for_each(|x| *x *= s);
                    }
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *col, dc);
                }
                Op::MulConst(a, mask) => {
                    acc(&mut grads, *a, dout.zip_map(mask, |g, m| g * m));
                }
                Op::Scale(a, s) => acc(&mut grads, *a, dout.scale(*s)),
                Op::OneMinus(a) => acc(&mut grads, *a, dout.scale(-1.0)),
                Op::Sigmoid(a) => {
                    let d = dout.zip_map(&node.value, |g, y| g * y * (1.0 - y));
                    acc(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let d = dout.zip_map(&node.value, |g, y| g * (1.0 - y * y));
                    acc(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let d = dout.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                    acc(&mut grads, *a, d);
                }
                Op::Sqrt(a) => {
                    let d = dout.zip_map(&node.value, |g, y| if y > 0.0 { 0.5 * g / y } else { 0.0 });
                    acc(&mut grads, *a, d);
                }
                Op::Transpose(a) => acc(&mut grads, *a, dout.transpose()),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let s = crate::tensor::dot(dout.row(r), y.row(r));
                        for ((o, g), p) in d.row_mut(r).iter_mut().zip(dout.row(r)).zip(y.row(r)) {
                            *o = p * (g - s);
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let g = self.value(*gain).as_slice();
                    let (rows, cols) = xhat.shape();
                    let n = cols as f64;
                    let mut dx = Matrix::zeros(rows, cols);
                    let mut dg = Matrix::zeros(1, cols);
                    let mut db = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        let dy = dout.row(r);
                        let xh = xhat.row(r);
                        let dxhat: Vec<f64> = dy.iter().zip(g).map(|(d, g)| d * g).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xh).map(|(d, x)| d * x).sum();
                        let inv = inv_std[r];
                        for c in 0..cols {
                            dx[(r, c)] = inv / n * (n * dxhat[c] - sum_d - xh[c] * sum_dx);
                            dg[(0, c)] += dy[c] * xh[c];
                            db[(0, c)] += dy[c];
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gain, dg);
                    acc(&mut grads, *bias, db);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        acc(&mut grads, *p, dout.slice_cols(start, w));
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.shape(*p).0;
                        acc(&mut grads, *p, dout.slice_rows(start, h));
                        start += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut d = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        d.row_mut(r)[*start..*start + dout.cols()].copy_from_slice(dout.row(r));
                    }
                    acc(&mut grads, *a, d);
                }
                Op::SliceRows(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut d = Matrix::zeros(rows, cols);
                    for r in 0..dout.rows() {
                        d.row_mut(start + r).copy_from_slice(dout.row(r));
                    }
                    acc(&mut grads, *a, d);
                }
                Op::ShiftRows(a, offset) => {
                    let (rows, cols) = self.shape(*a);
                    let mut d = Matrix::zeros(rows, cols);
                    for t in 0..rows {
                        let src = t as isize + offset;
                        if src >= 0 && (src as usize) < rows {
                            let src = src as usize;
                            for (o, g) in d.row_mut(src).iter_mut().zip(dout.row(t)) {
                                *o += g;
                            }
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = self.shape(*a);
                    let mut d = Matrix::zeros(rows, cols);
                    let inv = 1.0 / rows as f64;
                    for r in 0..rows {
                        for (o, g) in d.row_mut(r).iter_mut().zip(dout.row(0)) {
                            *o = g * inv;
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::SumAll(a) => {
                    let (rows, cols) = self.shape(*a);
                    acc(&mut grads, *a, Matrix::filled(rows, cols, dout.item()));
                }
                Op::Custom(locals) => {
                    let up = dout.item();
                    for (v, g) in locals {
                        acc(&mut grads, *v, g.scale(up));
                    }
                }
            }
            grads[idx] = Some(dout);
        }
        Gradients { grads }
    }

    /// Adds the gradient of every parameter node into `into`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, into: &mut GradStore) {
        for (id, slot) in self.param_nodes.iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = grads.wrt(*v) {
                    into.accumulate(ParamId(id), g);
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

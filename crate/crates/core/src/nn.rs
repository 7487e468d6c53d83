//! Small parameterized building blocks: affine maps, layer norm, feed-forward.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            weight: store.xavier(format!("{name}.weight"), in_dim, out_dim, rng),
            bias: store.zeros(format!("{name}.bias"), 1, out_dim),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    /// Overwrites the weight and zeroes the bias.
    pub fn set(&self, store: &mut ParamStore, weight: Matrix) {
        store.set(self.weight, weight);
        store.set(self.bias, Matrix::zeros(1, self.out_dim));
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.filled(format!("{name}.gain"), 1, dim, 1.0),
            bias: store.zeros(format!("{name}.bias"), 1, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}

/// Reference row-wise layer norm with unit gain and zero bias.
pub fn layer_norm_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = x.row(r);
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (o, v) in out.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
    }
    out
}

/// Position-wise feed-forward with a residual: `x + W2 relu(W1 x + b1) + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.inner"), dim, hidden, rng),
            outer: Linear::new(store, &format!("{name}.outer"), hidden, dim, rng),
            dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.inner.forward(g, x);
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout);
        let y = self.outer.forward(g, h);
        g.add(x, y)
    }

    /// Zeroes both layers so the block is the identity.
    pub fn zero(&self, store: &mut ParamStore) {
        self.inner
            .set(store, Matrix::zeros(self.inner.in_dim, self.inner.out_dim));
        self.outer
            .set(store, Matrix::zeros(self.outer.in_dim, self.outer.out_dim));
    }
}

/// Two-layer ReLU classifier head: `W2 relu(W1 x)`.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub hidden: Linear,
    pub output: Linear,
    pub dropout: f64,
}

impl MlpHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), in_dim, hidden, rng),
            output: Linear::new(store, &format!("{name}.output"), hidden, out_dim, rng),
            dropout,
        }
    }

    /// Returns `(hidden activation, logits)`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> (Var, Var) {
        let h = self.hidden.forward(g, x);
        let h = g.relu(h);
        let hd = g.dropout(h, self.dropout);
        let logits = self.output.forward(g, hd);
        (h, logits)
    }
}

//! Conversation-level context encoders.
//!
//! * [`ContextualGru`]: BiGRU, projection back to the hidden width, one
//!   self-attention block and a position-wise feed-forward.
//! * [`TemporalInception`]: parallel same-padded 1-D convolutions over the
//!   utterance axis, concatenated and projected.
//! * [`ContextAdditionNetwork`]: inception, BiGRU, a residual from the
//!   (projected) input and a linear classifier.
//! * [`convex_layer_mix`]: softmax-weighted sum of encoder layers.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBlock, AttentionConfig};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{softmax, Matrix};

fn default_kernels() -> Vec<usize> {
    vec![1, 3, 5]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextConfig {
    pub hidden_dim: usize,
    pub gru_layers: usize,
    pub dropout: f64,
    #[serde(default = "default_kernels")]
    pub inception_kernels: Vec<usize>,
}

impl ContextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.gru_layers == 0 {
            return Err(Error::Config(
                "context.hidden_dim and context.gru_layers must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("context.dropout must lie in [0, 1)".into()));
        }
        if self.inception_kernels.is_empty() {
            return Err(Error::Config("context.inception_kernels is empty".into()));
        }
        if let Some(k) = self.inception_kernels.iter().find(|&&k| k == 0 || k % 2 == 0) {
            return Err(Error::Config(format!(
                "context.inception_kernels must be odd and positive, got {k}"
            )));
        }
        Ok(())
    }
}

/// One GRU direction with gates ordered `[reset | update | candidate]`:
///
/// ```text
/// r = σ(x W_ir + b_ir + h W_hr + b_hr)
/// z = σ(x W_iz + b_iz + h W_hz + b_hz)
/// n = tanh(x W_in + b_in + r ⊙ (h W_hn + b_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone, Debug)]
pub struct GruLayer {
    pub w_ih: ParamId,
    pub b_ih: ParamId,
    pub w_hh: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl GruLayer {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: store.uniform(format!("{name}.w_ih"), in_dim, 3 * hidden, bound, rng),
            b_ih: store.uniform(format!("{name}.b_ih"), 1, 3 * hidden, bound, rng),
            w_hh: store.uniform(format!("{name}.w_hh"), hidden, 3 * hidden, bound, rng),
            b_hh: store.uniform(format!("{name}.b_hh"), 1, 3 * hidden, bound, rng),
            hidden,
        }
    }

    /// Runs over the rows of `x`, last-to-first when `reverse`. Output row `t`
    /// is the state after consuming row `t`.
    pub fn forward(&self, g: &mut Graph, x: Var, reverse: bool) -> Var {
        let n = g.shape(x).0;
        let h_dim = self.hidden;
        let w_ih = g.param(self.w_ih);
        let b_ih = g.param(self.b_ih);
        let w_hh = g.param(self.w_hh);
        let b_hh = g.param(self.b_hh);
        let xi = g.matmul(x, w_ih);
        let xi = g.add_row(xi, b_ih);
        let mut h = g.input(Matrix::zeros(1, h_dim));
        let mut states = vec![h; n];
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in order {
            let gi = g.slice_rows(xi, t, 1);
            let gh = g.matmul(h, w_hh);
            let gh = g.add_row(gh, b_hh);
            let (ir, iz, inn) = (g.slice_cols(gi, 0, h_dim), g.slice_cols(gi, h_dim, h_dim), g.slice_cols(gi, 2 * h_dim, h_dim));
            let (hr, hz, hn) = (g.slice_cols(gh, 0, h_dim), g.slice_cols(gh, h_dim, h_dim), g.slice_cols(gh, 2 * h_dim, h_dim));
            let r = g.add(ir, hr);
            let r = g.sigmoid(r);
            let z = g.add(iz, hz);
            let z = g.sigmoid(z);
            let rh = g.mul(r, hn);
            let cand = g.add(inn, rh);
            let cand = g.tanh(cand);
            // h' = n + z ⊙ (h − n)
            let diff = g.sub(h, cand);
            let keep = g.mul(z, diff);
            h = g.add(cand, keep);
            states[t] = h;
        }
        g.concat_rows(&states)
    }
}

/// Stacked bidirectional GRU; output `[N x 2H]` with forward states first.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub layers: Vec<(GruLayer, GruLayer)>,
    pub dropout: f64,
}

impl BiGru {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        num_layers: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|l| {
                let d = if l == 0 { in_dim } else { 2 * hidden };
                (
                    GruLayer::new(store, &format!("{name}.l{l}.fwd"), d, hidden, rng),
                    GruLayer::new(store, &format!("{name}.l{l}.bwd"), d, hidden, rng),
                )
            })
            .collect();
        Self { layers, dropout }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].0.hidden
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut cur = x;
        for (i, (f, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                cur = g.dropout(cur, self.dropout);
            }
            let hf = f.forward(g, cur, false);
            let hb = b.forward(g, cur, true);
            cur = g.concat_cols(&[hf, hb]);
        }
        cur
    }
}

fn require_rows(g: &Graph, x: Var, width: usize, context: &'static str) -> Result<()> {
    let (n, d) = g.shape(x);
    if n == 0 {
        return Err(Error::InvalidArgument(format!("{context}: empty sequence")));
    }
    if d != width {
        return Err(Error::shape(context, width, d));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ContextualGru {
    pub bigru: BiGru,
    pub merge: Linear,
    pub attention: AttentionBlock,
    pub feed_forward: FeedForward,
    pub in_dim: usize,
}

impl ContextualGru {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        cfg: &ContextConfig,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden_dim;
        let attn_cfg = AttentionConfig::new(h, heads, cfg.dropout)?;
        Ok(Self {
            bigru: BiGru::new(store, &format!("{name}.bigru"), in_dim, h, cfg.gru_layers, cfg.dropout, rng),
            merge: Linear::new(store, &format!("{name}.merge"), 2 * h, h, rng),
            attention: AttentionBlock::new(store, &format!("{name}.attn"), &attn_cfg, rng),
            feed_forward: FeedForward::new(store, &format!("{name}.ff"), h, 2 * h, cfg.dropout, rng),
            in_dim,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.merge.out_dim
    }

    /// `[N x D] -> [N x H]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        require_rows(g, x, self.in_dim, "contextual_gru input")?;
        let h = self.bigru.forward(g, x);
        let h = self.merge.forward(g, h);
        let h = self.attention.self_attend(g, h)?;
        Ok(self.feed_forward.forward(g, h))
    }
}

/// Same-padded convolution branches over the utterance axis.
#[derive(Clone, Debug)]
pub struct TemporalInception {
    pub kernels: Vec<usize>,
    /// Branch `i` maps `kernels[i] · D` stacked neighbours to `out_dim`.
    pub branches: Vec<Linear>,
    pub projection: Linear,
    pub in_dim: usize,
}

impl TemporalInception {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        kernels: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let branches = kernels
            .iter()
            .map(|&k| Linear::new(store, &format!("{name}.k{k}"), k * in_dim, out_dim, rng))
            .collect();
        Self {
            kernels: kernels.to_vec(),
            branches,
            projection: Linear::new(store, &format!("{name}.proj"), kernels.len() * out_dim, out_dim, rng),
            in_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.projection.out_dim
    }

    /// `[N x D] -> [N x D']`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        require_rows(g, x, self.in_dim, "temporal_inception input")?;
        let mut outs = Vec::with_capacity(self.kernels.len());
        for (&k, branch) in self.kernels.iter().zip(&self.branches) {
            let half = (k / 2) as isize;
            let taps: Vec<Var> = (-half..=half).map(|o| if o == 0 { x } else { g.shift_rows(x, o) }).collect();
            let stacked = if taps.len() == 1 { taps[0] } else { g.concat_cols(&taps) };
            outs.push(branch.forward(g, stacked));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        Ok(self.projection.forward(g, cat))
    }
}

/// Output of [`ContextAdditionNetwork::forward`].
pub struct CanOutput {
    /// Context-enhanced embeddings `[N x 2H]`.
    pub hidden: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct ContextAdditionNetwork {
    pub inception: TemporalInception,
    pub bigru: BiGru,
    /// Maps the input embeddings onto the BiGRU width for the residual.
    pub residual: Linear,
    pub classifier: Linear,
    pub dropout: f64,
}

impl ContextAdditionNetwork {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        num_classes: usize,
        cfg: &ContextConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden_dim;
        let inception = TemporalInception::new(store, &format!("{name}.tin"), in_dim, h, &cfg.inception_kernels, rng);
        Ok(Self {
            bigru: BiGru::new(store, &format!("{name}.bigru"), h, h, cfg.gru_layers, cfg.dropout, rng),
            inception,
            residual: Linear::new(store, &format!("{name}.residual"), in_dim, 2 * h, rng),
            classifier: Linear::new(store, &format!("{name}.fc"), 2 * h, num_classes, rng),
            dropout: cfg.dropout,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<CanOutput> {
        let local = self.inception.forward(g, x)?;
        let ctx = self.bigru.forward(g, local);
        let skip = self.residual.forward(g, x);
        let hidden = g.add(ctx, skip);
        let dropped = g.dropout(hidden, self.dropout);
        let logits = self.classifier.forward(g, dropped);
        Ok(CanOutput { hidden, logits })
    }
}

/// `L` layer representations sharing one `T x D` shape.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    layers: Vec<Matrix>,
}

impl LayerStack {
    pub fn new(layers: Vec<Matrix>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::InvalidArgument("layer stack is empty".into()))?
            .shape();
        if let Some(bad) = layers.iter().find(|m| m.shape() != first) {
            return Err(Error::shape(
                "layer stack",
                format!("{first:?}"),
                format!("{:?}", bad.shape()),
            ));
        }
        Ok(Self { layers })
    }

    /// Splits a layer-major `(L·T) x D` matrix into `L` layers.
    pub fn from_stacked(m: &Matrix, num_layers: usize) -> Result<Self> {
        if num_layers == 0 || m.rows() % num_layers != 0 {
            return Err(Error::shape("stacked layer rows", format!("multiple of {num_layers}"), m.rows()));
        }
        let t = m.rows() / num_layers;
        Self::new((0..num_layers).map(|l| m.slice_rows(l * t, t)).collect())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.layers[0].shape()
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    /// Repeats the feature axis `times` times: `[x]` becomes `[x, x, …]`.
    pub fn tile_features(&self, times: usize) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|m| Matrix::concat_cols(&vec![m; times]))
                .collect(),
        }
    }
}

/// `Σ_l softmax(raw)_l · layer_l`.
pub fn convex_layer_mix(stack: &LayerStack, raw_weights: &[f64]) -> Result<Matrix> {
    if raw_weights.len() != stack.num_layers() {
        return Err(Error::shape("mix weights", stack.num_layers(), raw_weights.len()));
    }
    let w = softmax(raw_weights);
    let (t, d) = stack.shape();
    let mut out = Matrix::zeros(t, d);
    for (layer, wl) in stack.layers().iter().zip(&w) {
        out.add_scaled(layer, *wl);
    }
    Ok(out)
}

/// Graph version of [`convex_layer_mix`]; `raw_weights` is `1 x L`.
pub fn convex_layer_mix_var(g: &mut Graph, layers: &[Var], raw_weights: Var) -> Result<Var> {
    let l = layers.len();
    if l == 0 {
        return Err(Error::InvalidArgument("layer stack is empty".into()));
    }
    if g.shape(raw_weights) != (1, l) {
        return Err(Error::shape("mix weights", format!("(1, {l})"), format!("{:?}", g.shape(raw_weights))));
    }
    let w = g.softmax_rows(raw_weights);
    let t = g.shape(layers[0]).0;
    let ones = g.input(Matrix::filled(t, 1, 1.0));
    let mut acc = None;
    for (i, &layer) in layers.iter().enumerate() {
        let wi = g.slice_cols(w, i, 1);
        let col = g.matmul(ones, wi);
        let term = g.mul_col(layer, col);
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term),
        });
    }
    Ok(acc.expect("at least one layer"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error};
    use rand::{Rng, SeedableRng};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(21)
    }

    fn randm(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn cfg(h: usize, layers: usize) -> ContextConfig {
        ContextConfig {
            hidden_dim: h,
            gru_layers: layers,
            dropout: 0.0,
            inception_kernels: vec![1, 3, 5],
        }
    }

    /// Straight-line GRU step for one direction.
    fn gru_oracle(store: &ParamStore, l: &GruLayer, x: &Matrix) -> Matrix {
        let h_dim = l.hidden;
        let (wi, bi, wh, bh) = (store.get(l.w_ih), store.get(l.b_ih), store.get(l.w_hh), store.get(l.b_hh));
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = vec![0.0; h_dim];
        let mut out = Matrix::zeros(x.rows(), h_dim);
        for t in 0..x.rows() {
            let gi: Vec<f64> = (0..3 * h_dim)
                .map(|j| bi[(0, j)] + (0..x.cols()).map(|k| x[(t, k)] * wi[(k, j)]).sum::<f64>())
                .collect();
            let gh: Vec<f64> = (0..3 * h_dim)
                .map(|j| bh[(0, j)] + (0..h_dim).map(|k| h[k] * wh[(k, j)]).sum::<f64>())
                .collect();
            let mut next = vec![0.0; h_dim];
            for j in 0..h_dim {
                let r = sig(gi[j] + gh[j]);
                let z = sig(gi[h_dim + j] + gh[h_dim + j]);
                let n = (gi[2 * h_dim + j] + r * gh[2 * h_dim + j]).tanh();
                next[j] = (1.0 - z) * n + z * h[j];
            }
            h = next;
            out.row_mut(t).copy_from_slice(&h);
        }
        out
    }

    #[test]
    fn gru_matches_straight_line_oracle() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let l = GruLayer::new(&mut store, "g", 3, 4, &mut r);
        let x = randm(6, 3, &mut r);
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let out = l.forward(&mut g, xv, false);
        let want = gru_oracle(&store, &l, &x);
        assert!(max_relative_error(g.value(out).as_slice(), want.as_slice()) < 1e-12);

        // reverse direction equals the oracle on the flipped sequence, flipped back
        let flipped = Matrix::from_rows(&(0..6).rev().map(|t| x.row(t).to_vec()).collect::<Vec<_>>());
        let rev = l.forward(&mut g, xv, true);
        let want_rev = gru_oracle(&store, &l, &flipped);
        for t in 0..6 {
            for (a, b) in g.value(rev).row(t).iter().zip(want_rev.row(5 - t)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn contextual_gru_preserves_length() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let m = ContextualGru::new(&mut store, "c", 5, &cfg(4, 2), 2, &mut r).unwrap();
        for n in [1usize, 2, 7, 32] {
            let mut g = Graph::new(&store);
            let x = g.input(randm(n, 5, &mut r));
            let out = m.forward(&mut g, x).unwrap();
            assert_eq!(g.shape(out), (n, 4));
        }
        let mut g = Graph::new(&store);
        let empty = g.input(Matrix::zeros(0, 5));
        assert!(m.forward(&mut g, empty).is_err());
    }

    #[test]
    fn contextual_gru_crafted_passthrough_is_monotone() {
        // Input width 1, hidden width 3. Channel 0 carries tanh(0.1 x); channels
        // 1 and 2 hold constants +c and −c so the layer norm of the attention
        // residual is monotone in channel 0.
        let mut r = rng();
        let mut store = ParamStore::new();
        let m = ContextualGru::new(&mut store, "c", 1, &cfg(3, 1), 1, &mut r).unwrap();
        let (f, b) = &m.bigru.layers[0];
        for l in [f, b] {
            let mut w_ih = Matrix::zeros(1, 9);
            w_ih[(0, 6)] = 0.1;
            let mut b_ih = Matrix::zeros(1, 9);
            for j in 3..6 {
                b_ih[(0, j)] = -40.0; // update gate closed: h' = n
            }
            b_ih[(0, 7)] = 0.5;
            b_ih[(0, 8)] = -0.5;
            store.set(l.w_ih, w_ih);
            store.set(l.b_ih, b_ih);
            store.set(l.w_hh, Matrix::zeros(3, 9));
            store.set(l.b_hh, Matrix::zeros(1, 9));
        }
        let mut merge = Matrix::zeros(6, 3);
        for j in 0..3 {
            merge[(j, j)] = 1.0;
        }
        m.merge.set(&mut store, merge);
        m.attention.value.set(&mut store, Matrix::zeros(3, 3));
        m.feed_forward.zero(&mut store);

        let xs: Vec<f64> = (0..12).map(|i| -3.0 + 0.5 * i as f64).collect();
        let mut g = Graph::new(&store);
        let x = g.input(Matrix::from_vec(12, 1, xs.clone()));
        let out = m.forward(&mut g, x).unwrap();
        let ch0: Vec<f64> = (0..12).map(|t| g.value(out)[(t, 0)]).collect();
        // brute force: pairwise order agreement
        for i in 0..12 {
            for j in 0..12 {
                if xs[i] < xs[j] {
                    assert!(ch0[i] < ch0[j], "{i} {j}: {ch0:?}");
                }
            }
        }
    }

    #[test]
    fn inception_identity_passthrough() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let tin = TemporalInception::new(&mut store, "t", 4, 4, &[1, 3, 5], &mut r);
        tin.branches[0].set(&mut store, Matrix::identity(4));
        tin.branches[1].set(&mut store, Matrix::zeros(12, 4));
        tin.branches[2].set(&mut store, Matrix::zeros(20, 4));
        let mut proj = Matrix::zeros(12, 4);
        for j in 0..4 {
            proj[(j, j)] = 1.0;
        }
        tin.projection.set(&mut store, proj);
        let x = randm(5, 4, &mut r);
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let out = tin.forward(&mut g, xv).unwrap();
        assert_eq!(g.value(out), &x);
    }

    #[test]
    fn inception_impulse_response() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let tin = TemporalInception::new(&mut store, "t", 1, 1, &[3], &mut r);
        // taps ordered (t−1, t, t+1)
        let (a, b, c) = (0.2, -1.5, 3.0);
        tin.branches[0].set(&mut store, Matrix::from_vec(3, 1, vec![a, b, c]));
        tin.projection.set(&mut store, Matrix::identity(1));
        let mut g = Graph::new(&store);
        let x = g.input(Matrix::from_vec(3, 1, vec![0.0, 1.0, 0.0]));
        let out = tin.forward(&mut g, x).unwrap();
        // y_t = a x_{t−1} + b x_t + c x_{t+1}
        assert_eq!(g.value(out).as_slice(), &[c, b, a]);
    }

    #[test]
    fn inception_preserves_rows() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let tin = TemporalInception::new(&mut store, "t", 3, 5, &[1, 3, 5], &mut r);
        for n in 1..=16 {
            let mut g = Graph::new(&store);
            let x = g.input(randm(n, 3, &mut r));
            let out = tin.forward(&mut g, x).unwrap();
            assert_eq!(g.shape(out), (n, 5));
        }
    }

    #[test]
    fn can_zeroed_context_path_leaves_residual() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let can = ContextAdditionNetwork::new(&mut store, "can", 3, 4, &cfg(2, 1), &mut r).unwrap();
        for (f, b) in &can.bigru.layers {
            for l in [f, b] {
                for id in [l.w_ih, l.b_ih, l.w_hh, l.b_hh] {
                    let (rr, cc) = store.get(id).shape();
                    store.set(id, Matrix::zeros(rr, cc));
                }
            }
        }
        let x = randm(5, 3, &mut r);
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let out = can.forward(&mut g, xv).unwrap();
        let skip = x.matmul(store.get(can.residual.weight));
        let mut skip_b = skip.clone();
        for t in 0..5 {
            for (v, bb) in skip_b.row_mut(t).iter_mut().zip(store.get(can.residual.bias).row(0)) {
                *v += bb;
            }
        }
        let mut want = skip_b.matmul(store.get(can.classifier.weight));
        for t in 0..5 {
            for (v, bb) in want.row_mut(t).iter_mut().zip(store.get(can.classifier.bias).row(0)) {
                *v += bb;
            }
        }
        assert!(max_relative_error(g.value(out.logits).as_slice(), want.as_slice()) < 1e-12);
    }

    #[test]
    fn can_shapes_and_input_gradient() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let can = ContextAdditionNetwork::new(&mut store, "can", 3, 4, &cfg(2, 2), &mut r).unwrap();
        for _ in 0..5 {
            let n = r.gen_range(1..5);
            let x = randm(n, 3, &mut r);
            let eval = |xs: &[f64]| {
                let mut g = Graph::new(&store);
                let xv = g.input(Matrix::from_vec(n, 3, xs.to_vec()));
                let out = can.forward(&mut g, xv).unwrap();
                g.value(out.logits).mean()
            };
            let mut g = Graph::new(&store);
            let xv = g.input(x.clone());
            let out = can.forward(&mut g, xv).unwrap();
            assert_eq!(g.shape(out.logits), (n, 4));
            let s = g.sum_all(out.logits);
            let loss = g.scale(s, 1.0 / (n * 4) as f64);
            let grads = g.backward(loss);
            let numeric = central_difference(x.as_slice(), 1e-5, eval);
            let err = max_relative_error(grads.wrt(xv).unwrap().as_slice(), &numeric);
            assert!(err <= 1e-4, "{err}");
        }
    }

    #[test]
    fn layer_mix_cases() {
        let mut r = rng();
        let a = randm(3, 2, &mut r);
        let b = randm(3, 2, &mut r);
        let stack = LayerStack::new(vec![a.clone(), b.clone()]).unwrap();
        let mix = convex_layer_mix(&stack, &[0.7, 0.7]).unwrap();
        let half = a.zip_map(&b, |x, y| (x + y) / 2.0);
        assert!(max_relative_error(mix.as_slice(), half.as_slice()) < 1e-15);

        let three = LayerStack::new(vec![a.clone(), b.clone(), a.clone()]).unwrap();
        let pick = convex_layer_mix(&three, &[0.0, 30.0, 0.0]).unwrap();
        assert!(pick.zip_map(&b, |x, y| (x - y).abs()).max_abs() < 1e-6);

        let same = LayerStack::new(vec![a.clone(); 4]).unwrap();
        let out = convex_layer_mix(&same, &[0.3, -2.0, 1.0, 5.0]).unwrap();
        assert!(out.zip_map(&a, |x, y| (x - y).abs()).max_abs() < 1e-15);

        assert!(LayerStack::new(vec![a, Matrix::zeros(2, 2)]).is_err());
        assert!(LayerStack::new(vec![]).is_err());
    }

    #[test]
    fn layer_mix_graph_matches_plain() {
        let mut r = rng();
        let layers: Vec<Matrix> = (0..3).map(|_| randm(4, 2, &mut r)).collect();
        let raw = [0.2, -0.4, 1.1];
        let stack = LayerStack::new(layers.clone()).unwrap();
        let plain = convex_layer_mix(&stack, &raw).unwrap();
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = layers.into_iter().map(|m| g.input(m)).collect();
        let w = g.input(Matrix::row_vector(&raw));
        let out = convex_layer_mix_var(&mut g, &vars, w).unwrap();
        assert!(max_relative_error(g.value(out).as_slice(), plain.as_slice()) < 1e-14);
    }

    #[test]
    fn stacked_split_and_tiling() {
        let m = Matrix::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let s = LayerStack::from_stacked(&m, 2).unwrap();
        assert_eq!(s.layers()[1].as_slice(), &[3.0, 4.0]);
        let t = s.tile_features(2);
        assert_eq!(t.layers()[0].as_slice(), &[1.0, 1.0, 2.0, 2.0]);
        assert!(LayerStack::from_stacked(&m, 3).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(4, 1);
        assert!(c.validate().is_ok());
        c.inception_kernels = vec![1, 2];
        assert!(c.validate().is_err());
        let parsed: ContextConfig =
            serde_json::from_str(r#"{"hidden_dim": 8, "gru_layers": 1, "dropout": 0.1}"#).unwrap();
        assert_eq!(parsed.inception_kernels, vec![1, 3, 5]);
    }
}

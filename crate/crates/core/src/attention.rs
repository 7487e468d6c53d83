//! Attention primitives shared by both conversation pipelines.
//!
//! [`AttentionBlock`] computes `LayerNorm(Q + MultiHead(Q, K, V))`, where the
//! multi-head part projects queries, keys and values, splits the model width
//! evenly across heads, applies `softmax(Q_h K_hᵀ / √d_head) V_h` per head, and
//! projects the concatenated heads back to the model width. Self-attention
//! passes the same sequence three times; cross-attention takes queries from
//! one modality and keys/values from the other.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::tensor::Matrix;

/// Score added to masked-out keys; `exp` of it underflows to exactly zero.
const MASKED_SCORE: f64 = -1e30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub dropout_rate: f64,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, heads: usize, dropout_rate: f64) -> Result<Self> {
        let cfg = Self {
            model_dim,
            heads,
            dropout_rate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 {
            return Err(Error::Config(
                "attention.model_dim and attention.heads must be positive".into(),
            ));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "attention.model_dim {} is not divisible by attention.heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(
                "attention.dropout_rate must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// Key validity flags; at least one position is valid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceMask(Vec<bool>);

impl SequenceMask {
    pub fn new(valid: Vec<bool>) -> Result<Self> {
        if !valid.iter().any(|&v| v) {
            return Err(Error::InvalidArgument(
                "attention mask has no valid key position".into(),
            ));
        }
        Ok(Self(valid))
    }

    pub fn all_valid(len: usize) -> Self {
        Self(vec![true; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.0[i]
    }
}

#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm: LayerNorm,
    pub cfg: AttentionConfig,
}

/// Result of one attention evaluation with the per-head weight matrices.
pub struct AttentionOutput {
    pub output: Var,
    /// One `T_q x T_k` row-stochastic matrix per head.
    pub weights: Vec<Var>,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &AttentionConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.model_dim;
        Self {
            query: Linear::new(store, &format!("{name}.query"), d, d, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            output: Linear::new(store, &format!("{name}.output"), d, d, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
            cfg: cfg.clone(),
        }
    }

    /// Sets all four projections to the identity.
    pub fn set_identity(&self, store: &mut ParamStore) {
        let d = self.cfg.model_dim;
        for l in [&self.query, &self.key, &self.value, &self.output] {
            l.set(store, Matrix::identity(d));
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&SequenceMask>,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(g, q, k, v, mask)?.output)
    }

    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&SequenceMask>,
    ) -> Result<AttentionOutput> {
        let d = self.cfg.model_dim;
        let (tq, dq) = g.shape(q);
        let (tk, dk) = g.shape(k);
        let (tv, dv) = g.shape(v);
        if dq != d || dk != d || dv != d {
            return Err(Error::shape(
                "attention_block width",
                d,
                format!("q {dq}, k {dk}, v {dv}"),
            ));
        }
        if tk != tv {
            return Err(Error::shape("attention_block key/value length", tk, tv));
        }
        if tq == 0 || tk == 0 {
            return Err(Error::InvalidArgument("attention over an empty sequence".into()));
        }
        let mask_bias = match mask {
            Some(m) if m.len() != tk => {
                return Err(Error::shape("attention mask length", tk, m.len()));
            }
            Some(m) if !(0..tk).any(|i| m.is_valid(i)) => {
                return Err(Error::InvalidArgument("all keys are masked".into()));
            }
            Some(m) => {
                let mut bias = Matrix::zeros(tq, tk);
                for r in 0..tq {
                    for c in 0..tk {
                        if !m.is_valid(c) {
                            bias[(r, c)] = MASKED_SCORE;
                        }
                    }
                }
                Some(g.input(bias))
            }
            None => None,
        };

        let qp = self.query.forward(g, q);
        let kp = self.key.forward(g, k);
        let vp = self.value.forward(g, v);
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        let mut weights = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let (qh, kh, vh) = if self.cfg.heads == 1 {
                (qp, kp, vp)
            } else {
                (
                    g.slice_cols(qp, h * dh, dh),
                    g.slice_cols(kp, h * dh, dh),
                    g.slice_cols(vp, h * dh, dh),
                )
            };
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let mut scores = g.scale(scores, scale);
            if let Some(b) = mask_bias {
                scores = g.add(scores, b);
            }
            let attn = g.softmax_rows(scores);
            weights.push(attn);
            let attn = g.dropout(attn, self.cfg.dropout_rate);
            heads.push(g.matmul(attn, vh));
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        let out = self.output.forward(g, merged);
        let out = g.dropout(out, self.cfg.dropout_rate);
        let res = g.add(q, out);
        Ok(AttentionOutput {
            output: self.norm.forward(g, res),
            weights,
        })
    }

    pub fn self_attend(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.forward(g, x, x, x, None)
    }
}

/// Two cross-attention arms, each refined by self-attention, concatenated and
/// passed through one shared position-wise feed-forward over the `2d` vector.
#[derive(Clone, Debug)]
pub struct CoAttention {
    /// Queries from speech, keys/values from text.
    pub speech_cross: AttentionBlock,
    pub speech_self: AttentionBlock,
    /// Queries from text, keys/values from speech.
    pub text_cross: AttentionBlock,
    pub text_self: AttentionBlock,
    pub feed_forward: FeedForward,
}

pub struct CoAttentionOutput {
    /// `SelfAttn(CrossAttn(Q=speech, K=V=text))`.
    pub speech_arm: Var,
    /// `SelfAttn(CrossAttn(Q=text, K=V=speech))`.
    pub text_arm: Var,
    /// `FF([speech_arm; text_arm])`, width `2d`.
    pub output: Var,
}

impl CoAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &AttentionConfig,
        ff_hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            speech_cross: AttentionBlock::new(store, &format!("{name}.speech_cross"), cfg, rng),
            speech_self: AttentionBlock::new(store, &format!("{name}.speech_self"), cfg, rng),
            text_cross: AttentionBlock::new(store, &format!("{name}.text_cross"), cfg, rng),
            text_self: AttentionBlock::new(store, &format!("{name}.text_self"), cfg, rng),
            feed_forward: FeedForward::new(
                store,
                &format!("{name}.ff"),
                2 * cfg.model_dim,
                ff_hidden,
                cfg.dropout_rate,
                rng,
            ),
        }
    }

    /// Both arms share one pair of attention blocks.
    pub fn new_tied(
        store: &mut ParamStore,
        name: &str,
        cfg: &AttentionConfig,
        ff_hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let cross = AttentionBlock::new(store, &format!("{name}.cross"), cfg, rng);
        let selfa = AttentionBlock::new(store, &format!("{name}.self"), cfg, rng);
        Self {
            speech_cross: cross.clone(),
            speech_self: selfa.clone(),
            text_cross: cross,
            text_self: selfa,
            feed_forward: FeedForward::new(
                store,
                &format!("{name}.ff"),
                2 * cfg.model_dim,
                ff_hidden,
                cfg.dropout_rate,
                rng,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph, speech: Var, text: Var) -> Result<CoAttentionOutput> {
        let (ns, _) = g.shape(speech);
        let (nt, _) = g.shape(text);
        if ns != nt {
            return Err(Error::shape("co_attention sequence length", ns, nt));
        }
        let a = self.speech_cross.forward(g, speech, text, text, None)?;
        let a = self.speech_self.self_attend(g, a)?;
        let b = self.text_cross.forward(g, text, speech, speech, None)?;
        let b = self.text_self.self_attend(g, b)?;
        let cat = g.concat_cols(&[a, b]);
        let output = self.feed_forward.forward(g, cat);
        Ok(CoAttentionOutput {
            speech_arm: a,
            text_arm: b,
            output,
        })
    }
}

/// Frame scorer `vᵀ tanh(W x_t + b)` whose softmax over frames weights the statistics.
#[derive(Clone, Debug)]
pub struct AttentiveStatsPool {
    pub hidden: Linear,
    pub score: Linear,
}

impl AttentiveStatsPool {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, attn_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), dim, attn_dim, rng),
            score: Linear::new(store, &format!("{name}.score"), attn_dim, 1, rng),
        }
    }

    /// Frame weights as a `1 x T` probability row.
    pub fn frame_weights(&self, g: &mut Graph, seq: Var) -> Var {
        let h = self.hidden.forward(g, seq);
        let h = g.tanh(h);
        let e = self.score.forward(g, h);
        let e = g.transpose(e);
        g.softmax_rows(e)
    }

    /// `[μ_w ; σ_w]` as a `1 x 2D` row.
    pub fn forward(&self, g: &mut Graph, seq: Var) -> Result<Var> {
        if g.shape(seq).0 == 0 {
            return Err(Error::InvalidArgument("attentive pooling over an empty sequence".into()));
        }
        let w = self.frame_weights(g, seq);
        Ok(weighted_stats_var(g, seq, w))
    }
}

/// Weighted mean and clamped weighted standard deviation inside the graph.
pub fn weighted_stats_var(g: &mut Graph, seq: Var, weights_row: Var) -> Var {
    let mean = g.matmul(weights_row, seq);
    let sq = g.mul(seq, seq);
    let second = g.matmul(weights_row, sq);
    let mean_sq = g.mul(mean, mean);
    let var = g.sub(second, mean_sq);
    let var = g.relu(var);
    let std = g.sqrt(var);
    g.concat_cols(&[mean, std])
}

/// Plain evaluation of `[μ_w ; σ_w]` for given frame weights.
pub fn attentive_stats_pool(seq: &Matrix, weights: &[f64]) -> Result<Vec<f64>> {
    let (t, d) = seq.shape();
    if t == 0 {
        return Err(Error::InvalidArgument("attentive pooling over an empty sequence".into()));
    }
    if weights.len() != t {
        return Err(Error::shape("attentive pooling weights", t, weights.len()));
    }
    let mut mean = vec![0.0; d];
    let mut second = vec![0.0; d];
    for (r, &w) in weights.iter().enumerate() {
        for (c, &x) in seq.row(r).iter().enumerate() {
            mean[c] += w * x;
            second[c] += w * x * x;
        }
    }
    let std: Vec<f64> = second
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s - m * m).max(0.0).sqrt())
        .collect();
    mean.extend(std);
    Ok(mean)
}

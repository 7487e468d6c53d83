//! MiSTER-E: modality-specific context experts, a bidirectional fusion
//! network and a decision-level mixture-of-experts gate, trained jointly.
//!
//! Per conversation, speech and text utterance vectors each pass through a
//! context addition network (one expert each). Their context-enhanced
//! sequences feed the fusion network, the third expert. A single affine gate
//! over the three experts' logits mixes them into the final prediction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBlock, AttentionConfig};
use crate::autograd::{Graph, Var};
use crate::context::{ContextAdditionNetwork, ContextConfig};
use crate::error::{Error, Result};
use crate::losses::{focal_loss, kl_consistency_logits, supcon_loss, ClassWeights, LossConfig, SupConVariant};
use crate::metrics::{classification_report, MetricReport, SelectionMetric};
use crate::nn::Linear;
use crate::optim::OptimizerConfig;
use crate::params::{GradStore, ParamStore};
use crate::tensor::{softmax_rows, Matrix};
use crate::training::{fit, FitResult, LoadedConversation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MisterConfig {
    pub fusion_layers: usize,
    pub fusion_dim: usize,
    /// Fusion network alone, without context experts or gate.
    #[serde(default)]
    pub monolithic: bool,
}

impl Default for MisterConfig {
    fn default() -> Self {
        Self {
            fusion_layers: 4,
            fusion_dim: 120,
            monolithic: false,
        }
    }
}

/// Published hyper-parameter presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MisterPreset {
    Iemocap,
    Mosi,
    Meld,
}

/// `(λ, α, τ)` of the preset.
pub fn preset_loss_weights(p: MisterPreset) -> (f64, f64, f64) {
    match p {
        MisterPreset::Iemocap => (2.0, 0.1, 1.0),
        MisterPreset::Mosi => (1.0, 0.1, 1.0),
        MisterPreset::Meld => (1.0, 1e-3, 0.05),
    }
}

/// Context expert defaults: hidden 512, 3 GRU layers (2 for MELD), dropout 0.2.
pub fn preset_context(p: MisterPreset) -> ContextConfig {
    ContextConfig {
        hidden_dim: 512,
        gru_layers: if p == MisterPreset::Meld { 2 } else { 3 },
        dropout: 0.2,
        inception_kernels: vec![1, 3, 5],
    }
}

/// Fusion defaults: 4 heads, dropout 0.5.
pub fn preset_attention() -> AttentionConfig {
    AttentionConfig {
        model_dim: 120,
        heads: 4,
        dropout_rate: 0.5,
    }
}

#[derive(Clone, Debug)]
pub struct MisterSetup {
    pub mister: MisterConfig,
    pub context: ContextConfig,
    /// Heads and dropout of the fusion; `model_dim` is taken from `fusion_dim`.
    pub attention: AttentionConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub selection: SelectionMetric,
    /// `[speech, text]`.
    pub modalities: Vec<String>,
    pub input_dims: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

impl MisterSetup {
    pub fn validate(&self) -> Result<()> {
        self.context.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.mister.fusion_layers == 0 || self.mister.fusion_dim == 0 {
            return Err(Error::Config("mister.fusion_layers and mister.fusion_dim must be positive".into()));
        }
        if self.modalities.len() != 2 || self.input_dims.len() != 2 {
            return Err(Error::Config(format!(
                "mister needs exactly two modalities, got {:?}",
                self.modalities
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("mister needs at least two classes".into()));
        }
        self.fusion_attention()
            .validate()
            .map_err(|e| Error::Config(format!("mister.fusion_dim vs attention.heads: {e}")))
    }

    fn fusion_attention(&self) -> AttentionConfig {
        AttentionConfig {
            model_dim: self.mister.fusion_dim,
            ..self.attention.clone()
        }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

// ---------------------------------------------------------------- fusion

#[derive(Clone, Debug)]
pub struct FusionLayer {
    /// Queries from speech, keys/values from text.
    pub cross_speech: AttentionBlock,
    pub cross_text: AttentionBlock,
    pub self_speech: AttentionBlock,
    pub self_text: AttentionBlock,
}

#[derive(Clone, Debug)]
pub struct FusionNetwork {
    pub input_speech: Linear,
    pub input_text: Linear,
    pub layers: Vec<FusionLayer>,
    pub classifier: Linear,
}

pub struct FusionOutput {
    pub speech: Var,
    pub text: Var,
    pub logits: Var,
}

impl FusionNetwork {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize),
        num_layers: usize,
        attn: &AttentionConfig,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = attn.model_dim;
        let layers = (0..num_layers)
            .map(|l| FusionLayer {
                cross_speech: AttentionBlock::new(store, &format!("{name}.l{l}.cross_speech"), attn, rng),
                cross_text: AttentionBlock::new(store, &format!("{name}.l{l}.cross_text"), attn, rng),
                self_speech: AttentionBlock::new(store, &format!("{name}.l{l}.self_speech"), attn, rng),
                self_text: AttentionBlock::new(store, &format!("{name}.l{l}.self_text"), attn, rng),
            })
            .collect();
        Self {
            input_speech: Linear::new(store, &format!("{name}.fc_speech"), dims.0, d, rng),
            input_text: Linear::new(store, &format!("{name}.fc_text"), dims.1, d, rng),
            layers,
            classifier: Linear::new(store, &format!("{name}.fc_out"), 2 * d, num_classes, rng),
        }
    }

    /// Each layer computes `M^{t→s} = LN(S + MHA(S, T, T))` and its mirror,
    /// then self-attention on each stream. Logits come from `[M_s ; M_t]`.
    pub fn forward(&self, g: &mut Graph, speech: Var, text: Var) -> Result<FusionOutput> {
        let (ns, _) = g.shape(speech);
        let (nt, _) = g.shape(text);
        if ns != nt {
            return Err(Error::shape("fusion sequence length", ns, nt));
        }
        let mut s = self.input_speech.forward(g, speech);
        let mut t = self.input_text.forward(g, text);
        for layer in &self.layers {
            let s_cross = layer.cross_speech.forward(g, s, t, t, None)?;
            let t_cross = layer.cross_text.forward(g, t, s, s, None)?;
            s = layer.self_speech.self_attend(g, s_cross)?;
            t = layer.self_text.self_attend(g, t_cross)?;
        }
        let cat = g.concat_cols(&[s, t]);
        let logits = self.classifier.forward(g, cat);
        Ok(FusionOutput {
            speech: s,
            text: t,
            logits,
        })
    }
}

// ---------------------------------------------------------------- gate

/// `β = softmax(W [ŷ_s ; ŷ_t ; ŷ_m] + b)`, `ŷ = Σ_i β_i ŷ_i`.
#[derive(Clone, Debug)]
pub struct Gate {
    pub affine: Linear,
    pub num_classes: usize,
}

impl Gate {
    pub fn new(store: &mut ParamStore, name: &str, num_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            affine: Linear::new(store, name, 3 * num_classes, 3, rng),
            num_classes,
        }
    }

    /// Returns `(β [N x 3], fused logits [N x C])`.
    pub fn forward(&self, g: &mut Graph, experts: [Var; 3]) -> Result<(Var, Var)> {
        let shape = g.shape(experts[0]);
        for &e in &experts[1..] {
            if g.shape(e) != shape {
                return Err(Error::shape("gate expert logits", format!("{shape:?}"), format!("{:?}", g.shape(e))));
            }
        }
        if shape.1 != self.num_classes {
            return Err(Error::shape("gate expert width", self.num_classes, shape.1));
        }
        let cat = g.concat_cols(&experts);
        let scores = self.affine.forward(g, cat);
        let beta = g.softmax_rows(scores);
        let mut fused = None;
        for (i, &e) in experts.iter().enumerate() {
            let w = g.slice_cols(beta, i, 1);
            let term = g.mul_col(e, w);
            fused = Some(match fused {
                None => term,
                Some(acc) => g.add(acc, term),
            });
        }
        Ok((beta, fused.expect("three experts")))
    }
}

/// Gate evaluation outside a training graph.
pub fn gate_fuse(store: &ParamStore, gate: &Gate, experts: [&Matrix; 3]) -> Result<(Matrix, Matrix)> {
    let mut g = Graph::new(store);
    let vars = experts.map(|m| g.input(m.clone()));
    let (beta, fused) = gate.forward(&mut g, vars)?;
    Ok((g.value(beta).clone(), g.value(fused).clone()))
}

// ---------------------------------------------------------------- objective

/// Outputs of a batch, rows concatenated over its conversations.
#[derive(Clone, Debug)]
pub struct BatchOutputs {
    pub speech: Matrix,
    pub text: Matrix,
    pub multimodal: Matrix,
    pub fused: Matrix,
    /// Fusion stream embeddings `M_s`, `M_t`.
    pub m_speech: Matrix,
    pub m_text: Matrix,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ObjectiveParts {
    pub can: f64,
    pub moe_focal: f64,
    pub kl: f64,
    pub multi_focal: f64,
    pub supcon: f64,
}

#[derive(Clone, Debug)]
pub struct MisterLoss {
    pub value: f64,
    pub parts: ObjectiveParts,
    /// Gradients in the field order of [`BatchOutputs`].
    pub grads: [Matrix; 6],
}

/// Summed focal loss (per-utterance sum).
fn focal_sum(logits: &Matrix, labels: &[usize], gamma: f64, w: &ClassWeights) -> Result<(f64, Matrix)> {
    let n = labels.len() as f64;
    let l = focal_loss(logits, labels, gamma, w)?;
    Ok((l.value * n, l.grad.scale(n)))
}

/// `ΣFL(ŷ_s) + ΣFL(ŷ_t) + ΣFL(ŷ) + α[KL(p_m‖p_s) + KL(p_m‖p_t)] + ΣFL(ŷ_m) + λ·supcon([M_s; M_t])`.
///
/// The contrastive term runs over the batch with each utterance appearing once
/// per stream and excludes the anchor from its denominator. It is skipped when
/// `λ = 0` or when the batch has no positive pair.
pub fn mister_objective(out: &BatchOutputs, labels: &[usize], cfg: &LossConfig) -> Result<MisterLoss> {
    let c = out.fused.cols();
    let w = match &cfg.class_weights {
        Some(w) => ClassWeights::new(w.clone())?,
        None => ClassWeights::uniform(c),
    };
    let gamma = cfg.gamma_focal;
    let (fs, gs) = focal_sum(&out.speech, labels, gamma, &w)?;
    let (ft, gt) = focal_sum(&out.text, labels, gamma, &w)?;
    let (ff, gf) = focal_sum(&out.fused, labels, gamma, &w)?;
    let (fm, mut gm) = focal_sum(&out.multimodal, labels, gamma, &w)?;
    let mut gs = gs;
    let mut gt = gt;
    let mut kl = 0.0;
    if cfg.alpha_kl > 0.0 {
        let (v1, g_ref1, g_s) = kl_consistency_logits(&out.multimodal, &out.speech)?;
        let (v2, g_ref2, g_t) = kl_consistency_logits(&out.multimodal, &out.text)?;
        kl = v1 + v2;
        gm.add_scaled(&g_ref1.grad, cfg.alpha_kl);
        gm.add_scaled(&g_ref2.grad, cfg.alpha_kl);
        gs.add_scaled(&g_s.grad, cfg.alpha_kl);
        gt.add_scaled(&g_t.grad, cfg.alpha_kl);
    }
    let n = labels.len();
    let d = out.m_speech.cols();
    let mut g_ms = Matrix::zeros(n, d);
    let mut g_mt = Matrix::zeros(n, out.m_text.cols());
    let mut supcon = 0.0;
    if cfg.lambda_con > 0.0 {
        let emb = Matrix::concat_rows(&[&out.m_speech, &out.m_text]);
        let doubled: Vec<usize> = labels.iter().chain(labels).copied().collect();
        match supcon_loss(&emb, &doubled, cfg.tau_con, SupConVariant::ExcludeAnchor) {
            Ok(l) => {
                supcon = l.value;
                g_ms = l.grad.slice_rows(0, n).scale(cfg.lambda_con);
                g_mt = l.grad.slice_rows(n, n).scale(cfg.lambda_con);
            }
            Err(Error::NoPositives) => {}
            Err(e) => return Err(e),
        }
    }
    let parts = ObjectiveParts {
        can: fs + ft,
        moe_focal: ff,
        kl,
        multi_focal: fm,
        supcon,
    };
    Ok(MisterLoss {
        value: parts.can + parts.moe_focal + cfg.alpha_kl * kl + parts.multi_focal + cfg.lambda_con * supcon,
        parts,
        grads: [gs, gt, gm, gf, g_ms, g_mt],
    })
}

/// Monolithic objective: `ΣFL(ŷ_m) + λ·supcon([M_s; M_t])`.
fn monolithic_objective(logits: &Matrix, m_s: &Matrix, m_t: &Matrix, labels: &[usize], cfg: &LossConfig) -> Result<(f64, [Matrix; 3])> {
    let w = match &cfg.class_weights {
        Some(w) => ClassWeights::new(w.clone())?,
        None => ClassWeights::uniform(logits.cols()),
    };
    let (fm, gm) = focal_sum(logits, labels, cfg.gamma_focal, &w)?;
    let n = labels.len();
    let mut value = fm;
    let mut g_ms = Matrix::zeros(n, m_s.cols());
    let mut g_mt = Matrix::zeros(n, m_t.cols());
    if cfg.lambda_con > 0.0 {
        let emb = Matrix::concat_rows(&[m_s, m_t]);
        let doubled: Vec<usize> = labels.iter().chain(labels).copied().collect();
        match supcon_loss(&emb, &doubled, cfg.tau_con, SupConVariant::ExcludeAnchor) {
            Ok(l) => {
                value += cfg.lambda_con * l.value;
                g_ms = l.grad.slice_rows(0, n).scale(cfg.lambda_con);
                g_mt = l.grad.slice_rows(n, n).scale(cfg.lambda_con);
            }
            Err(Error::NoPositives) => {}
            Err(e) => return Err(e),
        }
    }
    Ok((value, [gm, g_ms, g_mt]))
}

// ---------------------------------------------------------------- model

#[derive(Clone, Debug)]
pub struct Experts {
    pub speech: ContextAdditionNetwork,
    pub text: ContextAdditionNetwork,
    pub gate: Gate,
}

#[derive(Clone, Debug)]
pub struct MisterArch {
    /// `None` for the monolithic ablation.
    pub experts: Option<Experts>,
    pub fusion: FusionNetwork,
}

/// Graph nodes of one conversation's forward pass.
pub struct ConversationVars {
    pub speech: Option<Var>,
    pub text: Option<Var>,
    pub multimodal: Var,
    pub fused: Var,
    pub gate: Option<Var>,
    pub m_speech: Var,
    pub m_text: Var,
}

impl MisterArch {
    pub fn new(store: &mut ParamStore, setup: &MisterSetup, rng: &mut ChaCha8Rng) -> Result<Self> {
        setup.validate()?;
        let c = setup.num_classes;
        let attn = setup.fusion_attention();
        if setup.mister.monolithic {
            let fusion = FusionNetwork::new(
                store,
                "fusion",
                (setup.input_dims[0], setup.input_dims[1]),
                setup.mister.fusion_layers,
                &attn,
                c,
                rng,
            );
            return Ok(Self { experts: None, fusion });
        }
        let speech = ContextAdditionNetwork::new(store, "can_speech", setup.input_dims[0], c, &setup.context, rng)?;
        let text = ContextAdditionNetwork::new(store, "can_text", setup.input_dims[1], c, &setup.context, rng)?;
        let width = 2 * setup.context.hidden_dim;
        let fusion = FusionNetwork::new(store, "fusion", (width, width), setup.mister.fusion_layers, &attn, c, rng);
        let gate = Gate::new(store, "gate", c, rng);
        Ok(Self {
            experts: Some(Experts { speech, text, gate }),
            fusion,
        })
    }

    /// `speech`, `text`: utterance vectors `[N x D]` of one conversation.
    pub fn forward(&self, g: &mut Graph, speech: Var, text: Var) -> Result<ConversationVars> {
        match &self.experts {
            None => {
                let f = self.fusion.forward(g, speech, text)?;
                Ok(ConversationVars {
                    speech: None,
                    text: None,
                    multimodal: f.logits,
                    fused: f.logits,
                    gate: None,
                    m_speech: f.speech,
                    m_text: f.text,
                })
            }
            Some(ex) => {
                let s = ex.speech.forward(g, speech)?;
                let t = ex.text.forward(g, text)?;
                let f = self.fusion.forward(g, s.hidden, t.hidden)?;
                let (beta, fused) = ex.gate.forward(g, [s.logits, t.logits, f.logits])?;
                Ok(ConversationVars {
                    speech: Some(s.logits),
                    text: Some(t.logits),
                    multimodal: f.logits,
                    fused,
                    gate: Some(beta),
                    m_speech: f.speech,
                    m_text: f.text,
                })
            }
        }
    }
}

pub struct MisterModel {
    pub setup: MisterSetup,
    pub store: ParamStore,
    pub arch: MisterArch,
}

impl MisterModel {
    /// Fresh parameters drawn from the setup's seed.
    pub fn init(setup: &MisterSetup) -> Result<Self> {
        let mut store = ParamStore::new();
        let arch = MisterArch::new(&mut store, setup, &mut setup.rng(40))?;
        Ok(Self {
            setup: setup.clone(),
            store,
            arch,
        })
    }
}

/// Utterance vectors `[speech, text]` of a conversation: frame means.
pub fn conversation_inputs(setup: &MisterSetup, conv: &LoadedConversation) -> Result<[Matrix; 2]> {
    let s = conv.pooled(&setup.modalities[0])?;
    let t = conv.pooled(&setup.modalities[1])?;
    for (m, x) in [&s, &t].into_iter().enumerate() {
        if x.cols() != setup.input_dims[m] {
            return Err(Error::shape("mister feature width", setup.input_dims[m], x.cols()));
        }
    }
    Ok([s, t])
}

/// Per-utterance outputs of one conversation.
#[derive(Clone, Debug, PartialEq)]
pub struct MisterPrediction {
    pub conv_id: String,
    pub utt_ids: Vec<String>,
    pub labels: Vec<usize>,
    /// `[N x 3]` gate weights `(β_s, β_t, β_m)`; `(0, 0, 1)` for the monolithic model.
    pub gate: Matrix,
    pub fused: Matrix,
    /// Expert logits; `None` for the monolithic model.
    pub speech: Option<Matrix>,
    pub text: Option<Matrix>,
    pub multimodal: Matrix,
}

fn predict_one(model: &MisterModel, inputs: &[Matrix; 2], conv: &LoadedConversation) -> Result<MisterPrediction> {
    let mut g = Graph::new(&model.store);
    let s = g.input(inputs[0].clone());
    let t = g.input(inputs[1].clone());
    let v = model.arch.forward(&mut g, s, t)?;
    let fused = g.value(v.fused).clone();
    let gate = match v.gate {
        Some(b) => g.value(b).clone(),
        None => {
            let mut m = Matrix::zeros(fused.rows(), 3);
            for r in 0..m.rows() {
                m[(r, 2)] = 1.0;
            }
            m
        }
    };
    Ok(MisterPrediction {
        conv_id: conv.conv_id.clone(),
        utt_ids: conv.utt_ids.clone(),
        labels: fused.argmax_rows(),
        gate,
        speech: v.speech.map(|x| g.value(x).clone()),
        text: v.text.map(|x| g.value(x).clone()),
        multimodal: g.value(v.multimodal).clone(),
        fused,
    })
}

/// Argmax of the fused logits (equivalently of their softmax) with gate weights.
pub fn mister_predict(model: &MisterModel, convs: &[LoadedConversation]) -> Result<Vec<MisterPrediction>> {
    convs
        .iter()
        .map(|c| predict_one(model, &conversation_inputs(&model.setup, c)?, c))
        .collect()
}

/// Reports for the fused prediction and each expert on its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertReports {
    pub fused: MetricReport,
    pub speech: Option<MetricReport>,
    pub text: Option<MetricReport>,
    pub multimodal: MetricReport,
    /// Mean `(β_s, β_t, β_m)` over all utterances.
    pub mean_gate: [f64; 3],
}

pub fn expert_reports(preds: &[MisterPrediction], convs: &[LoadedConversation], num_classes: usize) -> Result<ExpertReports> {
    let mut gold = Vec::new();
    for c in convs {
        gold.extend(c.gold()?);
    }
    let collect = |f: &dyn Fn(&MisterPrediction) -> Option<&Matrix>| -> Result<Option<MetricReport>> {
        let mut pred = Vec::new();
        for p in preds {
            match f(p) {
                Some(m) => pred.extend(m.argmax_rows()),
                None => return Ok(None),
            }
        }
        classification_report(&gold, &pred, num_classes).map(Some)
    };
    let mut gate_sum = [0.0; 3];
    let mut n = 0usize;
    for p in preds {
        for r in 0..p.gate.rows() {
            for (k, s) in gate_sum.iter_mut().enumerate() {
                *s += p.gate[(r, k)];
            }
            n += 1;
        }
    }
    Ok(ExpertReports {
        fused: collect(&|p| Some(&p.fused))?.expect("fused logits"),
        speech: collect(&|p| p.speech.as_ref())?,
        text: collect(&|p| p.text.as_ref())?,
        multimodal: collect(&|p| Some(&p.multimodal))?.expect("multimodal logits"),
        mean_gate: gate_sum.map(|s| s / n.max(1) as f64),
    })
}

/// Joint single-phase training; `model` ends at the best validation epoch.
pub fn mister_train(model: &mut MisterModel, train: &[LoadedConversation], val: &[LoadedConversation]) -> Result<FitResult> {
    crate::training::require_labels(train, "train")?;
    crate::training::require_labels(val, "val")?;
    let setup = model.setup.clone();
    let train_x = train
        .iter()
        .map(|c| conversation_inputs(&setup, c))
        .collect::<Result<Vec<_>>>()?;
    let val_x = val
        .iter()
        .map(|c| conversation_inputs(&setup, c))
        .collect::<Result<Vec<_>>>()?;
    let train_y = train.iter().map(|c| c.gold()).collect::<Result<Vec<_>>>()?;
    let arch = model.arch.clone();
    let mut rng = setup.rng(41);
    fit(
        &mut model.store,
        &setup.optimizer,
        setup.selection,
        &mut rng,
        train.len(),
        |store, batch, drng, grads: &mut GradStore| {
            let mut g = Graph::training(store, drng);
            let mut outs = Vec::with_capacity(batch.len());
            let mut labels = Vec::new();
            for &i in batch {
                let s = g.input(train_x[i][0].clone());
                let t = g.input(train_x[i][1].clone());
                outs.push(arch.forward(&mut g, s, t)?);
                labels.extend_from_slice(&train_y[i]);
            }
            let cat = |g: &mut Graph, f: &dyn Fn(&ConversationVars) -> Var| {
                let vs: Vec<Var> = outs.iter().map(f).collect();
                g.concat_rows(&vs)
            };
            let loss = if arch.experts.is_some() {
                let vars = [
                    cat(&mut g, &|o| o.speech.expect("expert")),
                    cat(&mut g, &|o| o.text.expect("expert")),
                    cat(&mut g, &|o| o.multimodal),
                    cat(&mut g, &|o| o.fused),
                    cat(&mut g, &|o| o.m_speech),
                    cat(&mut g, &|o| o.m_text),
                ];
                let values = BatchOutputs {
                    speech: g.value(vars[0]).clone(),
                    text: g.value(vars[1]).clone(),
                    multimodal: g.value(vars[2]).clone(),
                    fused: g.value(vars[3]).clone(),
                    m_speech: g.value(vars[4]).clone(),
                    m_text: g.value(vars[5]).clone(),
                };
                let l = mister_objective(&values, &labels, &setup.loss)?;
                let local = vars.into_iter().zip(l.grads).collect();
                (g.custom_scalar(l.value, local), l.value)
            } else {
                let vars = [
                    cat(&mut g, &|o| o.multimodal),
                    cat(&mut g, &|o| o.m_speech),
                    cat(&mut g, &|o| o.m_text),
                ];
                let (value, grads3) =
                    monolithic_objective(g.value(vars[0]), g.value(vars[1]), g.value(vars[2]), &labels, &setup.loss)?;
                let local = vars.into_iter().zip(grads3).collect();
                (g.custom_scalar(value, local), value)
            };
            let back = g.backward(loss.0);
            g.accumulate_param_grads(&back, grads);
            Ok(loss.1)
        },
        |store| {
            let mut gold = Vec::new();
            let mut pred = Vec::new();
            for (c, x) in val.iter().zip(&val_x) {
                let mut g = Graph::new(store);
                let s = g.input(x[0].clone());
                let t = g.input(x[1].clone());
                let v = arch.forward(&mut g, s, t)?;
                pred.extend(g.value(v.fused).argmax_rows());
                gold.extend(c.gold()?);
            }
            classification_report(&gold, &pred, setup.num_classes)
        },
    )
}

/// Softmax of fused logits, for analysis output.
pub fn fused_probabilities(p: &MisterPrediction) -> Matrix {
    softmax_rows(&p.fused)
}

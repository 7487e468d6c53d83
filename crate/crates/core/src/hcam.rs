//! Hierarchical cross-attention model (HCAM), trained in three frozen stages.
//!
//! 1. Per modality, a context-free classifier over pooled utterance features.
//!    Its penultimate activation is cached to disk as the utterance embedding.
//! 2. Per modality, a contextual GRU over the cached embeddings of a
//!    conversation.
//! 3. Co-attention fusion of the two stage-II sequences.
//!
//! Every stage reads the previous stage's artifacts from the run directory and
//! never updates them. With `merge_stages` the contextual GRUs and the fusion
//! are trained jointly as one stage on top of stage I.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentiveStatsPool, CoAttention};
use crate::autograd::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::context::{ContextConfig, ContextualGru};
use crate::datamodel::{load_feature_matrix, save_feature_matrix, FeatureMatrix};
use crate::error::{Error, Result};
use crate::losses::{supcon_loss, weighted_cross_entropy, ClassWeights, LossConfig, SupConVariant};
use crate::metrics::{classification_report, MetricReport, SelectionMetric};
use crate::nn::{Linear, MlpHead};
use crate::optim::OptimizerConfig;
use crate::params::{GradStore, ParamStore};
use crate::tensor::Matrix;
use crate::training::{fit, LoadedConversation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over frames.
    Mean,
    /// Attention-weighted mean and standard deviation over frames.
    AttentiveStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HcamConfig {
    /// Width of the stage-I embedding.
    pub stage1_hidden: usize,
    pub pooling: Pooling,
    /// Width each modality is projected to before fusion.
    pub fusion_dim: usize,
    /// Train the contextual GRUs jointly with the fusion instead of separately.
    #[serde(default)]
    pub merge_stages: bool,
}

impl HcamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_hidden == 0 || self.fusion_dim == 0 {
            return Err(Error::Config("hcam.stage1_hidden and hcam.fusion_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a stage needs besides the data.
#[derive(Clone, Debug)]
pub struct HcamSetup {
    pub hcam: HcamConfig,
    pub context: ContextConfig,
    /// Heads and dropout for both the stage-II self-attention and the fusion;
    /// `model_dim` is ignored in favour of the stage widths.
    pub attention: AttentionConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub selection: SelectionMetric,
    /// Exactly two; the first is the speech arm of the fusion.
    pub modalities: Vec<String>,
    pub input_dims: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

impl HcamSetup {
    pub fn validate(&self) -> Result<()> {
        self.hcam.validate()?;
        self.context.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.loss.beta_hcam.is_none() {
            return Err(Error::Config("loss.beta_hcam is required for the hcam pipeline".into()));
        }
        if self.modalities.len() != 2 || self.input_dims.len() != 2 {
            return Err(Error::Config(format!(
                "hcam needs exactly two modalities, got {:?}",
                self.modalities
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("hcam needs at least two classes".into()));
        }
        AttentionConfig::new(self.context.hidden_dim, self.attention.heads, self.attention.dropout_rate)
            .map_err(|e| Error::Config(format!("context.hidden_dim vs attention.heads: {e}")))?;
        AttentionConfig::new(self.hcam.fusion_dim, self.attention.heads, self.attention.dropout_rate)
            .map_err(|e| Error::Config(format!("hcam.fusion_dim vs attention.heads: {e}")))?;
        Ok(())
    }

    fn attention_cfg(&self, dim: usize) -> AttentionConfig {
        AttentionConfig {
            model_dim: dim,
            ..self.attention.clone()
        }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// `β · CE + (1 − β) · supcon` and its gradients.
#[derive(Clone, Debug)]
pub struct HcamLoss {
    pub value: f64,
    pub cross_entropy: f64,
    pub supcon: Option<f64>,
    pub grad_logits: Matrix,
    /// `None` when the contrastive term is skipped (β = 1).
    pub grad_embeddings: Option<Matrix>,
}

/// Combined objective. The contrastive term counts the anchor in its own
/// denominator. Errors from either constituent are propagated.
pub fn hcam_loss(logits: &Matrix, embeddings: &Matrix, labels: &[usize], cfg: &LossConfig) -> Result<HcamLoss> {
    let beta = cfg
        .beta_hcam
        .ok_or_else(|| Error::Config("loss.beta_hcam is required for the hcam pipeline".into()))?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("beta_hcam must lie in [0, 1], got {beta}")));
    }
    let weights = match &cfg.class_weights {
        Some(w) => ClassWeights::new(w.clone())?,
        None => ClassWeights::uniform(logits.cols()),
    };
    let ce = weighted_cross_entropy(logits, labels, &weights)?;
    let mut value = beta * ce.value;
    let grad_logits = ce.grad.scale(beta);
    let (supcon, grad_embeddings) = if beta < 1.0 {
        let sc = supcon_loss(embeddings, labels, cfg.tau_con, SupConVariant::IncludeAnchor)?;
        value += (1.0 - beta) * sc.value;
        (Some(sc.value), Some(sc.grad.scale(1.0 - beta)))
    } else {
        (None, None)
    };
    Ok(HcamLoss {
        value,
        cross_entropy: ce.value,
        supcon,
        grad_logits,
        grad_embeddings,
    })
}

/// Attaches the objective to a graph. A training batch whose labels admit no
/// positive pair falls back to the cross-entropy share alone.
fn attach_hcam_loss(g: &mut Graph, logits: Var, embeddings: Var, labels: &[usize], cfg: &LossConfig) -> Result<(Var, f64)> {
    let result = hcam_loss(g.value(logits), g.value(embeddings), labels, cfg);
    let loss = match result {
        Err(Error::NoPositives) => {
            let mut only_ce = cfg.clone();
            only_ce.beta_hcam = Some(1.0);
            let l = hcam_loss(g.value(logits), g.value(embeddings), labels, &only_ce)?;
            let beta = cfg.beta_hcam.unwrap_or(1.0);
            HcamLoss {
                value: beta * l.value,
                grad_logits: l.grad_logits.scale(beta),
                ..l
            }
        }
        other => other?,
    };
    let mut local = vec![(logits, loss.grad_logits)];
    if let Some(ge) = loss.grad_embeddings {
        local.push((embeddings, ge));
    }
    Ok((g.custom_scalar(loss.value, local), loss.value))
}

// ---------------------------------------------------------------- models

#[derive(Clone, Debug)]
pub struct Stage1Model {
    pub pool: Option<AttentiveStatsPool>,
    pub head: MlpHead,
    pub in_dim: usize,
}

impl Stage1Model {
    pub fn new(store: &mut ParamStore, setup: &HcamSetup, m: usize, rng: &mut ChaCha8Rng) -> Self {
        let name = format!("stage1.{}", setup.modalities[m]);
        let d = setup.input_dims[m];
        let h = setup.hcam.stage1_hidden;
        let (pool, head_in) = match setup.hcam.pooling {
            Pooling::Mean => (None, d),
            Pooling::AttentiveStats => (Some(AttentiveStatsPool::new(store, &format!("{name}.pool"), d, h, rng)), 2 * d),
        };
        let head = MlpHead::new(store, &format!("{name}.head"), head_in, h, setup.num_classes, setup.context.dropout, rng);
        Self { pool, head, in_dim: d }
    }

    /// Pooled utterance rows `[B x D']` for a list of frame matrices.
    fn pooled(&self, g: &mut Graph, utts: &[&Matrix]) -> Result<Var> {
        for u in utts {
            if u.cols() != self.in_dim {
                return Err(Error::shape("stage-I feature width", self.in_dim, u.cols()));
            }
        }
        let rows = match &self.pool {
            None => {
                let means: Vec<Matrix> = utts.iter().map(|u| u.mean_rows()).collect();
                let refs: Vec<&Matrix> = means.iter().collect();
                return Ok(g.input(Matrix::concat_rows(&refs)));
            }
            Some(pool) => utts
                .iter()
                .map(|u| {
                    let x = g.input((*u).clone());
                    pool.forward(g, x)
                })
                .collect::<Result<Vec<Var>>>()?,
        };
        Ok(g.concat_rows(&rows))
    }

    /// `(embeddings, logits)` for a batch of utterances.
    pub fn forward(&self, g: &mut Graph, utts: &[&Matrix]) -> Result<(Var, Var)> {
        let x = self.pooled(g, utts)?;
        Ok(self.head.forward(g, x))
    }

    /// Embeddings of one conversation, rounded to the cache precision.
    pub fn embed(&self, store: &ParamStore, utts: &[Matrix]) -> Result<Matrix> {
        let mut g = Graph::new(store);
        let refs: Vec<&Matrix> = utts.iter().collect();
        let (h, _) = self.forward(&mut g, &refs)?;
        Ok(FeatureMatrix::from_matrix(g.value(h))?.to_matrix())
    }
}

#[derive(Clone, Debug)]
pub struct Stage2Model {
    pub context: ContextualGru,
    pub classifier: Linear,
}

impl Stage2Model {
    pub fn new(store: &mut ParamStore, setup: &HcamSetup, m: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let name = format!("stage2.{}", setup.modalities[m]);
        let context = ContextualGru::new(
            store,
            &format!("{name}.context"),
            setup.hcam.stage1_hidden,
            &setup.context,
            setup.attention.heads,
            rng,
        )?;
        let classifier = Linear::new(store, &format!("{name}.fc"), context.out_dim(), setup.num_classes, rng);
        Ok(Self { context, classifier })
    }

    /// `(contextual sequence, logits)` of one conversation.
    pub fn forward(&self, g: &mut Graph, embeddings: Var) -> Result<(Var, Var)> {
        let h = self.context.forward(g, embeddings)?;
        let logits = self.classifier.forward(g, h);
        Ok((h, logits))
    }
}

#[derive(Clone, Debug)]
pub struct Stage3Model {
    /// Present only when stages II and III are trained jointly.
    pub contexts: Option<Vec<ContextualGru>>,
    pub projections: Vec<Linear>,
    pub fusion: CoAttention,
    pub classifier: Linear,
}

impl Stage3Model {
    pub fn new(store: &mut ParamStore, setup: &HcamSetup, rng: &mut ChaCha8Rng) -> Result<Self> {
        let contexts = if setup.hcam.merge_stages {
            Some(
                (0..2)
                    .map(|m| {
                        ContextualGru::new(
                            store,
                            &format!("stage3.context.{}", setup.modalities[m]),
                            setup.hcam.stage1_hidden,
                            &setup.context,
                            setup.attention.heads,
                            rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let d = setup.hcam.fusion_dim;
        let projections = (0..2)
            .map(|m| Linear::new(store, &format!("stage3.proj.{}", setup.modalities[m]), setup.context.hidden_dim, d, rng))
            .collect();
        let fusion = CoAttention::new(store, "stage3.fusion", &setup.attention_cfg(d), 2 * d, rng);
        let classifier = Linear::new(store, "stage3.fc", 2 * d, setup.num_classes, rng);
        Ok(Self {
            contexts,
            projections,
            fusion,
            classifier,
        })
    }

    /// `(fused sequence, logits)` from the two stage-II sequences, or from the
    /// two stage-I sequences when the contexts are part of this stage.
    pub fn forward(&self, g: &mut Graph, speech: Var, text: Var) -> Result<(Var, Var)> {
        let (s, t) = match &self.contexts {
            Some(ctx) => (ctx[0].forward(g, speech)?, ctx[1].forward(g, text)?),
            None => (speech, text),
        };
        let s = self.projections[0].forward(g, s);
        let t = self.projections[1].forward(g, t);
        let fused = self.fusion.forward(g, s, t)?.output;
        let logits = self.classifier.forward(g, fused);
        Ok((fused, logits))
    }
}

// ---------------------------------------------------------------- artifacts

/// Summary of one trained stage (one entry per modality for stages I and II).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageArtifacts {
    pub stage: u8,
    pub modality: Option<String>,
    pub params_path: String,
    pub best_epoch: usize,
    pub validation: MetricReport,
    pub param_checksum: String,
}

pub fn stage_dir(run: &Path, stage: u8) -> PathBuf {
    run.join(format!("stage{stage}"))
}

pub fn params_path(run: &Path, stage: u8) -> PathBuf {
    stage_dir(run, stage).join("params.bin")
}

pub fn cache_path(run: &Path, modality: &str, conv_id: &str) -> PathBuf {
    stage_dir(run, 1).join("cache").join(modality).join(format!("{conv_id}.emf"))
}

fn load_stage(run: &Path, stage: u8, store: &mut ParamStore) -> Result<()> {
    let path = params_path(run, stage);
    if !path.exists() {
        return Err(Error::Pipeline(format!(
            "stage {stage} artifacts not found at {}; train stage {stage} first",
            path.display()
        )));
    }
    Checkpoint::load(&path)?.restore(store)
}

/// A fully trained HCAM model rebuilt from a run directory.
pub struct HcamModel {
    pub setup: HcamSetup,
    pub stage1: Vec<(ParamStore, Stage1Model)>,
    pub stage2: Option<Vec<(ParamStore, Stage2Model)>>,
    pub stage3: (ParamStore, Stage3Model),
}

fn build_stage1(setup: &HcamSetup) -> Vec<(ParamStore, Stage1Model)> {
    (0..2)
        .map(|m| {
            let mut store = ParamStore::new();
            let model = Stage1Model::new(&mut store, setup, m, &mut setup.rng(10 + m as u64));
            (store, model)
        })
        .collect()
}

fn build_stage2(setup: &HcamSetup) -> Result<Vec<(ParamStore, Stage2Model)>> {
    (0..2)
        .map(|m| {
            let mut store = ParamStore::new();
            let model = Stage2Model::new(&mut store, setup, m, &mut setup.rng(20 + m as u64))?;
            Ok((store, model))
        })
        .collect()
}

fn build_stage3(setup: &HcamSetup) -> Result<(ParamStore, Stage3Model)> {
    let mut store = ParamStore::new();
    let model = Stage3Model::new(&mut store, setup, &mut setup.rng(30))?;
    Ok((store, model))
}

impl HcamModel {
    /// Loads every stage; fails if any is missing.
    pub fn load(run: &Path, setup: &HcamSetup) -> Result<Self> {
        setup.validate()?;
        let mut stage1 = build_stage1(setup);
        for (store, _) in &mut stage1 {
            load_stage(run, 1, store)?;
        }
        let stage2 = if setup.hcam.merge_stages {
            None
        } else {
            let mut s2 = build_stage2(setup)?;
            for (store, _) in &mut s2 {
                load_stage(run, 2, store)?;
            }
            Some(s2)
        };
        let mut stage3 = build_stage3(setup)?;
        load_stage(run, 3, &mut stage3.0)?;
        Ok(Self {
            setup: setup.clone(),
            stage1,
            stage2,
            stage3,
        })
    }

    /// Stage-III logits `[N x C]` for one conversation.
    pub fn logits(&self, conv: &LoadedConversation) -> Result<Matrix> {
        let mut inputs = Vec::with_capacity(2);
        for (m, (store, model)) in self.stage1.iter().enumerate() {
            let e = model.embed(store, conv.modality(&self.setup.modalities[m])?)?;
            inputs.push(match &self.stage2 {
                Some(s2) => stage2_sequence(&s2[m].0, &s2[m].1, &e)?,
                None => e,
            });
        }
        let (store, model) = &self.stage3;
        let mut g = Graph::new(store);
        let s = g.input(inputs[0].clone());
        let t = g.input(inputs[1].clone());
        let (_, logits) = model.forward(&mut g, s, t)?;
        Ok(g.value(logits).clone())
    }
}

/// Per-utterance predictions of one conversation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConversationPrediction {
    pub conv_id: String,
    pub utt_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub logits: Matrix,
}

/// Argmax over stage-III logits; ties resolve to the lowest class index.
pub fn hcam_predict(model: &HcamModel, convs: &[LoadedConversation]) -> Result<Vec<ConversationPrediction>> {
    convs
        .iter()
        .map(|c| {
            let logits = model.logits(c)?;
            Ok(ConversationPrediction {
                conv_id: c.conv_id.clone(),
                utt_ids: c.utt_ids.clone(),
                labels: logits.argmax_rows(),
                logits,
            })
        })
        .collect()
}

fn stage2_sequence(store: &ParamStore, model: &Stage2Model, embeddings: &Matrix) -> Result<Matrix> {
    let mut g = Graph::new(store);
    let x = g.input(embeddings.clone());
    let (h, _) = model.forward(&mut g, x)?;
    Ok(g.value(h).clone())
}

// ---------------------------------------------------------------- training

/// The labeled splits a stage trains and selects on.
pub struct HcamData<'a> {
    pub train: &'a [LoadedConversation],
    pub val: &'a [LoadedConversation],
    /// Further conversations whose stage-I embeddings are cached (e.g. test).
    pub extra: &'a [LoadedConversation],
}

fn report_over(convs: &[LoadedConversation], num_classes: usize, mut logits: impl FnMut(usize) -> Result<Matrix>) -> Result<MetricReport> {
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    for (i, c) in convs.iter().enumerate() {
        gold.extend(c.gold()?);
        pred.extend(logits(i)?.argmax_rows());
    }
    classification_report(&gold, &pred, num_classes)
}

fn batch_gold(convs: &[LoadedConversation], batch: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for &i in batch {
        out.extend(convs[i].gold()?);
    }
    Ok(out)
}

fn save_stage(run: &Path, stage: u8, setup: &HcamSetup, stores: &[&ParamStore], reports: &[(Option<String>, usize, MetricReport)]) -> Result<Vec<StageArtifacts>> {
    let meta = serde_json::json!({
        "pipeline": "hcam",
        "stage": stage,
        "seed": setup.seed,
        "modalities": setup.modalities,
        "epochs": reports.iter().map(|r| r.1).collect::<Vec<_>>(),
    });
    let path = params_path(run, stage);
    Checkpoint::from_stores(meta, stores)?.save(&path)?;
    Ok(reports
        .iter()
        .zip(stores)
        .map(|((modality, epoch, report), store)| StageArtifacts {
            stage,
            modality: modality.clone(),
            params_path: format!("stage{stage}/params.bin"),
            best_epoch: *epoch,
            validation: report.clone(),
            param_checksum: store.checksum(),
        })
        .collect())
}

/// Stage I: context-free classifiers and the embedding cache.
pub fn train_stage1(run: &Path, setup: &HcamSetup, data: &HcamData) -> Result<Vec<StageArtifacts>> {
    setup.validate()?;
    let mut trained = build_stage1(setup);
    let mut reports = Vec::new();
    for (m, (store, model)) in trained.iter_mut().enumerate() {
        let modality = &setup.modalities[m];
        let mut items: Vec<(&Matrix, usize)> = Vec::new();
        for c in data.train {
            for (x, y) in c.modality(modality)?.iter().zip(c.gold()?) {
                items.push((x, y));
            }
        }
        let mut rng = setup.rng(110 + m as u64);
        let model = &*model;
        let result = fit(
            store,
            &setup.optimizer,
            setup.selection,
            &mut rng,
            items.len(),
            |store, batch, drng, grads: &mut GradStore| {
                let mut g = Graph::training(store, drng);
                let utts: Vec<&Matrix> = batch.iter().map(|&i| items[i].0).collect();
                let labels: Vec<usize> = batch.iter().map(|&i| items[i].1).collect();
                let (h, logits) = model.forward(&mut g, &utts)?;
                let (loss, value) = attach_hcam_loss(&mut g, logits, h, &labels, &setup.loss)?;
                let back = g.backward(loss);
                g.accumulate_param_grads(&back, grads);
                Ok(value)
            },
            |store| {
                report_over(data.val, setup.num_classes, |i| {
                    let mut g = Graph::new(store);
                    let refs: Vec<&Matrix> = data.val[i].modality(modality)?.iter().collect();
                    let (_, logits) = model.forward(&mut g, &refs)?;
                    Ok(g.value(logits).clone())
                })
            },
        )?;
        for c in data.train.iter().chain(data.val).chain(data.extra) {
            let e = model.embed(store, c.modality(modality)?)?;
            save_feature_matrix(cache_path(run, modality, &c.conv_id), &FeatureMatrix::from_matrix(&e)?)?;
        }
        reports.push((Some(modality.clone()), result.best_epoch, result.best_report));
    }
    let stores: Vec<&ParamStore> = trained.iter().map(|(s, _)| s).collect();
    save_stage(run, 1, setup, &stores, &reports)
}

/// Cached stage-I embeddings of `convs` for modality `m`.
fn load_cache(run: &Path, setup: &HcamSetup, convs: &[LoadedConversation], m: usize) -> Result<Vec<Matrix>> {
    if !params_path(run, 1).exists() {
        return Err(Error::Pipeline(format!(
            "stage 1 artifacts not found in {}; train stage 1 first",
            run.display()
        )));
    }
    convs
        .iter()
        .map(|c| {
            let e = load_feature_matrix(cache_path(run, &setup.modalities[m], &c.conv_id))?.to_matrix();
            if e.rows() != c.len() {
                return Err(Error::Pipeline(format!(
                    "cached embeddings of {} have {} rows, conversation has {}",
                    c.conv_id,
                    e.rows(),
                    c.len()
                )));
            }
            Ok(e)
        })
        .collect()
}

/// Stage II: one contextual GRU per modality over the cached embeddings.
pub fn train_stage2(run: &Path, setup: &HcamSetup, data: &HcamData) -> Result<Vec<StageArtifacts>> {
    setup.validate()?;
    if setup.hcam.merge_stages {
        return Err(Error::Pipeline("stage 2 is folded into stage 3 when merge_stages is set".into()));
    }
    let mut trained = build_stage2(setup)?;
    let mut reports = Vec::new();
    for (m, (store, model)) in trained.iter_mut().enumerate() {
        let train_x = load_cache(run, setup, data.train, m)?;
        let val_x = load_cache(run, setup, data.val, m)?;
        let mut rng = setup.rng(120 + m as u64);
        let model = &*model;
        let result = fit(
            store,
            &setup.optimizer,
            setup.selection,
            &mut rng,
            data.train.len(),
            |store, batch, drng, grads: &mut GradStore| {
                let mut g = Graph::training(store, drng);
                let mut hs = Vec::new();
                let mut ls = Vec::new();
                for &i in batch {
                    let x = g.input(train_x[i].clone());
                    let (h, l) = model.forward(&mut g, x)?;
                    hs.push(h);
                    ls.push(l);
                }
                let h = g.concat_rows(&hs);
                let logits = g.concat_rows(&ls);
                let labels = batch_gold(data.train, batch)?;
                let (loss, value) = attach_hcam_loss(&mut g, logits, h, &labels, &setup.loss)?;
                let back = g.backward(loss);
                g.accumulate_param_grads(&back, grads);
                Ok(value)
            },
            |store| {
                report_over(data.val, setup.num_classes, |i| {
                    let mut g = Graph::new(store);
                    let x = g.input(val_x[i].clone());
                    let (_, logits) = model.forward(&mut g, x)?;
                    Ok(g.value(logits).clone())
                })
            },
        )?;
        reports.push((Some(setup.modalities[m].clone()), result.best_epoch, result.best_report));
    }
    let stores: Vec<&ParamStore> = trained.iter().map(|(s, _)| s).collect();
    save_stage(run, 2, setup, &stores, &reports)
}

/// Stage III: co-attention fusion over frozen stage-II sequences (or, with
/// `merge_stages`, joint contexts and fusion over the stage-I cache).
pub fn train_stage3(run: &Path, setup: &HcamSetup, data: &HcamData) -> Result<Vec<StageArtifacts>> {
    setup.validate()?;
    let inputs = |convs: &[LoadedConversation]| -> Result<Vec<[Matrix; 2]>> {
        let cached = [load_cache(run, setup, convs, 0)?, load_cache(run, setup, convs, 1)?];
        let per_modality: Vec<Vec<Matrix>> = if setup.hcam.merge_stages {
            cached.to_vec()
        } else {
            let mut s2 = build_stage2(setup)?;
            for (store, _) in &mut s2 {
                load_stage(run, 2, store)?;
            }
            (0..2)
                .map(|m| {
                    cached[m]
                        .iter()
                        .map(|e| stage2_sequence(&s2[m].0, &s2[m].1, e))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?
        };
        Ok((0..convs.len())
            .map(|i| [per_modality[0][i].clone(), per_modality[1][i].clone()])
            .collect())
    };
    let train_x = inputs(data.train)?;
    let val_x = inputs(data.val)?;
    let (mut store, model) = build_stage3(setup)?;
    let mut rng = setup.rng(130);
    let result = fit(
        &mut store,
        &setup.optimizer,
        setup.selection,
        &mut rng,
        data.train.len(),
        |store, batch, drng, grads: &mut GradStore| {
            let mut g = Graph::training(store, drng);
            let mut hs = Vec::new();
            let mut ls = Vec::new();
            for &i in batch {
                let s = g.input(train_x[i][0].clone());
                let t = g.input(train_x[i][1].clone());
                let (h, l) = model.forward(&mut g, s, t)?;
                hs.push(h);
                ls.push(l);
            }
            let h = g.concat_rows(&hs);
            let logits = g.concat_rows(&ls);
            let labels = batch_gold(data.train, batch)?;
            let (loss, value) = attach_hcam_loss(&mut g, logits, h, &labels, &setup.loss)?;
            let back = g.backward(loss);
            g.accumulate_param_grads(&back, grads);
            Ok(value)
        },
        |store| {
            report_over(data.val, setup.num_classes, |i| {
                let mut g = Graph::new(store);
                let s = g.input(val_x[i][0].clone());
                let t = g.input(val_x[i][1].clone());
                let (_, logits) = model.forward(&mut g, s, t)?;
                Ok(g.value(logits).clone())
            })
        },
    )?;
    save_stage(run, 3, setup, &[&store], &[(None, result.best_epoch, result.best_report)])
}

/// Runs one stage against the artifacts already in `run`.
pub fn hcam_run_stage(stage: u8, run: &Path, setup: &HcamSetup, data: &HcamData) -> Result<Vec<StageArtifacts>> {
    match stage {
        1 => train_stage1(run, setup, data),
        2 => {
            load_stage(run, 1, &mut build_stage1(setup).swap_remove(0).0)?;
            train_stage2(run, setup, data)
        }
        3 => {
            if !setup.hcam.merge_stages {
                let mut s2 = build_stage2(setup)?;
                load_stage(run, 2, &mut s2[0].0)?;
            }
            train_stage3(run, setup, data)
        }
        other => Err(Error::InvalidArgument(format!("HCAM has stages 1 to 3, got {other}"))),
    }
}

/// All stages in order. Returns the per-stage summaries.
pub fn hcam_train(run: &Path, setup: &HcamSetup, data: &HcamData) -> Result<Vec<StageArtifacts>> {
    crate::training::require_labels(data.train, "train")?;
    crate::training::require_labels(data.val, "val")?;
    for c in data.train.iter().chain(data.val).chain(data.extra) {
        for m in &setup.modalities {
            c.modality(m)?;
        }
    }
    let mut out = hcam_run_stage(1, run, setup, data)?;
    if !setup.hcam.merge_stages {
        out.extend(hcam_run_stage(2, run, setup, data)?);
    }
    out.extend(hcam_run_stage(3, run, setup, data)?);
    Ok(out)
}

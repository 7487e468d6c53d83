//! Downstream evaluation head over a stack of encoder layers: softmax layer
//! mixing, temporal pooling and a two-layer ReLU network, for classification
//! or three-attribute regression with a CCC objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentiveStatsPool;
use crate::autograd::{Graph, Var};
use crate::context::{convex_layer_mix_var, LayerStack};
use crate::error::{Error, Result};
use crate::hcam::Pooling;
use crate::losses::{class_weights, focal_loss, vs_loss, ccc_loss, ClassWeights, LossConfig, LossValue};
use crate::metrics::{classification_report, MetricReport, SelectionMetric};
use crate::nn::MlpHead;
use crate::optim::OptimizerConfig;
use crate::params::{GradStore, ParamId, ParamStore};
use crate::tensor::Matrix;
use crate::training::{fit, FitResult, LoadedConversation};

fn default_hidden() -> usize {
    256
}

fn default_tile() -> usize {
    1
}

fn default_pooling() -> Pooling {
    Pooling::Mean
}

/// Classification objective of the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadLoss {
    /// Unweighted cross-entropy.
    Ce,
    /// Inverse-frequency weighted cross-entropy.
    Wce,
    /// Unweighted focal loss.
    Focal,
    /// Inverse-frequency weighted focal loss.
    Wfl,
    /// Vector-scaling loss with inverse-frequency weights.
    Vs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CareHeadConfig {
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    /// Layers stored (layer-major) in each feature file.
    pub num_layers: usize,
    /// Feature-axis repetitions applied before mixing.
    #[serde(default = "default_tile")]
    pub tile: usize,
    #[serde(default = "default_pooling")]
    pub pooling: Pooling,
    pub objective: HeadLoss,
}

impl CareHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_layers == 0 || self.tile == 0 {
            return Err(Error::Config(
                "care_head.hidden_dim, care_head.num_layers and care_head.tile must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Mixing weights, optional attentive pooling and the two-layer head.
#[derive(Clone, Debug)]
pub struct CareHead {
    /// Raw (pre-softmax) layer weights `1 x L`.
    pub mix: ParamId,
    pub pool: Option<AttentiveStatsPool>,
    pub head: MlpHead,
    pub num_layers: usize,
    pub feature_dim: usize,
}

impl CareHead {
    /// `feature_dim` is the width after tiling.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        num_layers: usize,
        feature_dim: usize,
        hidden: usize,
        n_outputs: usize,
        pooling: Pooling,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mix = store.zeros(format!("{name}.mix"), 1, num_layers);
        let (pool, head_in) = match pooling {
            Pooling::Mean => (None, feature_dim),
            Pooling::AttentiveStats => (
                Some(AttentiveStatsPool::new(store, &format!("{name}.pool"), feature_dim, hidden, rng)),
                2 * feature_dim,
            ),
        };
        Self {
            mix,
            pool,
            head: MlpHead::new(store, &format!("{name}.head"), head_in, hidden, n_outputs, 0.0, rng),
            num_layers,
            feature_dim,
        }
    }

    /// Output row `1 x n_outputs` for one stack.
    pub fn forward(&self, g: &mut Graph, stack: &LayerStack) -> Result<Var> {
        if stack.num_layers() != self.num_layers {
            return Err(Error::shape("layer count", self.num_layers, stack.num_layers()));
        }
        if stack.shape().1 != self.feature_dim {
            return Err(Error::shape("layer width", self.feature_dim, stack.shape().1));
        }
        let layers: Vec<Var> = stack.layers().iter().map(|m| g.input(m.clone())).collect();
        let raw = g.param(self.mix);
        let mixed = convex_layer_mix_var(g, &layers, raw)?;
        let pooled = match &self.pool {
            None => g.mean_rows(mixed),
            Some(p) => p.forward(g, mixed)?,
        };
        Ok(self.head.forward(g, pooled).1)
    }

    /// Rows for a batch of stacks.
    pub fn forward_batch(&self, g: &mut Graph, stacks: &[&LayerStack]) -> Result<Var> {
        let rows = stacks
            .iter()
            .map(|s| self.forward(g, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(g.concat_rows(&rows))
    }
}

/// Logits `[C]` for one utterance.
pub fn downstream_classify(store: &ParamStore, head: &CareHead, stack: &LayerStack) -> Result<Vec<f64>> {
    let mut g = Graph::new(store);
    let out = head.forward(&mut g, stack)?;
    Ok(g.value(out).row(0).to_vec())
}

/// Predictions `[B x 3]` and the loss `3 − Σ CCC`.
#[derive(Clone, Debug)]
pub struct Regression {
    pub predictions: Matrix,
    pub loss: f64,
}

/// Regression head evaluation; `gold` is `B x 3` with `B >= 2`.
pub fn downstream_regress(store: &ParamStore, head: &CareHead, stacks: &[LayerStack], gold: &Matrix) -> Result<Regression> {
    let (predictions, loss) = regress_inner(store, head, stacks, gold, None)?;
    Ok(Regression {
        predictions,
        loss: loss.value,
    })
}

/// As [`downstream_regress`], also accumulating parameter gradients.
pub fn downstream_regress_grad(
    store: &ParamStore,
    head: &CareHead,
    stacks: &[LayerStack],
    gold: &Matrix,
    grads: &mut GradStore,
) -> Result<Regression> {
    let (predictions, loss) = regress_inner(store, head, stacks, gold, Some(grads))?;
    Ok(Regression {
        predictions,
        loss: loss.value,
    })
}

fn regress_inner(
    store: &ParamStore,
    head: &CareHead,
    stacks: &[LayerStack],
    gold: &Matrix,
    grads: Option<&mut GradStore>,
) -> Result<(Matrix, LossValue)> {
    if stacks.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "CCC regression needs at least two samples, got {}",
            stacks.len()
        )));
    }
    if gold.rows() != stacks.len() || gold.cols() != 3 {
        return Err(Error::shape(
            "regression gold",
            format!("({}, 3)", stacks.len()),
            format!("{:?}", gold.shape()),
        ));
    }
    let mut g = Graph::new(store);
    let refs: Vec<&LayerStack> = stacks.iter().collect();
    let pred = head.forward_batch(&mut g, &refs)?;
    let predictions = g.value(pred).clone();
    let loss = ccc_loss(&predictions, gold)?;
    if let Some(grads) = grads {
        let node = crate::losses::attach(&mut g, pred, loss.clone());
        let back = g.backward(node);
        g.accumulate_param_grads(&back, grads);
    }
    Ok((predictions, loss))
}

/// Classification objective over a batch of logits.
pub fn head_loss(
    kind: HeadLoss,
    logits: &Matrix,
    labels: &[usize],
    counts: &[usize],
    cfg: &LossConfig,
) -> Result<LossValue> {
    let c = logits.cols();
    let explicit = match &cfg.class_weights {
        Some(w) => Some(ClassWeights::new(w.clone())?),
        None => None,
    };
    let inverse = || -> Result<ClassWeights> {
        match &explicit {
            Some(w) => Ok(w.clone()),
            None => class_weights(counts),
        }
    };
    let unit = ClassWeights::uniform(c);
    match kind {
        HeadLoss::Ce => focal_loss(logits, labels, 0.0, explicit.as_ref().unwrap_or(&unit)),
        HeadLoss::Wce => focal_loss(logits, labels, 0.0, &inverse()?),
        HeadLoss::Focal => focal_loss(logits, labels, cfg.gamma_focal, explicit.as_ref().unwrap_or(&unit)),
        HeadLoss::Wfl => focal_loss(logits, labels, cfg.gamma_focal, &inverse()?),
        HeadLoss::Vs => vs_loss(logits, labels, counts, cfg.gamma_vs, cfg.tau_vs, &inverse()?),
    }
}

#[derive(Clone, Debug)]
pub struct CareSetup {
    pub care: CareHeadConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub selection: SelectionMetric,
    pub modality: String,
    /// Width of one stored layer, before tiling.
    pub input_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
}

pub struct CareModel {
    pub setup: CareSetup,
    pub store: ParamStore,
    pub head: CareHead,
}

impl CareModel {
    pub fn init(setup: &CareSetup) -> Result<Self> {
        setup.care.validate()?;
        setup.loss.validate()?;
        setup.optimizer.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
        rng.set_stream(50);
        let mut store = ParamStore::new();
        let head = CareHead::new(
            &mut store,
            "care",
            setup.care.num_layers,
            setup.input_dim * setup.care.tile,
            setup.care.hidden_dim,
            setup.num_classes,
            setup.care.pooling,
            &mut rng,
        );
        Ok(Self {
            setup: setup.clone(),
            store,
            head,
        })
    }

    pub fn stack(&self, features: &Matrix) -> Result<LayerStack> {
        let s = LayerStack::from_stacked(features, self.setup.care.num_layers)?;
        Ok(if self.setup.care.tile > 1 {
            s.tile_features(self.setup.care.tile)
        } else {
            s
        })
    }

    /// Logits `[N x C]` of one conversation's utterances.
    pub fn logits(&self, conv: &LoadedConversation) -> Result<Matrix> {
        let stacks = conv
            .modality(&self.setup.modality)?
            .iter()
            .map(|m| self.stack(m))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new(&self.store);
        let refs: Vec<&LayerStack> = stacks.iter().collect();
        let out = self.head.forward_batch(&mut g, &refs)?;
        Ok(g.value(out).clone())
    }

    /// Softmax mixing weights currently learned.
    pub fn mix_weights(&self) -> Vec<f64> {
        crate::tensor::softmax(self.store.get(self.head.mix).row(0))
    }
}

/// Trains the classification head on utterances, selecting on validation.
pub fn care_train(model: &mut CareModel, train: &[LoadedConversation], val: &[LoadedConversation]) -> Result<FitResult> {
    crate::training::require_labels(train, "train")?;
    crate::training::require_labels(val, "val")?;
    let mut items: Vec<(LayerStack, usize)> = Vec::new();
    for c in train {
        for (m, y) in c.modality(&model.setup.modality)?.iter().zip(c.gold()?) {
            items.push((model.stack(m)?, y));
        }
    }
    let mut counts = vec![0usize; model.setup.num_classes];
    for (_, y) in &items {
        counts[*y] += 1;
    }
    let val_stacks = val
        .iter()
        .map(|c| {
            c.modality(&model.setup.modality)?
                .iter()
                .map(|m| model.stack(m))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let setup = model.setup.clone();
    let head = model.head.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    rng.set_stream(51);
    fit(
        &mut model.store,
        &setup.optimizer,
        setup.selection,
        &mut rng,
        items.len(),
        |store, batch, _drng, grads: &mut GradStore| {
            let mut g = Graph::new(store);
            let stacks: Vec<&LayerStack> = batch.iter().map(|&i| &items[i].0).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| items[i].1).collect();
            let logits = head.forward_batch(&mut g, &stacks)?;
            let loss = head_loss(setup.care.objective, g.value(logits), &labels, &counts, &setup.loss)?;
            let value = loss.value;
            let node = crate::losses::attach(&mut g, logits, loss);
            let back = g.backward(node);
            g.accumulate_param_grads(&back, grads);
            Ok(value)
        },
        |store| {
            let mut gold = Vec::new();
            let mut pred = Vec::new();
            for (c, stacks) in val.iter().zip(&val_stacks) {
                let mut g = Graph::new(store);
                let refs: Vec<&LayerStack> = stacks.iter().collect();
                let out = head.forward_batch(&mut g, &refs)?;
                pred.extend(g.value(out).argmax_rows());
                gold.extend(c.gold()?);
            }
            classification_report(&gold, &pred, setup.num_classes)
        },
    )
}

/// Report of a trained head on labeled conversations.
pub fn care_report(model: &CareModel, convs: &[LoadedConversation]) -> Result<MetricReport> {
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    for c in convs {
        gold.extend(c.gold()?);
        pred.extend(model.logits(c)?.argmax_rows());
    }
    classification_report(&gold, &pred, model.setup.num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error};
    use crate::optim::{Optimizer, OptimizerKind};
    use crate::context::convex_layer_mix;
    use rand::Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn stacks(rng: &mut ChaCha8Rng, n: usize, layers: usize, t: usize, d: usize) -> Vec<LayerStack> {
        (0..n)
            .map(|_| LayerStack::new((0..layers).map(|_| random(rng, t, d)).collect()).unwrap())
            .collect()
    }

    #[test]
    fn ccc_objective_hand_values() {
        let gold = Matrix::from_vec(4, 3, vec![1.0, 0.0, 2.0, 2.0, 1.0, 1.0, 3.0, 5.0, 0.0, 4.0, 2.0, 3.0]);
        assert!(ccc_loss(&gold, &gold).unwrap().value.abs() < 1e-12);
        // negation is exactly anti-concordant once each column is centred
        let centred = Matrix::from_vec(4, 3, vec![-1.5, -2.0, 0.5, -0.5, -1.0, -0.5, 0.5, 3.0, -1.5, 1.5, 0.0, 1.5]);
        let neg = centred.map(|v| -v);
        assert!((ccc_loss(&neg, &centred).unwrap().value - 6.0).abs() < 1e-12);
        let neg = gold.map(|v| -v);
        let off_centre = ccc_loss(&neg, &gold).unwrap().value;
        assert!(off_centre > 3.0 && off_centre < 6.0);
        let flat = Matrix::filled(4, 3, 0.7);
        assert!((ccc_loss(&flat, &gold).unwrap().value - 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_output_head_regresses_to_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let head = CareHead::new(&mut store, "h", 3, 4, 8, 3, Pooling::Mean, &mut rng);
        let w = head.head.output.weight;
        let shape = store.get(w).shape();
        store.set(w, Matrix::zeros(shape.0, shape.1));
        let xs = stacks(&mut rng, 5, 3, 2, 4);
        let gold = random(&mut rng, 5, 3);
        let r = downstream_regress(&store, &head, &xs, &gold).unwrap();
        assert!((r.loss - 3.0).abs() < 1e-12);
        assert_eq!(r.predictions.shape(), (5, 3));
    }

    #[test]
    fn regression_needs_two_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let head = CareHead::new(&mut store, "h", 2, 3, 4, 3, Pooling::Mean, &mut rng);
        let xs = stacks(&mut rng, 1, 2, 1, 3);
        assert!(downstream_regress(&store, &head, &xs, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn regression_loss_decreases_on_linear_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let head = CareHead::new(&mut store, "h", 3, 5, 16, 3, Pooling::Mean, &mut rng);
        let xs = stacks(&mut rng, 24, 3, 2, 5);
        let map = random(&mut rng, 5, 3);
        let mixed: Vec<Matrix> = xs
            .iter()
            .map(|s| convex_layer_mix(s, &[0.0; 3]).unwrap().mean_rows())
            .collect();
        let refs: Vec<&Matrix> = mixed.iter().collect();
        let gold = Matrix::concat_rows(&refs).matmul(&map);
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            batch_size: 24,
            epochs: 1,
            grad_clip_norm: None,
            weight_decay: 0.0,
        };
        let mut opt = Optimizer::new(&cfg, &store);
        let mut losses = Vec::new();
        for _ in 0..50 {
            let mut grads = GradStore::zeros_like(&store);
            let r = downstream_regress_grad(&store, &head, &xs, &gold, &mut grads).unwrap();
            losses.push(r.loss);
            opt.step(&mut store, &mut grads);
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "{losses:?}");
        }
    }

    #[test]
    fn learned_mix_stays_in_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let head = CareHead::new(&mut store, "h", 4, 3, 8, 2, Pooling::Mean, &mut rng);
        store.set(head.mix, random(&mut rng, 1, 4).map(|v| 30.0 * v));
        let w = crate::tensor::softmax(store.get(head.mix).row(0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let x = &stacks(&mut rng, 1, 4, 3, 3)[0];
        let mixed = convex_layer_mix(x, store.get(head.mix).row(0)).unwrap();
        for (i, v) in mixed.as_slice().iter().enumerate() {
            let lo = x.layers().iter().map(|l| l.as_slice()[i]).fold(f64::INFINITY, f64::min);
            let hi = x.layers().iter().map(|l| l.as_slice()[i]).fold(f64::NEG_INFINITY, f64::max);
            assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
    }

    #[test]
    fn single_layer_mix_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = &stacks(&mut rng, 1, 1, 3, 4)[0];
        assert_eq!(convex_layer_mix(x, &[1.7]).unwrap(), x.layers()[0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for pooling in [Pooling::Mean, Pooling::AttentiveStats] {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let mut store = ParamStore::new();
            let head = CareHead::new(&mut store, "h", 3, 4, 6, 3, pooling, &mut rng);
            store.set(head.mix, random(&mut rng, 1, 3));
            let xs = stacks(&mut rng, 4, 3, 3, 4);
            let gold = random(&mut rng, 4, 3);
            let mut grads = GradStore::zeros_like(&store);
            downstream_regress_grad(&store, &head, &xs, &gold, &mut grads).unwrap();
            let n = store.num_scalars();
            let analytic: Vec<f64> = (0..n).map(|i| grads.flat_get(i)).collect();
            let point: Vec<f64> = (0..n).map(|i| store.flat_get(i)).collect();
            let mut probe = store.clone();
            let numeric = central_difference(&point, 1e-5, |v| {
                for (i, &x) in v.iter().enumerate() {
                    probe.flat_set(i, x);
                }
                downstream_regress(&probe, &head, &xs, &gold).unwrap().loss
            });
            let err = max_relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "{pooling:?}: {err}");
        }
    }

    #[test]
    fn classification_losses_are_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits = random(&mut rng, 6, 3);
        let labels = [0, 1, 2, 0, 0, 1];
        let cfg = LossConfig {
            gamma_focal: 2.0,
            gamma_vs: 0.3,
            tau_vs: 1.0,
            tau_con: 0.1,
            lambda_con: 0.0,
            alpha_kl: 0.0,
            beta_hcam: None,
            lambda_care: 0.0,
            class_weights: None,
        };
        let ce = head_loss(HeadLoss::Ce, &logits, &labels, &[3, 2, 1], &cfg).unwrap();
        let focal = head_loss(HeadLoss::Focal, &logits, &labels, &[3, 2, 1], &cfg).unwrap();
        assert!(focal.value < ce.value);
        for kind in [HeadLoss::Wce, HeadLoss::Wfl, HeadLoss::Vs] {
            assert!(head_loss(kind, &logits, &labels, &[3, 2, 1], &cfg).unwrap().value.is_finite());
        }
    }

    #[test]
    fn classify_returns_one_logit_per_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let head = CareHead::new(&mut store, "h", 2, 4, 256, 5, Pooling::Mean, &mut rng);
        let x = &stacks(&mut rng, 1, 2, 7, 4)[0];
        assert_eq!(downstream_classify(&store, &head, x).unwrap().len(), 5);
        let wrong = &stacks(&mut rng, 1, 3, 7, 4)[0];
        assert!(downstream_classify(&store, &head, wrong).is_err());
    }
}

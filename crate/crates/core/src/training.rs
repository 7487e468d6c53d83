//! In-memory conversations and the shared mini-batch training loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, SelectionMetric};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::{GradStore, ParamStore};
use crate::tensor::Matrix;

/// One conversation with its feature matrices loaded.
#[derive(Clone, Debug)]
pub struct LoadedConversation {
    pub conv_id: String,
    pub utt_ids: Vec<String>,
    pub labels: Vec<Option<usize>>,
    /// Modality to one matrix per utterance.
    pub features: BTreeMap<String, Vec<Matrix>>,
}

impl LoadedConversation {
    pub fn len(&self) -> usize {
        self.utt_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utt_ids.is_empty()
    }

    pub fn modality(&self, name: &str) -> Result<&[Matrix]> {
        self.features
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Pipeline(format!("conversation {} lacks modality {name:?}", self.conv_id)))
    }

    /// `[N x D]` matrix of per-utterance frame means.
    pub fn pooled(&self, modality: &str) -> Result<Matrix> {
        let rows: Vec<Matrix> = self.modality(modality)?.iter().map(Matrix::mean_rows).collect();
        let refs: Vec<&Matrix> = rows.iter().collect();
        Ok(Matrix::concat_rows(&refs))
    }

    pub fn gold(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .zip(&self.utt_ids)
            .map(|(l, u)| l.ok_or_else(|| Error::Pipeline(format!("utterance {u} has no gold label"))))
            .collect()
    }
}

/// Loads every conversation of `split` with the requested modalities.
pub fn load_split(ds: &Dataset, split: &str, modalities: &[String]) -> Result<Vec<LoadedConversation>> {
    ds.split(split)?
        .iter()
        .map(|conv| {
            let mut features = BTreeMap::new();
            for m in modalities {
                let mats = conv
                    .utterances
                    .iter()
                    .map(|u| ds.load_features(u, m).map(|f| f.to_matrix()))
                    .collect::<Result<Vec<_>>>()?;
                features.insert(m.clone(), mats);
            }
            Ok(LoadedConversation {
                conv_id: conv.conv_id.clone(),
                utt_ids: conv.utterances.iter().map(|u| u.utt_id.clone()).collect(),
                labels: conv.utterances.iter().map(|u| u.label).collect(),
                features,
            })
        })
        .collect()
}

/// Fails unless every utterance is labeled.
pub fn require_labels(convs: &[LoadedConversation], split: &str) -> Result<()> {
    for c in convs {
        if let Some(i) = c.labels.iter().position(Option::is_none) {
            return Err(Error::Pipeline(format!(
                "split {split:?} must be labeled; utterance {} is not",
                c.utt_ids[i]
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_score: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub best_epoch: usize,
    pub best_report: MetricReport,
    pub history: Vec<EpochLog>,
}

/// Shuffled mini-batch training with best-epoch selection on validation.
///
/// `batch_loss` evaluates one batch of training item indices, accumulates
/// gradients into the provided store and returns the loss. On return `store`
/// holds the parameters of the best validation epoch (earliest on ties).
pub fn fit(
    store: &mut ParamStore,
    opt_cfg: &OptimizerConfig,
    selection: SelectionMetric,
    rng: &mut ChaCha8Rng,
    num_items: usize,
    mut batch_loss: impl FnMut(&ParamStore, &[usize], ChaCha8Rng, &mut GradStore) -> Result<f64>,
    mut validate: impl FnMut(&ParamStore) -> Result<MetricReport>,
) -> Result<FitResult> {
    if num_items == 0 {
        return Err(Error::Pipeline("no training items".into()));
    }
    let mut opt = Optimizer::new(opt_cfg, store);
    let mut order: Vec<usize> = (0..num_items).collect();
    let mut best: Option<(usize, MetricReport, ParamStore)> = None;
    let mut history = Vec::with_capacity(opt_cfg.epochs);
    let mut step = 0usize;
    for epoch in 1..=opt_cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(opt_cfg.batch_size) {
            step += 1;
            let mut grads = GradStore::zeros_like(store);
            let dropout_rng = ChaCha8Rng::seed_from_u64(rng.gen());
            let loss = batch_loss(store, batch, dropout_rng, &mut grads)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged { step });
            }
            total += loss;
            opt.step(store, &mut grads);
        }
        let report = validate(store)?;
        let score = selection.of(&report);
        history.push(EpochLog {
            epoch,
            train_loss: total,
            val_score: score,
        });
        let better = match &best {
            None => true,
            Some((_, r, _)) => score > selection.of(r),
        };
        if better {
            best = Some((epoch, report, store.clone()));
        }
    }
    let (best_epoch, best_report, best_store) = best.expect("at least one epoch");
    *store = best_store;
    Ok(FitResult {
        best_epoch,
        best_report,
        history,
    })
}

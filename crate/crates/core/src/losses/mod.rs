//! Training objectives with analytic gradients.
//!
//! Every loss is a pure function returning its value together with the
//! gradient with respect to its differentiable inputs. [`attach`] splices
//! such a result into an autograd [`Graph`] so the rest of the model receives
//! the gradient through ordinary backpropagation.
//!
//! Batch reductions are deliberately not uniform: the focal and VS families
//! average over the batch, while the contrastive and KL terms are plain sums.

mod care;
mod contrastive;
mod focal;
mod kl;

use serde::{Deserialize, Serialize};

pub use care::{care_distillation_loss, ccc_loss, CareLoss, CareTargets};
pub use contrastive::{supcon_loss, SupConVariant};
pub use focal::{focal_loss, vs_loss, weighted_cross_entropy};
pub use kl::{kl_consistency, kl_consistency_logits, KlValue, KL_EPS, SIMPLEX_TOL};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Loss hyper-parameters. Every field must be given in the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub gamma_focal: f64,
    pub gamma_vs: f64,
    pub tau_vs: f64,
    pub tau_con: f64,
    pub lambda_con: f64,
    pub alpha_kl: f64,
    /// Cross-entropy share in the HCAM objective. Required by that pipeline only.
    #[serde(default)]
    pub beta_hcam: Option<f64>,
    pub lambda_care: f64,
    /// Explicit class weights; `None` means unit weights unless a loss asks for
    /// inverse-frequency weights.
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("gamma_focal", self.gamma_focal),
            ("gamma_vs", self.gamma_vs),
            ("tau_vs", self.tau_vs),
            ("lambda_con", self.lambda_con),
            ("alpha_kl", self.alpha_kl),
            ("lambda_care", self.lambda_care),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss.{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.tau_con.is_finite() && self.tau_con > 0.0) {
            return Err(Error::Config(format!("loss.tau_con must be > 0, got {}", self.tau_con)));
        }
        if let Some(b) = self.beta_hcam {
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::Config(format!("loss.beta_hcam must lie in [0, 1], got {b}")));
            }
        }
        if let Some(w) = &self.class_weights {
            ClassWeights::new(w.clone()).map_err(|e| Error::Config(format!("loss.class_weights: {e}")))?;
        }
        Ok(())
    }
}

/// Strictly positive per-class weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidArgument("empty class weight vector".into()));
        }
        if let Some(c) = w.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "class weight {c} must be finite and > 0, got {}",
                w[c]
            )));
        }
        Ok(Self(w))
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0; num_classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Inverse-frequency weights `w[c] = N / (counts[c] · C)`.
pub fn class_weights(counts: &[usize]) -> Result<ClassWeights> {
    if counts.is_empty() {
        return Err(Error::InvalidArgument("no classes".into()));
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::ZeroClassCount { class });
    }
    let n: usize = counts.iter().sum();
    let c = counts.len() as f64;
    Ok(ClassWeights(
        counts.iter().map(|&k| n as f64 / (k as f64 * c)).collect(),
    ))
}

/// A scalar loss and its gradient with respect to one input matrix.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub grad: Matrix,
}

/// Adds `loss` to the graph as a scalar node whose gradient flows into `input`.
pub fn attach(g: &mut Graph, input: Var, loss: LossValue) -> Var {
    g.custom_scalar(loss.value, vec![(input, loss.grad)])
}

pub(crate) fn check_targets(logits: &Matrix, targets: &[usize]) -> Result<()> {
    if logits.rows() != targets.len() {
        return Err(Error::shape("loss targets", logits.rows(), targets.len()));
    }
    if logits.rows() == 0 || logits.cols() == 0 {
        return Err(Error::InvalidArgument("loss over an empty batch".into()));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::InvalidArgument(format!(
            "target {t} out of range for {} classes",
            logits.cols()
        )));
    }
    if !logits.all_finite() {
        return Err(Error::InvalidArgument("non-finite logits".into()));
    }
    Ok(())
}

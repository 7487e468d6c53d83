//! Experiment configuration files.
//!
//! JSON with every unknown key rejected. Relative paths resolve against the
//! directory holding the config file; the resolved form is what gets written
//! to `config.lock.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::AttentionConfig;
use crate::care_head::{CareHeadConfig, HeadLoss};
use crate::context::ContextConfig;
use crate::error::{Error, Result};
use crate::hcam::HcamConfig;
use crate::losses::LossConfig;
use crate::metrics::SelectionMetric;
use crate::mister::MisterConfig;
use crate::optim::OptimizerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Hcam,
    Mister,
    CareHead,
}

impl Pipeline {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Hcam => "hcam",
            Self::Mister => "mister",
            Self::CareHead => "care_head",
        }
    }
}

fn default_train() -> String {
    "train".into()
}

fn default_val() -> String {
    "val".into()
}

/// Names of the manifest splits used for training, selection and testing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitNames {
    #[serde(default = "default_train")]
    pub train: String,
    #[serde(default = "default_val")]
    pub val: String,
    /// Evaluated after training when set.
    #[serde(default)]
    pub test: Option<String>,
}

impl Default for SplitNames {
    fn default() -> Self {
        Self {
            train: default_train(),
            val: default_val(),
            test: Some("test".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub pipeline: Pipeline,
    pub manifest: PathBuf,
    /// SHA-256 of the manifest bytes. Filled in the lock file; when present
    /// on input the manifest must match it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_sha256: Option<String>,
    pub modalities: Vec<String>,
    #[serde(default)]
    pub splits: SplitNames,
    pub loss: LossConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<ContextConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<AttentionConfig>,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Defaults to weighted F1, or macro F1 for care-head runs trained with
    /// a class-rebalancing objective.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionMetric>,
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hcam: Option<HcamConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mister: Option<MisterConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub care_head: Option<CareHeadConfig>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.manifest = resolve(base, &cfg.manifest);
        cfg.output_dir = resolve(base, &cfg.output_dir);
        Ok(cfg)
    }

    pub fn selection_metric(&self) -> SelectionMetric {
        self.selection.unwrap_or(match (&self.pipeline, &self.care_head) {
            (Pipeline::CareHead, Some(c)) if c.objective != HeadLoss::Ce && c.objective != HeadLoss::Focal => {
                SelectionMetric::MacroF1
            }
            _ => SelectionMetric::WeightedF1,
        })
    }

    /// Field-by-field checks that do not need the dataset.
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.modalities.is_empty() {
            return Err(Error::Config("modalities must list at least one modality".into()));
        }
        let section = |present: bool, name: &str| -> Result<()> {
            if present {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{name} is required for pipeline {}",
                    self.pipeline.as_str()
                )))
            }
        };
        let stray = |present: bool, name: &str| -> Result<()> {
            if present {
                Err(Error::Config(format!(
                    "section {name} does not apply to pipeline {}",
                    self.pipeline.as_str()
                )))
            } else {
                Ok(())
            }
        };
        match self.pipeline {
            Pipeline::Hcam => {
                section(self.hcam.is_some(), "hcam")?;
                section(self.context.is_some(), "context")?;
                section(self.attention.is_some(), "attention")?;
                section(self.loss.beta_hcam.is_some(), "loss.beta_hcam")?;
                stray(self.mister.is_some(), "mister")?;
                stray(self.care_head.is_some(), "care_head")?;
                if self.modalities.len() != 2 {
                    return Err(Error::Config(format!(
                        "modalities: hcam needs exactly two, got {}",
                        self.modalities.len()
                    )));
                }
            }
            Pipeline::Mister => {
                section(self.mister.is_some(), "mister")?;
                section(self.context.is_some(), "context")?;
                section(self.attention.is_some(), "attention")?;
                stray(self.hcam.is_some(), "hcam")?;
                stray(self.care_head.is_some(), "care_head")?;
                if self.modalities.len() != 2 {
                    return Err(Error::Config(format!(
                        "modalities: mister needs exactly two (speech, text), got {}",
                        self.modalities.len()
                    )));
                }
            }
            Pipeline::CareHead => {
                section(self.care_head.is_some(), "care_head")?;
                stray(self.hcam.is_some(), "hcam")?;
                stray(self.mister.is_some(), "mister")?;
                if self.modalities.len() != 1 {
                    return Err(Error::Config(format!(
                        "modalities: care_head reads exactly one layer-stack modality, got {}",
                        self.modalities.len()
                    )));
                }
                self.care_head.as_ref().expect("checked").validate()?;
            }
        }
        if let Some(h) = &self.hcam {
            h.validate()?;
        }
        if let Some(c) = &self.context {
            c.validate()?;
        }
        if !self.manifest.is_file() {
            return Err(Error::Config(format!(
                "manifest: {} does not exist",
                self.manifest.display()
            )));
        }
        Ok(())
    }

    /// Copy with defaults made explicit and the manifest hash pinned.
    pub fn resolved(&self, manifest_sha256: &str) -> Self {
        Self {
            selection: Some(self.selection_metric()),
            manifest_sha256: Some(manifest_sha256.to_string()),
            ..self.clone()
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

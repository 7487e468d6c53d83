//! Conversations, utterances, labels and the on-disk dataset description.

mod emf;
mod manifest;
mod validate;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

pub use emf::{load_feature_matrix, save_feature_matrix, FeatureMatrix, MAGIC as EMF_MAGIC};
pub use manifest::{load_manifest, manifest_to_json, save_manifest};
pub use validate::{validate_dataset, Finding, SplitReport, ValidationReport};

use crate::error::{Error, Result};

/// Ordered, duplicate-free class names. A label's index never changes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmotionLabelSet {
    names: Vec<String>,
}

impl EmotionLabelSet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidRecord {
                record: "labels".into(),
                message: "label set is empty".into(),
            });
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::DuplicateId {
                    kind: "label",
                    id: n.clone(),
                });
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utterance {
    pub utt_id: String,
    pub speaker: Option<String>,
    pub label: Option<usize>,
    /// Modality name to feature file, relative to the dataset root.
    pub features: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conversation {
    pub conv_id: String,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Gold labels, or `None` if any utterance is unlabeled.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.utterances.iter().map(|u| u.label).collect()
    }
}

/// A validated dataset. Feature files are referenced, not loaded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub labelset: EmotionLabelSet,
    pub splits: BTreeMap<String, Vec<Conversation>>,
    /// Splits allowed to carry unlabeled utterances.
    pub inference_only: BTreeSet<String>,
    /// Directory feature paths are resolved against.
    pub root: PathBuf,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.labelset == other.labelset
            && self.splits == other.splits
            && self.inference_only == other.inference_only
    }
}

impl Dataset {
    /// Checks every structural invariant.
    pub fn new(
        labelset: EmotionLabelSet,
        splits: BTreeMap<String, Vec<Conversation>>,
        inference_only: BTreeSet<String>,
        root: PathBuf,
    ) -> Result<Self> {
        let mut conv_ids = HashSet::new();
        for (split, convs) in &splits {
            for conv in convs {
                if !conv_ids.insert(conv.conv_id.as_str()) {
                    return Err(Error::DuplicateId {
                        kind: "conv_id",
                        id: conv.conv_id.clone(),
                    });
                }
                if conv.utterances.is_empty() {
                    return Err(Error::InvalidRecord {
                        record: format!("conversation {}", conv.conv_id),
                        message: "conversation has no utterances".into(),
                    });
                }
                let mut utt_ids = HashSet::new();
                for u in &conv.utterances {
                    if !utt_ids.insert(u.utt_id.as_str()) {
                        return Err(Error::DuplicateId {
                            kind: "utt_id",
                            id: format!("{}/{}", conv.conv_id, u.utt_id),
                        });
                    }
                    match u.label {
                        Some(l) if l >= labelset.len() => {
                            return Err(Error::InvalidRecord {
                                record: format!("utterance {}", u.utt_id),
                                message: format!("label index {l} out of range"),
                            })
                        }
                        None if !inference_only.contains(split) => {
                            return Err(Error::InvalidRecord {
                                record: format!("utterance {}", u.utt_id),
                                message: format!(
                                    "unlabeled utterance in split {split:?}, which is not inference-only"
                                ),
                            })
                        }
                        _ => {}
                    }
                }
            }
        }
        for s in &inference_only {
            if !splits.contains_key(s) {
                return Err(Error::UnknownSplit(s.clone()));
            }
        }
        Ok(Self {
            labelset,
            splits,
            inference_only,
            root,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.labelset.len()
    }

    pub fn split(&self, name: &str) -> Result<&[Conversation]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownSplit(name.to_string()))
    }

    pub fn feature_path(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    /// Loads one modality of one utterance.
    pub fn load_features(&self, utt: &Utterance, modality: &str) -> Result<FeatureMatrix> {
        let rel = utt.features.get(modality).ok_or_else(|| Error::InvalidRecord {
            record: format!("utterance {}", utt.utt_id),
            message: format!("missing modality {modality:?}"),
        })?;
        load_feature_matrix(self.feature_path(rel))
    }

    /// Every utterance across all splits, with its conversation and split.
    pub fn utterances(&self) -> impl Iterator<Item = (&str, &Conversation, &Utterance)> {
        self.splits.iter().flat_map(|(s, convs)| {
            convs
                .iter()
                .flat_map(move |c| c.utterances.iter().map(move |u| (s.as_str(), c, u)))
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

/// `counts[c]` = labeled utterances of class `c` in `split`.
pub fn split_class_counts(ds: &Dataset, split: &str) -> Result<Vec<usize>> {
    let convs = ds.split(split)?;
    Ok(class_counts(convs, ds.num_classes()))
}

pub(crate) fn class_counts(convs: &[Conversation], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for u in convs.iter().flat_map(|c| &c.utterances) {
        if let Some(l) = u.label {
            counts[l] += 1;
        }
    }
    counts
}

//! JSON dataset manifest.
//!
//! ```json
//! { "labels": ["neutral", "angry"],
//!   "splits": { "train": [ { "conv_id": "c1", "utterances": [
//!       { "utt_id": "u1", "speaker": "A", "label": "neutral",
//!         "features": { "speech": "feats/u1.s.emf", "text": "feats/u1.t.emf" } } ] } ] },
//!   "inference_only": [] }
//! ```
//!
//! Feature paths are relative to the manifest's directory. `inference_only`
//! is optional and names the splits that may hold `"label": null`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Conversation, Dataset, EmotionLabelSet, Utterance};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    labels: Option<Vec<String>>,
    splits: Option<BTreeMap<String, Vec<ConversationDoc>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    inference_only: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConversationDoc {
    conv_id: Option<String>,
    utterances: Option<Vec<UtteranceDoc>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceDoc {
    utt_id: Option<String>,
    #[serde(default)]
    speaker: Option<String>,
    #[serde(default)]
    label: Option<String>,
    features: Option<BTreeMap<String, String>>,
}

fn missing(record: String, field: &str) -> Error {
    Error::InvalidRecord {
        record,
        message: format!("missing required field {field:?}"),
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, root)
}

pub(crate) fn parse_manifest(text: &str, root: std::path::PathBuf) -> Result<Dataset> {
    let doc: ManifestDoc =
        serde_json::from_str(text).map_err(|e| Error::ManifestParse(e.to_string()))?;
    let labels = doc.labels.ok_or_else(|| missing("manifest".into(), "labels"))?;
    let labelset = EmotionLabelSet::new(labels)?;
    let split_docs = doc.splits.ok_or_else(|| missing("manifest".into(), "splits"))?;

    let mut splits = BTreeMap::new();
    for (split, convs) in split_docs {
        let mut out = Vec::with_capacity(convs.len());
        for (ci, conv) in convs.into_iter().enumerate() {
            let conv_id = conv
                .conv_id
                .ok_or_else(|| missing(format!("split {split:?} conversation #{ci}"), "conv_id"))?;
            let utts = conv
                .utterances
                .ok_or_else(|| missing(format!("conversation {conv_id}"), "utterances"))?;
            let mut utterances = Vec::with_capacity(utts.len());
            for (ui, u) in utts.into_iter().enumerate() {
                let utt_id = u.utt_id.ok_or_else(|| {
                    missing(format!("conversation {conv_id} utterance #{ui}"), "utt_id")
                })?;
                let features = u
                    .features
                    .ok_or_else(|| missing(format!("utterance {utt_id}"), "features"))?;
                let label = match u.label {
                    None => None,
                    Some(name) => Some(labelset.index_of(&name).ok_or_else(|| {
                        Error::UnknownLabel {
                            utt_id: utt_id.clone(),
                            label: name,
                        }
                    })?),
                };
                utterances.push(Utterance {
                    utt_id,
                    speaker: u.speaker,
                    label,
                    features,
                });
            }
            out.push(Conversation {
                conv_id,
                utterances,
            });
        }
        splits.insert(split, out);
    }
    let inference_only: BTreeSet<String> = doc.inference_only.into_iter().collect();
    Dataset::new(labelset, splits, inference_only, root)
}

pub fn manifest_to_json(ds: &Dataset) -> String {
    let doc = ManifestDoc {
        labels: Some(ds.labelset.names().to_vec()),
        splits: Some(
            ds.splits
                .iter()
                .map(|(name, convs)| {
                    let convs = convs
                        .iter()
                        .map(|c| ConversationDoc {
                            conv_id: Some(c.conv_id.clone()),
                            utterances: Some(
                                c.utterances
                                    .iter()
                                    .map(|u| UtteranceDoc {
                                        utt_id: Some(u.utt_id.clone()),
                                        speaker: u.speaker.clone(),
                                        label: u.label.map(|l| ds.labelset.name(l).to_string()),
                                        features: Some(u.features.clone()),
                                    })
                                    .collect(),
                            ),
                        })
                        .collect();
                    (name.clone(), convs)
                })
                .collect(),
        ),
        inference_only: ds.inference_only.iter().cloned().collect(),
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("manifest serializes");
    s.push('\n');
    s
}

pub fn save_manifest(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    crate::runner::io::write_atomic(path.as_ref(), manifest_to_json(ds).as_bytes())
}

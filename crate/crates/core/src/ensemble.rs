//! Majority voting over the label predictions of several classifiers.
//!
//! Ties among the most-voted labels go to the designated tiebreaker's label
//! when it is one of them, otherwise to the lowest tied label index.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::metrics::{classification_report, MetricReport};

/// `expert_id -> utt_id -> label index`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PredictionTable {
    experts: BTreeMap<String, BTreeMap<String, usize>>,
}

impl PredictionTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Checks that every expert covers the same utterances.
    pub fn from_map(experts: BTreeMap<String, BTreeMap<String, usize>>) -> Result<Self> {
        let t = Self { experts };
        t.check_coverage()?;
        Ok(t)
    }

    /// Adds one prediction; a repeated `(expert, utt)` pair is an error.
    pub fn insert(&mut self, expert: &str, utt_id: &str, label: usize) -> Result<()> {
        let e = self.experts.entry(expert.to_string()).or_default();
        if e.insert(utt_id.to_string(), label).is_some() {
            return Err(Error::DuplicateId {
                kind: "prediction",
                id: format!("{expert}/{utt_id}"),
            });
        }
        Ok(())
    }

    pub fn experts(&self) -> impl Iterator<Item = &str> {
        self.experts.keys().map(String::as_str)
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn predictions(&self, expert: &str) -> Option<&BTreeMap<String, usize>> {
        self.experts.get(expert)
    }

    /// Utterance ids covered by the table, sorted.
    pub fn utt_ids(&self) -> Vec<&str> {
        self.experts
            .values()
            .next()
            .map(|m| m.keys().map(String::as_str).collect())
            .unwrap_or_default()
    }

    pub fn check_coverage(&self) -> Result<()> {
        let mut iter = self.experts.iter();
        let Some((first_id, first)) = iter.next() else {
            return Ok(());
        };
        let reference: BTreeSet<&String> = first.keys().collect();
        for (id, preds) in iter {
            let keys: BTreeSet<&String> = preds.keys().collect();
            if keys != reference {
                let missing = reference
                    .symmetric_difference(&keys)
                    .next()
                    .map(|s| s.as_str())
                    .unwrap_or_default();
                return Err(Error::InvalidRecord {
                    record: format!("expert {id}"),
                    message: format!(
                        "covers a different utterance set than expert {first_id} (e.g. {missing:?})"
                    ),
                });
            }
        }
        Ok(())
    }

    fn subset(&self, ids: &[String]) -> Result<Self> {
        let mut experts = BTreeMap::new();
        for id in ids {
            let preds = self
                .experts
                .get(id)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown expert {id:?}")))?;
            experts.insert(id.clone(), preds.clone());
        }
        Ok(Self { experts })
    }
}

/// Modal label per utterance with the documented tie rule.
pub fn majority_vote(table: &PredictionTable, tiebreaker: &str) -> Result<BTreeMap<String, usize>> {
    if table.num_experts() < 2 {
        return Err(Error::InvalidArgument(format!(
            "majority vote needs at least two experts, got {}",
            table.num_experts()
        )));
    }
    vote(table, tiebreaker)
}

fn vote(table: &PredictionTable, tiebreaker: &str) -> Result<BTreeMap<String, usize>> {
    let tb = table
        .predictions(tiebreaker)
        .ok_or_else(|| Error::InvalidArgument(format!("tiebreaker {tiebreaker:?} is not an expert")))?;
    table.check_coverage()?;
    let mut out = BTreeMap::new();
    for (utt, &tb_label) in tb {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for preds in table.experts.values() {
            *counts.entry(preds[utt]).or_default() += 1;
        }
        let top = counts.values().copied().max().expect("at least one vote");
        let leaders: Vec<usize> = counts.iter().filter(|(_, &c)| c == top).map(|(&l, _)| l).collect();
        let label = if leaders.len() == 1 {
            leaders[0]
        } else if leaders.contains(&tb_label) {
            tb_label
        } else {
            leaders[0]
        };
        out.insert(utt.clone(), label);
    }
    Ok(out)
}

/// One expert subset and its tiebreaker.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Combination {
    pub experts: Vec<String>,
    pub tiebreaker: String,
}

/// Votes within each subset and scores it against `gold`. A single-expert
/// subset is scored on that expert's own predictions.
pub fn ablate_combinations(
    table: &PredictionTable,
    subsets: &[Combination],
    gold: &BTreeMap<String, usize>,
    num_classes: usize,
) -> Result<Vec<MetricReport>> {
    subsets
        .iter()
        .map(|combo| {
            if combo.experts.is_empty() {
                return Err(Error::InvalidArgument("empty expert subset".into()));
            }
            if !combo.experts.contains(&combo.tiebreaker) {
                return Err(Error::InvalidArgument(format!(
                    "tiebreaker {:?} is not in the subset {:?}",
                    combo.tiebreaker, combo.experts
                )));
            }
            let sub = table.subset(&combo.experts)?;
            let voted = vote(&sub, &combo.tiebreaker)?;
            score(&voted, gold, num_classes)
        })
        .collect()
}

/// Joins predictions to gold labels and builds a report.
pub fn score(pred: &BTreeMap<String, usize>, gold: &BTreeMap<String, usize>, num_classes: usize) -> Result<MetricReport> {
    let mut g = Vec::with_capacity(pred.len());
    let mut p = Vec::with_capacity(pred.len());
    for (utt, &label) in pred {
        let gl = gold.get(utt).ok_or_else(|| Error::InvalidRecord {
            record: format!("utterance {utt}"),
            message: "no gold label".into(),
        })?;
        g.push(*gl);
        p.push(label);
    }
    classification_report(&g, &p, num_classes)
}

use std::collections::BTreeMap;

use serde::Serialize;

use super::{class_counts, load_feature_matrix, Dataset};

/// One problem found while validating a dataset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Finding {
    pub conv_id: String,
    pub utt_id: String,
    pub modality: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SplitReport {
    pub conversations: usize,
    pub utterances: usize,
    pub labeled: usize,
    pub class_counts: Vec<usize>,
    pub missing_files: Vec<Finding>,
    pub unreadable_files: Vec<Finding>,
    pub dimension_inconsistencies: Vec<Finding>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub splits: BTreeMap<String, SplitReport>,
    /// Majority column count per modality across the whole dataset.
    pub modality_dims: BTreeMap<String, usize>,
}

impl ValidationReport {
    pub fn findings(&self) -> impl Iterator<Item = &Finding> {
        self.splits.values().flat_map(|s| {
            s.missing_files
                .iter()
                .chain(&s.unreadable_files)
                .chain(&s.dimension_inconsistencies)
        })
    }

    pub fn is_clean(&self) -> bool {
        self.findings().next().is_none()
    }
}

/// Loads every referenced feature file and reports what is wrong. Never fails;
/// problems are returned as findings.
pub fn validate_dataset(ds: &Dataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    // (split, conv, utt, modality, cols)
    let mut dims: Vec<(String, String, String, String, usize)> = Vec::new();

    for (split, convs) in &ds.splits {
        let mut sr = SplitReport {
            conversations: convs.len(),
            class_counts: class_counts(convs, ds.num_classes()),
            ..SplitReport::default()
        };
        for conv in convs {
            for u in &conv.utterances {
                sr.utterances += 1;
                if u.label.is_some() {
                    sr.labeled += 1;
                }
                for (modality, rel) in &u.features {
                    let path = ds.feature_path(rel);
                    let finding = |message: String| Finding {
                        conv_id: conv.conv_id.clone(),
                        utt_id: u.utt_id.clone(),
                        modality: modality.clone(),
                        message,
                    };
                    if !path.is_file() {
                        sr.missing_files
                            .push(finding(format!("missing file {}", path.display())));
                        continue;
                    }
                    match load_feature_matrix(&path) {
                        Ok(m) => dims.push((
                            split.clone(),
                            conv.conv_id.clone(),
                            u.utt_id.clone(),
                            modality.clone(),
                            m.cols(),
                        )),
                        Err(e) => sr.unreadable_files.push(finding(e.to_string())),
                    }
                }
            }
        }
        report.splits.insert(split.clone(), sr);
    }

    // The most common width per modality is the reference; ties go to the smaller width.
    let mut tallies: BTreeMap<&str, BTreeMap<usize, usize>> = BTreeMap::new();
    for (_, _, _, m, c) in &dims {
        *tallies.entry(m.as_str()).or_default().entry(*c).or_default() += 1;
    }
    for (m, t) in &tallies {
        let (&dim, _) = t
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .expect("non-empty tally");
        report.modality_dims.insert(m.to_string(), dim);
    }
    for (split, conv_id, utt_id, modality, cols) in dims {
        let expected = report.modality_dims[&modality];
        if cols != expected {
            report
                .splits
                .get_mut(&split)
                .expect("split present")
                .dimension_inconsistencies
                .push(Finding {
                    conv_id,
                    utt_id,
                    modality,
                    message: format!("feature width {cols}, modality width {expected}"),
                });
        }
    }
    report
}

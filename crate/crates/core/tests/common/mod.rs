//! Shared generators and independent oracles for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use erclab::ensemble::PredictionTable;
use erclab::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn labels(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..c)).collect()
}

/// Random probability rows bounded away from zero.
pub fn simplex_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let raw: Vec<f64> = (0..cols).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        for (c, v) in raw.iter().enumerate() {
            m[(r, c)] = v / s;
        }
    }
    m
}

/// Counts, per class, true positives, false positives and false negatives.
pub struct OracleReport {
    pub per_class_f1: Vec<f64>,
    pub weighted_f1: f64,
    pub macro_f1: f64,
    pub uar: f64,
    pub confusion: Vec<Vec<usize>>,
}

pub fn oracle_report(gold: &[usize], pred: &[usize], c: usize) -> OracleReport {
    let mut confusion = vec![vec![0usize; c]; c];
    for (&g, &p) in gold.iter().zip(pred) {
        confusion[g][p] += 1;
    }
    let mut f1 = vec![0.0; c];
    let mut weighted = 0.0;
    let mut macro_sum = 0.0;
    let mut macro_n = 0usize;
    let mut recall_sum = 0.0;
    let mut recall_n = 0usize;
    for k in 0..c {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (&g, &p) in gold.iter().zip(pred) {
            match (g == k, p == k) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        let denom = 2 * tp + fp + fn_;
        f1[k] = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
        let support = tp + fn_;
        weighted += support as f64 * f1[k];
        if support + fp > 0 {
            macro_sum += f1[k];
            macro_n += 1;
        }
        if support > 0 {
            recall_sum += tp as f64 / support as f64;
            recall_n += 1;
        }
    }
    OracleReport {
        per_class_f1: f1,
        weighted_f1: weighted / gold.len() as f64,
        macro_f1: macro_sum / macro_n.max(1) as f64,
        uar: recall_sum / recall_n.max(1) as f64,
        confusion,
    }
}

/// Straight double loop over anchors and candidates on normalised rows.
pub fn oracle_supcon(x: &Matrix, labels: &[usize], tau: f64, include_anchor: bool) -> Option<f64> {
    let b = x.rows();
    let z: Vec<Vec<f64>> = (0..b)
        .map(|i| {
            let n = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            x.row(i).iter().map(|v| v / n).collect()
        })
        .collect();
    let sim = |i: usize, j: usize| z[i].iter().zip(&z[j]).map(|(a, b)| a * b).sum::<f64>() / tau;
    let mut total = 0.0;
    let mut any = false;
    for a in 0..b {
        let positives: Vec<usize> = (0..b).filter(|&p| p != a && labels[p] == labels[a]).collect();
        if positives.is_empty() {
            continue;
        }
        any = true;
        let mut denom = 0.0;
        for q in 0..b {
            if q != a || include_anchor {
                denom += sim(a, q).exp();
            }
        }
        let mut s = 0.0;
        for &p in &positives {
            s += (sim(a, p).exp() / denom).ln();
        }
        total += -s / positives.len() as f64;
    }
    any.then_some(total)
}

/// Counts votes per label and applies the tie rule literally.
pub fn oracle_vote(votes: &[usize], tiebreaker_vote: usize) -> usize {
    let max_label = *votes.iter().max().unwrap();
    let mut counts = vec![0usize; max_label + 1];
    for &v in votes {
        counts[v] += 1;
    }
    let best = *counts.iter().max().unwrap();
    let tied: Vec<usize> = (0..counts.len()).filter(|&l| counts[l] == best).collect();
    if tied.len() > 1 && tied.contains(&tiebreaker_vote) {
        tiebreaker_vote
    } else {
        tied[0]
    }
}

/// Random table: `experts x utterances` labels.
pub fn random_table(rng: &mut ChaCha8Rng, experts: usize, utts: usize, classes: usize) -> (PredictionTable, Vec<Vec<usize>>) {
    let votes: Vec<Vec<usize>> = (0..experts).map(|_| labels(rng, utts, classes)).collect();
    let mut map = BTreeMap::new();
    for (e, v) in votes.iter().enumerate() {
        let m: BTreeMap<String, usize> = v.iter().enumerate().map(|(u, &l)| (format!("u{u:03}"), l)).collect();
        map.insert(format!("e{e}"), m);
    }
    (PredictionTable::from_map(map).unwrap(), votes)
}

/// Direct population-moment CCC.
pub fn oracle_ccc(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
    let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    2.0 * cov / (vx + vy + (mx - my).powi(2))
}

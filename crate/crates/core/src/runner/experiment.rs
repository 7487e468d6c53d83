//! Training runs, evaluation of prediction files and CSV-driven ensembling.
//!
//! Run directory layout:
//!
//! ```text
//! <output_dir>/config.lock.json   resolved config with the manifest hash
//! <output_dir>/seed.json          seed and manifest hash
//! <output_dir>/report.json        validation/test reports
//! <output_dir>/predictions.csv    one row per evaluated utterance
//! <output_dir>/checkpoint.bin     best parameters (mister, care_head)
//! <output_dir>/stage{1,2,3}/      per-stage parameters and caches (hcam)
//! ```
//!
//! Every file starts with or contains the seed and the manifest SHA-256.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{file_sha256, ExperimentConfig, Pipeline};
use super::io::{write_atomic, write_json};
use crate::care_head::{care_report, CareModel, CareSetup};
use crate::checkpoint::Checkpoint;
use crate::datamodel::{load_manifest, Dataset};
use crate::ensemble::{majority_vote, score, PredictionTable};
use crate::error::{Error, Result};
use crate::hcam::{hcam_predict, hcam_train, params_path, HcamData, HcamModel, HcamSetup, StageArtifacts};
use crate::metrics::{classification_report, MetricReport, SelectionMetric};
use crate::mister::{expert_reports, mister_predict, mister_train, ExpertReports, MisterModel, MisterSetup};
use crate::training::{load_split, EpochLog, LoadedConversation};

/// Contents of `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub pipeline: Pipeline,
    pub seed: u64,
    pub manifest_sha256: String,
    pub selection: SelectionMetric,
    pub best_epoch: usize,
    pub validation: MetricReport,
    #[serde(default)]
    pub test: Option<MetricReport>,
    /// Per-stage summaries of an HCAM run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<Vec<StageArtifacts>>,
    /// Expert-level reports of a MiSTER run, validation then test.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experts: Option<ExpertSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertSummary {
    pub validation: ExpertReports,
    #[serde(default)]
    pub test: Option<ExpertReports>,
}

struct Prepared {
    cfg: ExperimentConfig,
    ds: Dataset,
    manifest_sha256: String,
    train: Vec<LoadedConversation>,
    val: Vec<LoadedConversation>,
    test: Option<Vec<LoadedConversation>>,
    input_dims: Vec<usize>,
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let manifest_sha256 = file_sha256(&cfg.manifest)?;
    if let Some(expected) = &cfg.manifest_sha256 {
        if *expected != manifest_sha256 {
            return Err(Error::Config(format!(
                "manifest_sha256: {} hashes to {manifest_sha256}, config pins {expected}",
                cfg.manifest.display()
            )));
        }
    }
    let ds = load_manifest(&cfg.manifest)?;
    let train = load_split(&ds, &cfg.splits.train, &cfg.modalities)?;
    let val = load_split(&ds, &cfg.splits.val, &cfg.modalities)?;
    let test = match &cfg.splits.test {
        Some(name) => Some(load_split(&ds, name, &cfg.modalities)?),
        None => None,
    };
    let first = train
        .first()
        .ok_or_else(|| Error::Config(format!("splits.train: split {:?} is empty", cfg.splits.train)))?;
    let input_dims = cfg
        .modalities
        .iter()
        .map(|m| Ok(first.modality(m)?[0].cols()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        cfg: cfg.resolved(&manifest_sha256),
        ds,
        manifest_sha256,
        train,
        val,
        test,
        input_dims,
    })
}

/// One prediction row: utterance, label name and optional extra columns.
struct PredictionRow {
    utt_id: String,
    label: String,
    extra: Vec<f64>,
}

fn write_predictions(path: &Path, header: &[&str], rows: &[PredictionRow], seed: u64, manifest_sha256: &str) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.utt_id.clone(), r.label.clone()];
        rec.extend(r.extra.iter().map(|v| format!("{v:.6}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let body = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
    let mut out = format!("# seed={seed} manifest_sha256={manifest_sha256}\n").into_bytes();
    out.extend(body);
    write_atomic(path, &out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Csv(e.to_string())
}

fn checkpoint_meta(p: &Prepared, best_epoch: usize, validation: &MetricReport) -> Result<serde_json::Value> {
    Ok(serde_json::json!({
        "pipeline": p.cfg.pipeline.as_str(),
        "seed": p.cfg.seed,
        "manifest_sha256": p.manifest_sha256,
        "epoch": best_epoch,
        "validation": serde_json::to_value(validation)?,
        "config": serde_json::to_value(&p.cfg)?,
    }))
}

/// Adds provenance fields to an existing checkpoint's metadata.
fn stamp_checkpoint(path: &Path, p: &Prepared) -> Result<()> {
    let mut ck = Checkpoint::load(path)?;
    if let serde_json::Value::Object(m) = &mut ck.meta {
        m.insert("manifest_sha256".into(), p.manifest_sha256.clone().into());
        m.insert("config".into(), serde_json::to_value(&p.cfg)?);
    }
    ck.save(path)
}

/// Trains the configured pipeline and writes the run directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let p = prepare(cfg)?;
    let run = p.cfg.output_dir.clone();
    std::fs::create_dir_all(&run).map_err(|e| Error::io(&run, e))?;
    write_json(&run.join("config.lock.json"), &p.cfg)?;
    write_json(
        &run.join("seed.json"),
        &serde_json::json!({"seed": p.cfg.seed, "manifest_sha256": p.manifest_sha256}),
    )?;
    let (report, rows, header) = match p.cfg.pipeline {
        Pipeline::Hcam => run_hcam(&p, &run)?,
        Pipeline::Mister => run_mister(&p, &run)?,
        Pipeline::CareHead => run_care(&p, &run)?,
    };
    write_predictions(&run.join("predictions.csv"), &header, &rows, p.cfg.seed, &p.manifest_sha256)?;
    write_json(&run.join("report.json"), &report)?;
    Ok(report)
}

type Outcome = (RunReport, Vec<PredictionRow>, Vec<&'static str>);

fn base_report(p: &Prepared, best_epoch: usize, validation: MetricReport, test: Option<MetricReport>) -> RunReport {
    RunReport {
        pipeline: p.cfg.pipeline,
        seed: p.cfg.seed,
        manifest_sha256: p.manifest_sha256.clone(),
        selection: p.cfg.selection_metric(),
        best_epoch,
        validation,
        test,
        stages: None,
        experts: None,
        history: Vec::new(),
    }
}

/// Convs whose predictions are exported: test when configured, else val.
fn exported<'a>(p: &'a Prepared) -> &'a [LoadedConversation] {
    p.test.as_deref().unwrap_or(&p.val)
}

fn report_of(labels: &[Vec<usize>], convs: &[LoadedConversation], num_classes: usize) -> Result<MetricReport> {
    let mut gold = Vec::new();
    for c in convs {
        gold.extend(c.gold()?);
    }
    let pred: Vec<usize> = labels.iter().flatten().copied().collect();
    classification_report(&gold, &pred, num_classes)
}

fn hcam_setup(p: &Prepared) -> HcamSetup {
    let cfg = &p.cfg;
    HcamSetup {
        hcam: cfg.hcam.clone().expect("validated"),
        context: cfg.context.clone().expect("validated"),
        attention: cfg.attention.clone().expect("validated"),
        loss: cfg.loss.clone(),
        optimizer: cfg.optimizer.clone(),
        selection: cfg.selection_metric(),
        modalities: cfg.modalities.clone(),
        input_dims: p.input_dims.clone(),
        num_classes: p.ds.num_classes(),
        seed: cfg.seed,
    }
}

fn run_hcam(p: &Prepared, run: &Path) -> Result<Outcome> {
    let setup = hcam_setup(p);
    let extra = p.test.clone().unwrap_or_default();
    let data = HcamData {
        train: &p.train,
        val: &p.val,
        extra: &extra,
    };
    let stages = hcam_train(run, &setup, &data)?;
    for stage in [1u8, 2, 3] {
        let path = params_path(run, stage);
        if path.exists() {
            stamp_checkpoint(&path, p)?;
        }
    }
    let model = HcamModel::load(run, &setup)?;
    let c = setup.num_classes;
    let val_preds = hcam_predict(&model, &p.val)?;
    let validation = report_of(&val_preds.iter().map(|x| x.labels.clone()).collect::<Vec<_>>(), &p.val, c)?;
    let test = match &p.test {
        Some(t) => {
            let preds = hcam_predict(&model, t)?;
            Some(report_of(&preds.iter().map(|x| x.labels.clone()).collect::<Vec<_>>(), t, c)?)
        }
        None => None,
    };
    let rows = hcam_predict(&model, exported(p))?
        .into_iter()
        .flat_map(|cp| {
            cp.utt_ids
                .into_iter()
                .zip(cp.labels)
                .map(|(u, l)| PredictionRow {
                    utt_id: u,
                    label: p.ds.labelset.name(l).to_string(),
                    extra: Vec::new(),
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let best_epoch = stages.last().map(|s| s.best_epoch).unwrap_or(0);
    let mut report = base_report(p, best_epoch, validation, test);
    report.stages = Some(stages);
    Ok((report, rows, vec!["utt_id", "pred_label"]))
}

fn mister_setup(p: &Prepared) -> MisterSetup {
    let cfg = &p.cfg;
    MisterSetup {
        mister: cfg.mister.clone().expect("validated"),
        context: cfg.context.clone().expect("validated"),
        attention: cfg.attention.clone().expect("validated"),
        loss: cfg.loss.clone(),
        optimizer: cfg.optimizer.clone(),
        selection: cfg.selection_metric(),
        modalities: cfg.modalities.clone(),
        input_dims: p.input_dims.clone(),
        num_classes: p.ds.num_classes(),
        seed: cfg.seed,
    }
}

fn run_mister(p: &Prepared, run: &Path) -> Result<Outcome> {
    let setup = mister_setup(p);
    let c = setup.num_classes;
    let mut model = MisterModel::init(&setup)?;
    let fit = mister_train(&mut model, &p.train, &p.val)?;
    Checkpoint::from_stores(checkpoint_meta(p, fit.best_epoch, &fit.best_report)?, &[&model.store])?
        .save(&run.join("checkpoint.bin"))?;
    let val_experts = expert_reports(&mister_predict(&model, &p.val)?, &p.val, c)?;
    let test_experts = match &p.test {
        Some(t) => Some(expert_reports(&mister_predict(&model, t)?, t, c)?),
        None => None,
    };
    let mut rows = Vec::new();
    for cp in mister_predict(&model, exported(p))? {
        for (i, (u, l)) in cp.utt_ids.iter().zip(&cp.labels).enumerate() {
            rows.push(PredictionRow {
                utt_id: u.clone(),
                label: p.ds.labelset.name(*l).to_string(),
                extra: cp.gate.row(i).to_vec(),
            });
        }
    }
    let mut report = base_report(
        p,
        fit.best_epoch,
        val_experts.fused.clone(),
        test_experts.as_ref().map(|t| t.fused.clone()),
    );
    report.experts = Some(ExpertSummary {
        validation: val_experts,
        test: test_experts,
    });
    report.history = fit.history;
    Ok((report, rows, vec!["utt_id", "pred_label", "beta_s", "beta_t", "beta_m"]))
}

fn run_care(p: &Prepared, run: &Path) -> Result<Outcome> {
    let cfg = &p.cfg;
    let care = cfg.care_head.clone().expect("validated");
    if p.input_dims[0] == 0 {
        return Err(Error::Config("care_head: empty feature width".into()));
    }
    let setup = CareSetup {
        care,
        loss: cfg.loss.clone(),
        optimizer: cfg.optimizer.clone(),
        selection: cfg.selection_metric(),
        modality: cfg.modalities[0].clone(),
        input_dim: p.input_dims[0],
        num_classes: p.ds.num_classes(),
        seed: cfg.seed,
    };
    let mut model = CareModel::init(&setup)?;
    let fit = crate::care_head::care_train(&mut model, &p.train, &p.val)?;
    Checkpoint::from_stores(checkpoint_meta(p, fit.best_epoch, &fit.best_report)?, &[&model.store])?
        .save(&run.join("checkpoint.bin"))?;
    let validation = care_report(&model, &p.val)?;
    let test = match &p.test {
        Some(t) => Some(care_report(&model, t)?),
        None => None,
    };
    let mut rows = Vec::new();
    for conv in exported(p) {
        for (u, l) in conv.utt_ids.iter().zip(model.logits(conv)?.argmax_rows()) {
            rows.push(PredictionRow {
                utt_id: u.clone(),
                label: p.ds.labelset.name(l).to_string(),
                extra: Vec::new(),
            });
        }
    }
    let mut report = base_report(p, fit.best_epoch, validation, test);
    report.history = fit.history;
    Ok((report, rows, vec!["utt_id", "pred_label"]))
}

// ---------------------------------------------------------------- repeats

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation (`n − 1` denominator); `None` for one run.
    pub stdev: Option<f64>,
}

pub fn aggregate(values: &[f64]) -> Aggregate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let stdev = (values.len() > 1)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Aggregate { mean, stdev }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub manifest_sha256: String,
    pub seeds: Vec<u64>,
    /// Metric name to aggregate over repeats, for the test split when
    /// configured and the validation split otherwise.
    pub metrics: BTreeMap<String, Aggregate>,
}

/// Runs `n` repeats with seeds `seed, seed + 1, ...` in `repeat_<k>`
/// subdirectories and writes `summary.json`.
pub fn run_repeats(cfg: &ExperimentConfig, n: usize) -> Result<RepeatSummary> {
    if n == 0 {
        return Err(Error::InvalidArgument("--repeats must be at least 1".into()));
    }
    let mut reports = Vec::with_capacity(n);
    for k in 0..n {
        let mut c = cfg.clone();
        c.seed = cfg.seed + k as u64;
        c.output_dir = cfg.output_dir.join(format!("repeat_{k}"));
        reports.push(run_experiment(&c)?);
    }
    let pick = |r: &RunReport| r.test.clone().unwrap_or_else(|| r.validation.clone());
    let mut metrics = BTreeMap::new();
    for (name, f) in [
        ("weighted_f1", (|r: &MetricReport| r.weighted_f1) as fn(&MetricReport) -> f64),
        ("macro_f1", |r| r.macro_f1),
        ("uar", |r| r.uar),
    ] {
        let vals: Vec<f64> = reports.iter().map(|r| f(&pick(r))).collect();
        metrics.insert(name.to_string(), aggregate(&vals));
    }
    let summary = RepeatSummary {
        manifest_sha256: reports[0].manifest_sha256.clone(),
        seeds: reports.iter().map(|r| r.seed).collect(),
        metrics,
    };
    write_json(&cfg.output_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------- prediction files

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(f))
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers.iter().position(|h| h == name).ok_or_else(|| Error::InvalidRecord {
        record: path.display().to_string(),
        message: format!("missing column {name:?}"),
    })
}

fn label_index(ds: &Dataset, label: &str, utt: &str) -> Result<usize> {
    ds.labelset.index_of(label).ok_or_else(|| Error::UnknownLabel {
        utt_id: utt.to_string(),
        label: label.to_string(),
    })
}

/// Gold labels of every utterance in the manifest, `None` when unlabeled.
fn gold_map(ds: &Dataset) -> BTreeMap<String, Option<usize>> {
    ds.utterances().map(|(_, _, u)| (u.utt_id.clone(), u.label)).collect()
}

fn labeled_gold(gold: &BTreeMap<String, Option<usize>>, utt: &str) -> Result<usize> {
    match gold.get(utt) {
        None => Err(Error::InvalidRecord {
            record: format!("prediction {utt}"),
            message: "utt_id not in manifest".into(),
        }),
        Some(None) => Err(Error::InvalidRecord {
            record: format!("prediction {utt}"),
            message: "utterance has no gold label".into(),
        }),
        Some(Some(l)) => Ok(*l),
    }
}

/// Reads `utt_id,pred_label[,...]` and scores it against the manifest.
pub fn evaluate(predictions: &Path, manifest: &Path) -> Result<MetricReport> {
    let ds = load_manifest(manifest)?;
    let gold = gold_map(&ds);
    let mut rdr = open_csv(predictions)?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let u_col = column(&headers, "utt_id", predictions)?;
    let l_col = column(&headers, "pred_label", predictions)?;
    let mut seen = std::collections::BTreeSet::new();
    let (mut g, mut p) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let utt = &rec[u_col];
        if !seen.insert(utt.to_string()) {
            return Err(Error::DuplicateId {
                kind: "prediction",
                id: utt.to_string(),
            });
        }
        g.push(labeled_gold(&gold, utt)?);
        p.push(label_index(&ds, &rec[l_col], utt)?);
    }
    classification_report(&g, &p, ds.num_classes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOutcome {
    pub tiebreaker: String,
    pub manifest_sha256: String,
    /// Voted label name per utterance.
    pub predictions: BTreeMap<String, String>,
    pub report: MetricReport,
    pub experts: BTreeMap<String, MetricReport>,
}

/// Loads `utt_id,expert_id,pred_label` rows into a table.
pub fn read_prediction_table(path: &Path, ds: &Dataset) -> Result<PredictionTable> {
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let u_col = column(&headers, "utt_id", path)?;
    let e_col = column(&headers, "expert_id", path)?;
    let l_col = column(&headers, "pred_label", path)?;
    let mut table = PredictionTable::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let utt = &rec[u_col];
        table.insert(&rec[e_col], utt, label_index(ds, &rec[l_col], utt)?)?;
    }
    table.check_coverage()?;
    Ok(table)
}

/// Majority vote over a prediction CSV, scored against the manifest.
pub fn ensemble_from_csv(predictions: &Path, tiebreaker: &str, manifest: &Path) -> Result<EnsembleOutcome> {
    let ds = load_manifest(manifest)?;
    let table = read_prediction_table(predictions, &ds)?;
    let voted = majority_vote(&table, tiebreaker)?;
    let gold_all = gold_map(&ds);
    let mut gold = BTreeMap::new();
    for utt in voted.keys() {
        gold.insert(utt.clone(), labeled_gold(&gold_all, utt)?);
    }
    let report = score(&voted, &gold, ds.num_classes())?;
    let mut experts = BTreeMap::new();
    for e in table.experts() {
        experts.insert(e.to_string(), score(table.predictions(e).expect("listed"), &gold, ds.num_classes())?);
    }
    Ok(EnsembleOutcome {
        tiebreaker: tiebreaker.to_string(),
        manifest_sha256: file_sha256(manifest)?,
        predictions: voted
            .into_iter()
            .map(|(u, l)| (u, ds.labelset.name(l).to_string()))
            .collect(),
        report,
        experts,
    })
}

/// Writes voted predictions as `utt_id,pred_label` under a provenance comment.
pub fn write_voted(path: &Path, outcome: &EnsembleOutcome) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(["utt_id", "pred_label"]).map_err(csv_err)?;
    for (u, l) in &outcome.predictions {
        w.write_record([u, l]).map_err(csv_err)?;
    }
    let mut out = format!("# manifest_sha256={} tiebreaker={}\n", outcome.manifest_sha256, outcome.tiebreaker).into_bytes();
    out.extend(w.into_inner().map_err(|e| Error::Csv(e.to_string()))?);
    write_atomic(path, &out)
}

/// Report of an `evaluate` call together with the manifest it was scored against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub manifest_sha256: String,
    pub report: MetricReport,
}

/// `evaluate` plus the manifest hash.
pub fn evaluate_with_provenance(predictions: &Path, manifest: &Path) -> Result<EvalOutput> {
    Ok(EvalOutput {
        report: evaluate(predictions, manifest)?,
        manifest_sha256: file_sha256(manifest)?,
    })
}

/// Default location of a run's report.
pub fn report_path(run: &Path) -> PathBuf {
    run.join("report.json")
}

//! `erclab` command-line interface.
//!
//! Exit codes: 0 on success, 2 on invalid input (config, manifest, arguments,
//! prediction files, input paths missing at launch), 1 on runtime failure.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use erclab::datamodel::load_feature_matrix;
use erclab::runner::config::ExperimentConfig;
use erclab::runner::experiment::{ensemble_from_csv, evaluate_with_provenance, run_experiment, run_repeats, write_voted};
use erclab::runner::io::write_json;
use erclab::runner::synth::{generate_synthetic_corpus, SynthKind, SynthSizes};

#[derive(Parser)]
#[command(name = "erclab", version, about = "Emotion recognition in conversations: training, evaluation and ensembling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the pipeline described by a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Independent runs with consecutive seeds; reports mean and sample stdev.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Score a `utt_id,pred_label` CSV against manifest gold labels.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Also write the report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Majority vote over a `utt_id,expert_id,pred_label` CSV.
    Ensemble {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        tiebreaker: String,
        #[arg(long)]
        manifest: PathBuf,
        /// Write voted predictions as `utt_id,pred_label`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic corpus.
    Synth {
        /// context_dependent, modality_imbalanced or separable.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the shape and summary statistics of an EMF1 feature file.
    Inspect {
        #[arg(long)]
        feature: PathBuf,
    },
}

/// A closed stdout (e.g. piped into `head`) is not an error.
fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    match writeln!(std::io::stdout(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

/// Input paths named on the command line must exist at launch.
fn require_inputs(paths: &[&PathBuf]) -> Result<()> {
    for p in paths {
        if !p.is_file() {
            return Err(erclab::Error::InvalidArgument(format!("{}: no such file", p.display())).into());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train { config, .. } => require_inputs(&[config])?,
        Command::Eval { predictions, manifest, .. } | Command::Ensemble { predictions, manifest, .. } => {
            require_inputs(&[predictions, manifest])?
        }
        Command::Inspect { feature } => require_inputs(&[feature])?,
        Command::Synth { .. } => {}
    }
    match cli.command {
        Command::Train { config, repeats } => {
            let cfg = ExperimentConfig::load(&config)?;
            if repeats > 1 {
                print_json(&run_repeats(&cfg, repeats)?)?;
            } else {
                let report = run_experiment(&cfg)?;
                print_json(&serde_json::json!({
                    "run_dir": cfg.output_dir,
                    "seed": report.seed,
                    "manifest_sha256": report.manifest_sha256,
                    "best_epoch": report.best_epoch,
                    "validation_weighted_f1": report.validation.weighted_f1,
                    "test_weighted_f1": report.test.as_ref().map(|t| t.weighted_f1),
                }))?;
            }
        }
        Command::Eval {
            predictions,
            manifest,
            out,
        } => {
            let result = evaluate_with_provenance(&predictions, &manifest)?;
            if let Some(out) = out {
                write_json(&out, &result)?;
            }
            print_json(&result)?;
        }
        Command::Ensemble {
            predictions,
            tiebreaker,
            manifest,
            out,
        } => {
            let outcome = ensemble_from_csv(&predictions, &tiebreaker, &manifest)?;
            if let Some(out) = out {
                write_voted(&out, &outcome)?;
            }
            print_json(&serde_json::json!({
                "tiebreaker": outcome.tiebreaker,
                "manifest_sha256": outcome.manifest_sha256,
                "report": outcome.report,
                "experts": outcome.experts,
            }))?;
        }
        Command::Synth { kind, seed, out } => {
            let kind: SynthKind = kind.parse()?;
            let ds = generate_synthetic_corpus(kind, seed, &SynthSizes::default_for(kind), &out)
                .with_context(|| format!("writing corpus to {}", out.display()))?;
            let sizes: Vec<(String, usize)> = ds.splits.iter().map(|(k, v)| (k.clone(), v.len())).collect();
            print_json(&serde_json::json!({
                "manifest": out.join("manifest.json"),
                "classes": ds.labelset.names(),
                "conversations": sizes.into_iter().collect::<std::collections::BTreeMap<_, _>>(),
            }))?;
        }
        Command::Inspect { feature } => {
            let m = load_feature_matrix(&feature)?;
            let v = m.values();
            let n = v.len() as f64;
            let mean = v.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
            let var = v.iter().map(|&x| (f64::from(x) - mean).powi(2)).sum::<f64>() / n;
            print_json(&serde_json::json!({
                "rows": m.rows(),
                "cols": m.cols(),
                "min": v.iter().copied().fold(f32::INFINITY, f32::min),
                "max": v.iter().copied().fold(f32::NEG_INFINITY, f32::max),
                "mean": mean,
                "std": var.sqrt(),
            }))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // error sources already embedded in their parent's message are skipped
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.ends_with(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            let validation = e
                .chain()
                .find_map(|c| c.downcast_ref::<erclab::Error>())
                .is_some_and(erclab::Error::is_validation);
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}

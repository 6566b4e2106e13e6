//! `pole` — weakly supervised CAM training with prompt class selection.
//!
//! Exit codes: 0 on success, 2 on configuration or data-ingestion errors,
//! 3 on numeric failures during optimization, 1 otherwise.

use clap::{Parser, Subcommand};
use pole_cli::config::{Overrides, RunConfig};
use pole_cli::toy::ToyParams;
use pole_cli::{evalcams, report, toy, trainer};
use pole_core::prompt::load_pools;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "pole", version, about = "CAM training with per-image prompt class selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a synonym pool file and print its contents.
    IngestSynonyms {
        /// Path to the JSON pool file.
        path: PathBuf,
        /// Optionally write the validated, normalized pools back out.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic blob dataset with reference masks, a synonym
    /// file, and a ready-to-run training config.
    MakeToy {
        #[arg(long)]
        out: PathBuf,
        /// Number of images.
        #[arg(long, default_value_t = 64)]
        count: usize,
        /// Number of classes.
        #[arg(long, default_value_t = 3)]
        classes: usize,
        /// Square image size in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Run class-token selection over a dataset and dump NDJSON records.
    Select {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to take weights from; omitted = freshly initialized.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output NDJSON path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train under a configuration, checkpointing every epoch.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from a checkpoint written under the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint: CAM dumps, pseudo-masks, and mIoU.
    EvalCams {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Row label used in reports.
        #[arg(long, default_value = "run")]
        label: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Aggregate eval reports and selection dumps into tables and CSVs.
    Report {
        /// eval.json files from eval-cams runs.
        #[arg(long = "eval")]
        evals: Vec<PathBuf>,
        /// NDJSON dumps from select runs.
        #[arg(long = "selections")]
        selections: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> pole_core::Result<()> {
    match cli.command {
        Command::IngestSynonyms { path, out } => {
            let pools = load_pools(&path)?;
            println!("{} classes ingested from {}", pools.len(), path.display());
            for pool in pools.values() {
                println!(
                    "  [{:2}] {:<14} m={} ({})",
                    pool.class_index,
                    pool.ground_truth_name,
                    pool.m(),
                    pool.synonyms.join(", ")
                );
            }
            if let Some(out) = out {
                let entries: Vec<serde_json::Value> = pools
                    .values()
                    .map(|p| {
                        serde_json::json!({
                            "class": p.ground_truth_name,
                            "class_index": p.class_index,
                            "synonyms": p.synonyms,
                            "corpus": p.corpus_tag,
                        })
                    })
                    .collect();
                std::fs::write(&out, serde_json::to_string_pretty(&entries).unwrap())
                    .map_err(|e| pole_core::Error::config(format!("cannot write {}: {e}", out.display())))?;
                println!("normalized pools written to {}", out.display());
            }
            Ok(())
        }
        Command::MakeToy {
            out,
            count,
            classes,
            size,
            seed,
        } => {
            let params = ToyParams {
                count,
                num_classes: classes,
                size,
                seed,
            };
            toy::write_dataset(&out, &params)?;
            println!(
                "toy dataset: {count} images, {classes} classes, {size}x{size}, seed {seed} -> {}",
                out.display()
            );
            println!("train with: pole train --config {}", out.join("config.toml").display());
            Ok(())
        }
        Command::Select {
            config,
            checkpoint,
            out,
            overrides,
        } => {
            let cfg = overrides.apply(RunConfig::load(&config)?)?;
            let comps = trainer::build_components(&cfg)?;
            let state = match checkpoint {
                Some(path) => {
                    let (state, hash) = pole_cli::checkpoint::load(&path)?;
                    if hash != cfg.semantic_hash() {
                        return Err(pole_core::Error::config(format!(
                            "checkpoint {} does not match this configuration",
                            path.display()
                        )));
                    }
                    state
                }
                None => trainer::init_state(&cfg, comps.dataset.num_classes())?,
            };
            let records = trainer::select_over_dataset(&cfg, &comps, &state)?;
            let dump: String = records.iter().map(|r| r.to_json_line() + "\n").collect();
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent).ok();
            }
            std::fs::write(&out, dump)
                .map_err(|e| pole_core::Error::config(format!("cannot write {}: {e}", out.display())))?;
            let ground: usize = records.iter().filter(|r| r.chosen_index == 0).count();
            println!(
                "{} selection records ({} chose the ground-truth token) -> {}",
                records.len(),
                ground,
                out.display()
            );
            comps.encoder.persist_cache()?;
            Ok(())
        }
        Command::Train {
            config,
            resume,
            overrides,
        } => {
            let cfg = overrides.apply(RunConfig::load(&config)?)?;
            let report = trainer::train(&cfg, resume.as_deref())?;
            println!(
                "trained {} steps: total loss {:.6} -> {:.6}",
                report.steps, report.first_total, report.last_total
            );
            println!("final checkpoint: {}", report.final_checkpoint.display());
            println!("loss curve: {}", report.out_dir.join("loss.csv").display());
            Ok(())
        }
        Command::EvalCams {
            config,
            checkpoint,
            out,
            label,
            overrides,
        } => {
            let cfg = overrides.apply(RunConfig::load(&config)?)?;
            let outcome = evalcams::eval_cams(&cfg, &checkpoint, &out, &label)?;
            match &outcome.report {
                Some(report) => {
                    println!("mIoU {:.4} over {} classes (+background)", report.miou, report.per_class_iou.len() - 1);
                    println!("eval report: {}", out.join("eval.json").display());
                }
                None => println!("dumps written (no reference masks, evaluation skipped)"),
            }
            Ok(())
        }
        Command::Report {
            evals,
            selections,
            out,
        } => {
            let paths = report::report(&evals, &selections, &out)?;
            if !paths.table.is_empty() {
                print!("{}", paths.table);
            }
            for p in paths
                .comparison_csv
                .iter()
                .chain(paths.sweep_csv.iter())
                .chain(paths.frequency_csvs.iter())
            {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                pole_core::Error::Config(_) | pole_core::Error::Ingest { .. } => ExitCode::from(2),
                pole_core::Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

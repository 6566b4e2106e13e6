//! Cross-run reporting: a prompt-strategy comparison table, per-class
//! ground-truth-selection frequencies, and the pool-size sweep curve.

use crate::evalcams::EvalFile;
use pole_core::selector::{selection_frequency, SelectionRecord};
use pole_core::{Error, Real, Result};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub struct ReportPaths {
    pub comparison_csv: Option<PathBuf>,
    pub sweep_csv: Option<PathBuf>,
    pub frequency_csvs: Vec<PathBuf>,
    /// The comparison table rendered for the terminal.
    pub table: String,
}

fn load_eval(path: &Path) -> Result<EvalFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::argument(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::argument(format!("cannot parse {}: {e}", path.display())))
}

fn load_selections(path: &Path) -> Result<Vec<SelectionRecord<Real>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::argument(format!("cannot read {}: {e}", path.display())))?;
    let records = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(SelectionRecord::from_json_line)
        .collect::<Result<Vec<_>>>()?;
    if records.is_empty() {
        return Err(Error::argument(format!(
            "selection dump {} holds no records",
            path.display()
        )));
    }
    Ok(records)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(|e| Error::config(format!("cannot write {}: {e}", path.display())))
}

/// Build every report the inputs allow. At least one input must be given.
pub fn report(eval_paths: &[PathBuf], selection_paths: &[PathBuf], out_dir: &Path) -> Result<ReportPaths> {
    if eval_paths.is_empty() && selection_paths.is_empty() {
        return Err(Error::argument(
            "report needs at least one eval report or selection dump",
        ));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::config(format!("cannot create {}: {e}", out_dir.display())))?;

    let mut table = String::new();
    let mut comparison_csv = None;
    let mut sweep_csv = None;

    if !eval_paths.is_empty() {
        let mut evals: Vec<EvalFile> = eval_paths.iter().map(|p| load_eval(p)).collect::<Result<_>>()?;
        evals.sort_by(|a, b| {
            (a.run.pool_size, a.run.label.clone()).cmp(&(b.run.pool_size, b.run.label.clone()))
        });

        // prompt-strategy comparison: one row per run
        writeln!(table, "| run | pool size | gate mode | mIoU |").unwrap();
        writeln!(table, "|-----|-----------|-----------|------|").unwrap();
        let mut csv = String::from("label,pool_size,gate_mode,miou\n");
        for e in &evals {
            writeln!(
                table,
                "| {} | {} | {} | {:.4} |",
                e.run.label, e.run.pool_size, e.run.gate_mode, e.report.miou
            )
            .unwrap();
            writeln!(
                csv,
                "{},{},{},{}",
                e.run.label, e.run.pool_size, e.run.gate_mode, e.report.miou
            )
            .unwrap();
        }
        let path = out_dir.join("comparison.csv");
        write_text(&path, &csv)?;
        comparison_csv = Some(path);

        // pool-size sweep, ascending
        let mut sweep = String::from("pool_size,label,miou\n");
        for e in &evals {
            writeln!(sweep, "{},{},{}", e.run.pool_size, e.run.label, e.report.miou).unwrap();
        }
        let path = out_dir.join("sweep.csv");
        write_text(&path, &sweep)?;
        sweep_csv = Some(path);
    }

    let mut frequency_csvs = Vec::new();
    for sel_path in selection_paths {
        let records = load_selections(sel_path)?;
        let num_classes = records.iter().map(|r| r.class_index).max().unwrap() + 1;
        let freqs = selection_frequency(&records, num_classes)?;
        let mut counts = vec![0usize; num_classes];
        for r in &records {
            counts[r.class_index] += 1;
        }
        let mut csv = String::from("class_index,records,ground_truth_fraction\n");
        for (k, freq) in freqs.iter().enumerate() {
            match freq {
                Some(f) => writeln!(csv, "{k},{},{f}", counts[k]).unwrap(),
                None => writeln!(csv, "{k},0,absent").unwrap(),
            }
        }
        let stem = sel_path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "selections".into());
        let path = out_dir.join(format!("gt_frequency_{stem}.csv"));
        write_text(&path, &csv)?;
        frequency_csvs.push(path);
    }

    Ok(ReportPaths {
        comparison_csv,
        sweep_csv,
        frequency_csvs,
        table,
    })
}

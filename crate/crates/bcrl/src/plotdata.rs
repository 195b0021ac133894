//! Long-format tables for plotting, gathered from every finished run under
//! a root directory.
//!
//! A run directory is a direct child of the root holding `config.toml`.
//! Hidden partial directories and `quarantine/` are skipped.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{HarnessError, Result};
use crate::experiment::RunReport;
use crate::files::write_atomic;

#[derive(Serialize)]
struct IterationRow<'a> {
    config_hash: &'a str,
    method: &'a str,
    seed: u64,
    iteration: usize,
    estimate: f64,
    truth: f64,
    abs_error: f64,
}

#[derive(Serialize)]
struct SpectrumRow<'a> {
    config_hash: &'a str,
    method: &'a str,
    seed: u64,
    index: usize,
    eigenvalue: f64,
}

#[derive(Serialize)]
struct SliceRow<'a> {
    config_hash: &'a str,
    method: &'a str,
    seed: u64,
    slice: usize,
    estimate: f64,
    truth: f64,
    abs_error: f64,
}

const ITERATION_COLUMNS: [&str; 7] = ["config_hash", "method", "seed", "iteration", "estimate", "truth", "abs_error"];
const SPECTRUM_COLUMNS: [&str; 5] = ["config_hash", "method", "seed", "index", "eigenvalue"];
const SLICE_COLUMNS: [&str; 7] = ["config_hash", "method", "seed", "slice", "estimate", "truth", "abs_error"];

/// Run directories under `root`, sorted by name.
pub fn run_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(root).map_err(|e| HarnessError::io(root, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .flatten()
        .map(|e| e.path())
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            p.is_dir() && !name.starts_with('.') && name != "quarantine" && name != "plotdata" && p.join("config.toml").is_file()
        })
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn table<T: Serialize>(rows: &[T], header: &[&str]) -> Result<Vec<u8>> {
    let fail = |e: &dyn std::fmt::Display| HarnessError::Numeric(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(header).map_err(|e| fail(&e))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| fail(&e))?;
    }
    w.into_inner().map_err(|e| fail(&e))
}

/// Writes `<root>/plotdata/{ope_vs_iteration,spectra,slices}.csv`.
///
/// Every run directory must hold a `report.json`; otherwise nothing is
/// written and all missing files are listed. A root without runs yields
/// header-only tables.
pub fn emit_plotdata(root: &Path) -> Result<PathBuf> {
    let dirs = run_dirs(root)?;
    let missing: Vec<String> =
        dirs.iter().map(|d| d.join("report.json")).filter(|p| !p.is_file()).map(|p| p.display().to_string()).collect();
    if !missing.is_empty() {
        return Err(HarnessError::MissingInputs(missing));
    }
    let mut reports = Vec::with_capacity(dirs.len());
    for d in &dirs {
        let path = d.join("report.json");
        let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
        let report: RunReport = serde_json::from_str(&text).map_err(|e| HarnessError::format(&path, e.to_string()))?;
        reports.push(report);
    }

    let (mut iterations, mut spectra, mut slices) = (Vec::new(), Vec::new(), Vec::new());
    for report in &reports {
        for r in &report.records {
            let base = (report.config_hash.as_str(), r.method.as_str(), r.seed);
            for (k, &estimate) in r.iterates.iter().enumerate() {
                iterations.push(IterationRow {
                    config_hash: base.0,
                    method: base.1,
                    seed: base.2,
                    iteration: k,
                    estimate,
                    truth: r.exact_value,
                    abs_error: (estimate - r.exact_value).abs(),
                });
            }
            if let Some(c) = &r.covariance {
                for (index, &eigenvalue) in c.eigenvalues.iter().enumerate() {
                    spectra.push(SpectrumRow { config_hash: base.0, method: base.1, seed: base.2, index, eigenvalue });
                }
            }
            for s in &r.slices {
                slices.push(SliceRow {
                    config_hash: base.0,
                    method: base.1,
                    seed: base.2,
                    slice: s.slice,
                    estimate: s.estimate,
                    truth: s.truth,
                    abs_error: s.abs_error,
                });
            }
        }
    }
    let out = root.join("plotdata");
    write_atomic(&out.join("ope_vs_iteration.csv"), &table(&iterations, &ITERATION_COLUMNS)?)?;
    write_atomic(&out.join("spectra.csv"), &table(&spectra, &SPECTRUM_COLUMNS)?)?;
    write_atomic(&out.join("slices.csv"), &table(&slices, &SLICE_COLUMNS)?)?;
    Ok(out)
}

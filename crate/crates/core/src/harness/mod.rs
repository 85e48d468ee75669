//! Configuration, experiment runs, sweeps and report files.

mod config;
mod experiment;
mod report;
mod sweep;

pub use config::{Config, DataConfig, Method, KEYS};
pub use experiment::{execute, prepare_data, run_experiment, synthetic_splits, write_splits, ExperimentData, SPLIT_FILES};
pub use report::{
    emit_report, final_global_row, render_csv, render_summary, CONFIG_FILE, CSV_FILE, CSV_HEADER,
    SUMMARY_FILE,
};
pub use sweep::{
    cell_metrics, mean_std, method_table, preset, render_cells_csv, render_combined, run_sweep, Axis,
    CellKey, CellResult, SweepPlan, PRESETS, PRESET_DEFAULTS, SWEEP_CSV, SWEEP_MD,
};

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::MetricRecord;

fn find_csvs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = entries
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    paths.sort();
    for p in paths {
        if p.is_dir() {
            find_csvs(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == CSV_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

/// Final global metrics of every run found under `dir`, keyed by the run's
/// relative directory.
pub fn collect_runs(dir: &Path) -> Result<Vec<(String, MetricRecord)>> {
    let mut csvs = Vec::new();
    find_csvs(dir, &mut csvs)?;
    let mut rows = Vec::new();
    for path in csvs {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        if let Some((_, rec)) = final_global_row(&text)? {
            let rel = path
                .parent()
                .and_then(|p| p.strip_prefix(dir).ok())
                .map(|p| p.display().to_string())
                .filter(|s| !s.is_empty())
                .unwrap_or_else(|| ".".into());
            rows.push((rel, rec));
        }
    }
    Ok(rows)
}

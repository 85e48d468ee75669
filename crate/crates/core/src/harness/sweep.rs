use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::config::{Config, Method};
use super::experiment::execute;
use super::report::{emit_report, metric_cells, num, TABLE_HEAD};
use crate::error::{Error, Result};
use crate::federation::FairnessReport;
use crate::metrics::MetricRecord;
use crate::numerics::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Alpha,
    Clients,
    Method,
}

impl Axis {
    pub fn key(self) -> &'static str {
        match self {
            Axis::Alpha => "alpha",
            Axis::Clients => "clients",
            Axis::Method => "method",
        }
    }
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(Axis::Alpha),
            "clients" => Ok(Axis::Clients),
            "method" => Ok(Axis::Method),
            _ => Err(Error::invalid(format!("unknown sweep axis `{s}` (alpha, clients, method)"))),
        }
    }
}

/// A grid of runs: every method in `methods` at every axis value, repeated.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPlan {
    pub axis: Axis,
    pub values: Vec<String>,
    /// Row methods; ignored when sweeping the method axis itself.
    pub methods: Vec<Method>,
    pub repeats: usize,
    /// Config values the preset starts from; a config file or flags still
    /// override them.
    pub defaults: Vec<(String, String)>,
}

pub const PRESETS: [&str; 4] = ["table1", "table2", "table3_4", "table5"];

/// Schedule used by the presets: lr from the grid {1e-4, 2e-4, 5e-4} and
/// local steps from {10, 20}. The plain default stays at lr 2e-4.
pub const PRESET_DEFAULTS: [(&str, &str); 4] = [
    ("lr", "0.0005"),
    ("local_steps", "20"),
    ("refine_steps", "60"),
    ("refine_lr", "0.001"),
];

pub fn preset(name: &str) -> Result<SweepPlan> {
    let strings = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
    let plan = match name {
        "table1" => SweepPlan {
            axis: Axis::Method,
            values: strings(&["fvlfp", "fedavg_baseline"]),
            methods: vec![],
            repeats: 3,
            defaults: vec![],
        },
        "table2" => SweepPlan {
            axis: Axis::Method,
            values: strings(&["fvlfp", "w/o-cdfp", "w/o-dsop", "w/o-fpf"]),
            methods: vec![],
            repeats: 3,
            defaults: vec![],
        },
        "table3_4" => SweepPlan {
            axis: Axis::Alpha,
            values: strings(&["100", "1", "0.5", "0.1"]),
            methods: vec![Method::Fvlfp, Method::FedavgBaseline],
            repeats: 3,
            defaults: vec![],
        },
        "table5" => SweepPlan {
            axis: Axis::Clients,
            values: strings(&["5", "10", "20", "40"]),
            methods: vec![Method::Fvlfp],
            repeats: 3,
            defaults: vec![],
        },
        _ => {
            return Err(Error::invalid(format!(
                "unknown preset `{name}`; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(SweepPlan {
        defaults: PRESET_DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        ..plan
    })
}

/// One cell of a sweep: which row, which value, which repeat.
#[derive(Clone, Debug, PartialEq)]
pub struct CellKey {
    pub method: Method,
    pub value: String,
    pub repeat: usize,
}

impl SweepPlan {
    /// The default config with the preset's own defaults applied.
    pub fn base_config(&self) -> Result<Config> {
        let mut cfg = Config::default();
        for (k, v) in &self.defaults {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn rows(&self, base: &Config) -> Vec<Method> {
        if self.axis == Axis::Method || self.methods.is_empty() {
            vec![base.method]
        } else {
            self.methods.clone()
        }
    }

    pub fn cells(&self, base: &Config) -> Vec<CellKey> {
        let mut out = Vec::new();
        for method in self.rows(base) {
            for value in &self.values {
                for repeat in 0..self.repeats {
                    out.push(CellKey {
                        method,
                        value: value.clone(),
                        repeat,
                    });
                }
            }
        }
        out
    }

    /// Config of one cell. The seed depends only on the base seed and the
    /// repeat index, so every value and method within a repeat sees the same
    /// data draw.
    pub fn cell_config(&self, base: &Config, key: &CellKey) -> Result<Config> {
        let mut cfg = base.clone();
        cfg.method = key.method;
        cfg.set(self.axis.key(), &key.value)?;
        cfg.seed = derive_seed(base.seed, &[b"repeat", &(key.repeat as u64).to_le_bytes()]);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn cell_dir(&self, root: &Path, cfg: &Config, key: &CellKey) -> PathBuf {
        let value = if self.axis == Axis::Method {
            cfg.method.slug()
        } else {
            key.value.clone()
        };
        root.join(cfg.method.slug())
            .join(format!("{}={value}", self.axis.key()))
            .join(format!("repeat{}", key.repeat))
    }
}

/// Outcome of one cell: its final global metrics, or why it failed.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub key: CellKey,
    pub config: Config,
    pub outcome: std::result::Result<FairnessReport, String>,
}

impl CellResult {
    /// Final metrics of a complete run.
    pub fn metrics(&self) -> Option<MetricRecord> {
        match &self.outcome {
            Ok(r) if r.complete => Some(r.final_metrics()),
            _ => None,
        }
    }

    pub fn failed(&self) -> bool {
        self.metrics().is_none()
    }
}

/// Runs every cell, writing each run's files under `root` when given.
/// A failing cell is recorded and its siblings still run.
pub fn run_sweep(base: &Config, plan: &SweepPlan, root: Option<&Path>) -> Result<Vec<CellResult>> {
    if plan.values.is_empty() || plan.repeats == 0 {
        return Err(Error::invalid("a sweep needs at least one value and one repeat"));
    }
    let mut out = Vec::new();
    for key in plan.cells(base) {
        let (config, mut outcome) = match plan.cell_config(base, &key) {
            Ok(c) => {
                let o = execute(&c).map_err(|e| e.to_string());
                (c, o)
            }
            Err(e) => (base.clone(), Err(e.to_string())),
        };
        if let (Some(root), Ok(report)) = (root, &outcome) {
            if let Err(e) = emit_report(&config, report, &plan.cell_dir(root, &config, &key)) {
                outcome = Err(e.to_string());
            }
        }
        out.push(CellResult { key, config, outcome });
    }
    if let Some(root) = root {
        write_combined(plan, base, &out, root)?;
    }
    Ok(out)
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Final metrics of the completed repeats of one (method, value) cell.
pub fn cell_metrics(results: &[CellResult], method: Method, value: &str) -> Vec<MetricRecord> {
    results
        .iter()
        .filter(|r| r.key.method == method && r.key.value == value)
        .filter_map(CellResult::metrics)
        .collect()
}

const METRIC_NAMES: [&str; 5] = ["A_B", "Φ_A", "Φ_demo", "Φ_eq", "F_global"];

fn metric_values(recs: &[MetricRecord], which: usize) -> Vec<f64> {
    recs.iter()
        .filter_map(|m| match which {
            0 => Some(m.a_b),
            1 => Some(m.phi_a),
            2 => Some(m.phi_demo),
            3 => Some(m.phi_eq),
            _ => m.f_global,
        })
        .collect()
}

/// Markdown comparison tables: metrics down, axis values across, one table
/// per row method, mean ± std over completed repeats.
pub fn render_combined(plan: &SweepPlan, base: &Config, results: &[CellResult]) -> String {
    let mut out = format!("# Sweep over {}\n\n", plan.axis.key());
    for method in plan.rows(base) {
        if plan.axis != Axis::Method {
            writeln!(out, "## {method}\n").unwrap();
        }
        let head: Vec<String> = plan.values.iter().map(|v| format!("{}={v}", plan.axis.key())).collect();
        writeln!(out, "| Metric | {} |", head.join(" | ")).unwrap();
        writeln!(out, "|---|{}", "---|".repeat(head.len())).unwrap();
        for (i, name) in METRIC_NAMES.iter().enumerate() {
            let cells: Vec<String> = plan
                .values
                .iter()
                .map(|v| {
                    let recs = cell_metrics(results, method, v);
                    let xs = metric_values(&recs, i);
                    if xs.is_empty() {
                        "n/a".into()
                    } else {
                        let (m, s) = mean_std(&xs);
                        format!("{} ± {}", num(m), num(s))
                    }
                })
                .collect();
            writeln!(out, "| {name} | {} |", cells.join(" | ")).unwrap();
        }
        let done: Vec<String> = plan
            .values
            .iter()
            .map(|v| cell_metrics(results, method, v).len().to_string())
            .collect();
        writeln!(out, "| completed repeats | {} |\n", done.join(" | ")).unwrap();
    }
    let failed: Vec<&CellResult> = results.iter().filter(|r| r.failed()).collect();
    if !failed.is_empty() {
        out.push_str("## Failed cells\n\n");
        for r in failed {
            let why = match &r.outcome {
                Err(e) => e.clone(),
                Ok(rep) => rep.failure.clone().unwrap_or_else(|| "incomplete".into()),
            };
            writeln!(out, "- {} {}={} repeat {}: {why}", r.key.method, plan.axis.key(), r.key.value, r.key.repeat).unwrap();
        }
    }
    out
}

/// Flat per-cell table of final metrics.
pub fn render_cells_csv(plan: &SweepPlan, results: &[CellResult]) -> String {
    let mut out = format!("method,{},repeat,status,a_b,phi_a,phi_demo,phi_eq,f_global\n", plan.axis.key());
    for r in results {
        let status = if r.failed() { "failed" } else { "ok" };
        let cells = r
            .metrics()
            .map_or(",,,,".to_string(), |m| metric_cells(&m).replace(" | ", ","));
        writeln!(out, "{},{},{},{status},{cells}", r.key.method, r.key.value, r.key.repeat).unwrap();
    }
    out
}

pub const SWEEP_MD: &str = "sweep.md";
pub const SWEEP_CSV: &str = "sweep.csv";

fn write_combined(plan: &SweepPlan, base: &Config, results: &[CellResult], root: &Path) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let md = root.join(SWEEP_MD);
    std::fs::write(&md, render_combined(plan, base, results)).map_err(|e| Error::io(&md, e))?;
    let csv = root.join(SWEEP_CSV);
    std::fs::write(&csv, render_cells_csv(plan, results)).map_err(|e| Error::io(&csv, e))
}

/// Single-run summary table for a `Method | metrics` layout.
pub fn method_table(rows: &[(String, MetricRecord)]) -> String {
    let mut out = format!("| Method {TABLE_HEAD}\n|---|---|---|---|---|---|\n");
    for (name, m) in rows {
        writeln!(out, "| {name} | {} |", metric_cells(m)).unwrap();
    }
    out
}

use std::fmt::Write as _;
use std::path::Path;

use super::config::Config;
use crate::error::{Error, Result};
use crate::federation::FairnessReport;
use crate::metrics::MetricRecord;

pub const CSV_HEADER: &str = "round,client,a_b,phi_a,phi_demo,phi_eq,f_global,score,weight";
pub const CSV_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.md";
pub const CONFIG_FILE: &str = "config.txt";

pub(crate) fn num(v: f64) -> String {
    format!("{v:.6}")
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), num)
}

/// One row per client per round (validation metrics, score, weight) followed
/// by a `global` row with the test metrics of the round's global prompts.
pub fn render_csv(report: &FairnessReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &report.rounds {
        for c in &r.clients {
            let m = c.metrics;
            writeln!(
                out,
                "{},{},{},{},{},{},,{},{}",
                r.round,
                c.client,
                opt(m.map(|m| m.a_b)),
                opt(m.map(|m| m.phi_a)),
                opt(m.map(|m| m.phi_demo)),
                opt(m.map(|m| m.phi_eq)),
                opt(c.score),
                num(c.weight)
            )
            .expect("writing to a String");
        }
        let g = r.global;
        writeln!(
            out,
            "{},global,{},{},{},{},{},,",
            r.round,
            num(g.a_b),
            num(g.phi_a),
            num(g.phi_demo),
            num(g.phi_eq),
            opt(g.f_global)
        )
        .expect("writing to a String");
    }
    out
}

pub(crate) fn metric_cells(m: &MetricRecord) -> String {
    format!(
        "{} | {} | {} | {} | {}",
        num(m.a_b),
        num(m.phi_a),
        num(m.phi_demo),
        num(m.phi_eq),
        opt(m.f_global)
    )
}

pub(crate) const TABLE_HEAD: &str = "| A_B | Φ_A | Φ_demo | Φ_eq | F_global |";

pub fn render_summary(cfg: &Config, report: &FairnessReport) -> String {
    let mut out = String::from("# Run summary\n\n");
    writeln!(out, "| {} {TABLE_HEAD}", "Evaluation").unwrap();
    out.push_str("|---|---|---|---|---|---|\n");
    writeln!(out, "| initial | {} |", metric_cells(&report.initial)).unwrap();
    if let Some(last) = report.rounds.last() {
        writeln!(out, "| {} (round {}) | {} |", cfg.method, last.round, metric_cells(&last.global)).unwrap();
    }
    out.push('\n');
    writeln!(out, "- method: {}", cfg.method).unwrap();
    writeln!(out, "- seed: {}", cfg.seed).unwrap();
    writeln!(out, "- clients: {}, alpha: {}", cfg.clients, cfg.alpha).unwrap();
    writeln!(out, "- rounds completed: {} of {}", report.rounds.len(), cfg.fed.rounds).unwrap();
    match (&report.failure, report.complete) {
        (_, true) => out.push_str("- status: complete\n"),
        (Some(f), false) => writeln!(out, "- status: incomplete ({f})").unwrap(),
        (None, false) => out.push_str("- status: incomplete\n"),
    }
    if !report.initial_excluded.is_empty() || report.rounds.iter().any(|r| !r.fglobal_excluded.is_empty()) {
        let last = report.rounds.last().map_or(&report.initial_excluded, |r| &r.fglobal_excluded);
        writeln!(out, "- clients without positives in both groups (final F_global): {last:?}").unwrap();
    }
    writeln!(out, "- config hash: {}", cfg.hash()).unwrap();
    writeln!(out, "- backbone hash: {}", report.backbone_hash).unwrap();
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the per-round CSV, the markdown summary and the resolved config.
pub fn emit_report(cfg: &Config, report: &FairnessReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join(CSV_FILE), &render_csv(report))?;
    write(&dir.join(SUMMARY_FILE), &render_summary(cfg, report))?;
    write(&dir.join(CONFIG_FILE), &cfg.to_text())
}

/// Global test metrics of the last round in a CSV written by
/// [`render_csv`]; `None` for a header-only file.
pub fn final_global_row(csv: &str) -> Result<Option<(usize, MetricRecord)>> {
    let mut lines = csv.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header `{CSV_HEADER}`"),
        });
    }
    let mut last = None;
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let bad = |msg: &str| Error::Parse {
            line: i + 2,
            msg: msg.to_string(),
        };
        if f.len() != 9 {
            return Err(bad("expected 9 fields"));
        }
        if f[1] != "global" {
            continue;
        }
        let val = |s: &str| s.parse::<f64>().map_err(|_| bad("malformed number"));
        let round = f[0].parse::<usize>().map_err(|_| bad("malformed round"))?;
        let rec = MetricRecord {
            a_b: val(f[2])?,
            phi_a: val(f[3])?,
            phi_demo: val(f[4])?,
            phi_eq: val(f[5])?,
            f_global: if f[6].is_empty() { None } else { Some(val(f[6])?) },
        };
        last = Some((round, rec));
    }
    Ok(last)
}

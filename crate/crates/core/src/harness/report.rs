//! Post-run checks over an output directory, plus charts drawn from the CSVs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::manifest::{RunManifest, MANIFEST_FILE};
use super::output::{fmt_float, read_results, read_summary, read_table, summarize, SummaryRow};
use super::suites::{RESULTS_FILE, SUMMARY_FILE};
use super::svg::{Bar, BarChart};
use crate::error::Result;

pub const REPORT_FILE: &str = "report.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub dir: PathBuf,
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn ok(&self) -> bool {
        self.checks.iter().all(|c| c.ok)
    }

    fn push(&mut self, dir: &Path, name: &str, ok: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            dir: dir.to_path_buf(),
            name: name.into(),
            ok,
            detail: detail.into(),
        });
    }
}

/// `dir` itself if it holds a manifest, else its immediate subdirectories that do.
pub fn run_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join(MANIFEST_FILE).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    out.sort();
    Ok(out)
}

/// Fields compared when cross-checking a summary against its raw rows.
/// Utility columns come from a separate computation and are skipped.
fn summary_key(s: &SummaryRow) -> Vec<String> {
    let mut v = vec![s.cell.defense.clone(), fmt_float(s.cell.parameter), s.cell.q1.to_string()];
    v.push(s.n.to_string());
    v.push(s.errors.to_string());
    for m in [s.precision, s.recall, s.rouge_l, s.distance] {
        v.push(fmt_float(m.mean));
        v.push(fmt_float(m.std));
    }
    v
}

fn summary_chart(summary: &[SummaryRow], command: &str) -> BarChart {
    BarChart {
        title: format!("{command}: mean ROUGE-L per cell"),
        y_label: "ROUGE-L".into(),
        bars: summary
            .iter()
            .map(|s| Bar {
                label: format!("{}:{} q1={}", s.cell.defense, s.cell.parameter, s.cell.q1),
                value: s.rouge_l.mean,
                secondary: None,
            })
            .collect(),
    }
}

fn check_dir(dir: &Path, report: &mut Report) -> Result<()> {
    let mut manifest = RunManifest::read(dir)?;
    let bad = manifest.verify_files(dir)?;
    report.push(
        dir,
        "hashes",
        bad.is_empty(),
        if bad.is_empty() {
            format!("{} files match", manifest.files.len())
        } else {
            format!("changed or missing: {bad:?}")
        },
    );
    let mut emitted = Vec::new();
    if dir.join(RESULTS_FILE).is_file() && dir.join(SUMMARY_FILE).is_file() {
        match (read_results(&dir.join(RESULTS_FILE)), read_summary(&dir.join(SUMMARY_FILE))) {
            (Ok(rows), Ok(stored)) => {
                let fresh = summarize(&rows);
                let a: Vec<_> = stored.iter().map(summary_key).collect();
                let b: Vec<_> = fresh.iter().map(summary_key).collect();
                let mismatch = a.iter().zip(&b).position(|(x, y)| x != y);
                let ok = a.len() == b.len() && mismatch.is_none();
                let detail = match (ok, mismatch) {
                    (true, _) => format!("{} summary rows recomputed exactly", a.len()),
                    (false, Some(i)) => format!("summary row {i} differs from recomputation"),
                    (false, None) => format!("{} stored vs {} recomputed summary rows", a.len(), b.len()),
                };
                report.push(dir, "summary", ok, detail);
                let errors = rows.iter().filter(|r| r.is_error()).count();
                report.push(dir, "samples", errors == 0, format!("{} rows, {errors} errors", rows.len()));
                std::fs::write(dir.join("rouge_l.svg"), summary_chart(&stored, &manifest.command).to_svg())?;
                emitted.push("rouge_l.svg");
            }
            (Err(e), _) | (_, Err(e)) => report.push(dir, "summary", false, format!("unreadable table: {e}")),
        }
    }
    if dir.join("paf.csv").is_file() {
        let (header, rows) = read_table(&dir.join("paf.csv"))?;
        let col = |n: &str| header.iter().position(|h| h == n);
        if let (Some(mean), Some(max)) = (col("mean"), col("max_paf")) {
            let violations = rows
                .iter()
                .filter(|r| r[max].parse::<f64>().unwrap_or(f64::NAN) < r[mean].parse::<f64>().unwrap_or(f64::NAN))
                .count();
            report.push(dir, "max-paf", violations == 0, format!("{violations} rows with Max-PAF < mean"));
        }
    }
    emitted.push(REPORT_FILE);
    let mine: Vec<&Check> = report.checks.iter().filter(|c| c.dir == dir).collect();
    std::fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(&mine)? + "\n")?;
    for f in emitted {
        manifest.add_file(dir, f)?;
    }
    manifest.write(dir)?;
    Ok(())
}

/// Verifies every run under `dir`: manifest hashes, summary recomputation
/// and the Max-PAF ordering. Writes `report.json` and charts into each run
/// directory and records them in its manifest.
pub fn report(dir: &Path) -> Result<Report> {
    let mut report = Report::default();
    let dirs = run_dirs(dir)?;
    if dirs.is_empty() {
        report.push(dir, "runs", false, "no manifest found");
    }
    for d in dirs {
        check_dir(&d, &mut report)?;
    }
    Ok(report)
}

//! Trial logs and CSV reports.
//!
//! A run directory holds `trials.jsonl` (one record per trial, appended as
//! the search runs), `summary.json` (final best and totals), and the derived
//! `trials.csv`, `progression.csv`, `cdf.csv` and `summary.txt`, which
//! `report` can regenerate from the first two.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use agnn_core::search::{cumulative_distribution, top_k_progression, SearchLog};
use agnn_core::train::EvaluationRecord;

pub const TRIALS_JSONL: &str = "trials.jsonl";
pub const SUMMARY_JSON: &str = "summary.json";
pub const TRIALS_CSV: &str = "trials.csv";
pub const PROGRESSION_CSV: &str = "progression.csv";
pub const CDF_CSV: &str = "cdf.csv";
pub const SUMMARY_TXT: &str = "summary.txt";
pub const TRIALS_HEADER: [&str; 5] = ["trial", "architecture", "val_metric", "shared", "seconds"];
/// Window of the top-k progression column.
pub const TOP_K: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: usize,
    pub architecture: String,
    pub val_metric: f64,
    pub shared: usize,
    pub seconds: f64,
    pub epochs: usize,
    pub aborted: bool,
}

impl From<&EvaluationRecord> for TrialRow {
    fn from(r: &EvaluationRecord) -> Self {
        Self {
            trial: r.trial_id,
            architecture: r.architecture.to_string(),
            val_metric: r.val_metric,
            shared: r.shared_tensor_count,
            seconds: r.train_seconds,
            epochs: r.epochs_run,
            aborted: r.aborted,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub data: String,
    pub controller: String,
    pub s: usize,
    pub layers: usize,
    pub share: String,
    pub seed: u64,
    pub trials: usize,
    pub best_trial: usize,
    pub best_architecture: String,
    pub best_val_metric: f64,
    /// Held-out metric of the best architecture; computed once per run.
    pub test_metric: Option<f64>,
    pub total_seconds: f64,
    /// Exact optimum when the run scored a surrogate landscape.
    pub surrogate_optimum: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<TrialRow>,
    pub summary: RunSummary,
}

impl Report {
    pub fn from_log(log: &SearchLog, summary: RunSummary) -> Self {
        Self {
            rows: log.records.iter().map(TrialRow::from).collect(),
            summary,
        }
    }

    /// Reads `trials.jsonl` and `summary.json` from a run directory.
    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let jsonl = dir.join(TRIALS_JSONL);
        let file = File::open(&jsonl).with_context(|| format!("opening {}", jsonl.display()))?;
        let mut rows = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: TrialRow =
                serde_json::from_str(&line).with_context(|| format!("{}: line {}", jsonl.display(), i + 1))?;
            if row.trial != rows.len() + 1 {
                bail!("{}: line {}: trial {} out of sequence", jsonl.display(), i + 1, row.trial);
            }
            rows.push(row);
        }
        let summary_path = dir.join(SUMMARY_JSON);
        let text = fs::read_to_string(&summary_path).with_context(|| format!("reading {}", summary_path.display()))?;
        let summary: RunSummary = serde_json::from_str(&text).with_context(|| format!("parsing {}", summary_path.display()))?;
        if rows.is_empty() {
            bail!("{} holds no trials", jsonl.display());
        }
        Ok(Self { rows, summary })
    }

    fn metrics(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.val_metric).collect()
    }
}

/// One JSON object per line; used both live and for full rewrites.
pub fn jsonl_line(row: &TrialRow) -> String {
    let mut s = serde_json::to_string(row).expect("trial row serializes");
    s.push('\n');
    s
}

pub fn trials_csv(rows: &[TrialRow]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRIALS_HEADER)?;
    for r in rows {
        w.write_record([
            r.trial.to_string(),
            r.architecture.clone(),
            r.val_metric.to_string(),
            r.shared.to_string(),
            r.seconds.to_string(),
        ])?;
    }
    Ok(w.into_inner()?)
}

pub fn progression_csv(metrics: &[f64]) -> anyhow::Result<Vec<u8>> {
    let best = top_k_progression(metrics, 1)?;
    let top = top_k_progression(metrics, TOP_K)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["trial", "best", "top10_mean"])?;
    for ((t, b), (_, m)) in best.iter().zip(&top) {
        w.write_record([t.to_string(), b.to_string(), m.to_string()])?;
    }
    Ok(w.into_inner()?)
}

pub fn cdf_csv(metrics: &[f64]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["val_metric", "fraction"])?;
    for (v, f) in cumulative_distribution(metrics)? {
        w.write_record([v.to_string(), f.to_string()])?;
    }
    Ok(w.into_inner()?)
}

pub fn summary_text(s: &RunSummary) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| String::from("n/a"), |x| x.to_string());
    let mut t = String::new();
    let _ = writeln!(t, "run: {}", s.name);
    let _ = writeln!(t, "data: {}", s.data);
    let _ = writeln!(t, "controller: {} (s={}, layers={}, share={})", s.controller, s.s, s.layers, s.share);
    let _ = writeln!(t, "seed: {}", s.seed);
    let _ = writeln!(t, "trials: {}", s.trials);
    let _ = writeln!(t, "best_trial: {}", s.best_trial);
    let _ = writeln!(t, "best_architecture: {}", s.best_architecture);
    let _ = writeln!(t, "best_val_metric: {}", s.best_val_metric);
    let _ = writeln!(t, "test_metric: {}", opt(s.test_metric));
    if s.surrogate_optimum.is_some() {
        let _ = writeln!(t, "surrogate_optimum: {}", opt(s.surrogate_optimum));
    }
    let _ = writeln!(t, "total_seconds: {}", s.total_seconds);
    t
}

/// Writes every file of a run directory from `report`. Rewriting the same
/// report produces identical bytes.
pub fn write_report(dir: &Path, report: &Report) -> anyhow::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let metrics = report.metrics();
    let mut jsonl = String::new();
    for r in &report.rows {
        jsonl.push_str(&jsonl_line(r));
    }
    let files: [(&str, Vec<u8>); 6] = [
        (TRIALS_JSONL, jsonl.into_bytes()),
        (SUMMARY_JSON, serde_json::to_vec_pretty(&report.summary)?),
        (TRIALS_CSV, trials_csv(&report.rows)?),
        (PROGRESSION_CSV, progression_csv(&metrics)?),
        (CDF_CSV, cdf_csv(&metrics)?),
        (SUMMARY_TXT, summary_text(&report.summary).into_bytes()),
    ];
    let mut written = Vec::new();
    for (name, bytes) in files {
        let path = dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}

/// Concatenates the `trials.csv` of several run directories, prefixing each
/// row with the run's directory name.
pub fn merge_logs<W: Write>(dirs: &[PathBuf], out: W) -> anyhow::Result<usize> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["run"];
    header.extend(TRIALS_HEADER);
    w.write_record(&header)?;
    let mut rows = 0;
    for dir in dirs {
        let path = dir.join(TRIALS_CSV);
        let mut r = csv::Reader::from_path(&path).with_context(|| format!("opening {}", path.display()))?;
        if r.headers()?.iter().ne(TRIALS_HEADER) {
            bail!("{} does not have the trials header", path.display());
        }
        let run = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        for rec in r.records() {
            let rec = rec.with_context(|| format!("reading {}", path.display()))?;
            let mut fields = vec![run.as_str()];
            fields.extend(rec.iter());
            w.write_record(&fields)?;
            rows += 1;
        }
    }
    w.flush()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(trial: usize, val: f64) -> TrialRow {
        TrialRow {
            trial,
            architecture: "[dim=8|att=gat|heads=1|agg=sum|comb=mlp|act=relu]".into(),
            val_metric: val,
            shared: trial,
            seconds: 0.0,
            epochs: 3,
            aborted: false,
        }
    }

    fn summary() -> RunSummary {
        RunSummary {
            name: "r".into(),
            data: "surrogate:".into(),
            controller: "agnn".into(),
            s: 1,
            layers: 1,
            share: "off".into(),
            seed: 0,
            trials: 2,
            best_trial: 2,
            best_architecture: "x".into(),
            best_val_metric: 0.9,
            test_metric: Some(0.8),
            total_seconds: 0.0,
            surrogate_optimum: None,
        }
    }

    #[test]
    fn trials_csv_has_exact_header() {
        let bytes = trials_csv(&[row(1, 0.1), row(2, 0.9)]).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "trial,architecture,val_metric,shared,seconds");
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[2], "2,[dim=8|att=gat|heads=1|agg=sum|comb=mlp|act=relu],0.9,2,0");
    }

    #[test]
    fn progression_matches_two_trial_example() {
        let text = String::from_utf8(progression_csv(&[0.1, 0.9]).unwrap()).unwrap();
        assert_eq!(text, "trial,best,top10_mean\n1,0.1,0.1\n2,0.9,0.5\n");
    }

    #[test]
    fn report_round_trip_and_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let report = Report {
            rows: vec![row(1, 0.1), row(2, 0.9)],
            summary: summary(),
        };
        write_report(dir.path(), &report).unwrap();
        let first = fs::read(dir.path().join(TRIALS_CSV)).unwrap();
        let loaded = Report::load(dir.path()).unwrap();
        assert_eq!(loaded, report);
        write_report(dir.path(), &loaded).unwrap();
        assert_eq!(fs::read(dir.path().join(TRIALS_CSV)).unwrap(), first);
        let text = fs::read_to_string(dir.path().join(SUMMARY_TXT)).unwrap();
        assert_eq!(text.matches("test_metric").count(), 1);
    }

    #[test]
    fn out_of_order_jsonl_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_report(dir.path(), &Report { rows: vec![row(1, 0.1)], summary: summary() }).unwrap();
        fs::write(dir.path().join(TRIALS_JSONL), jsonl_line(&row(2, 0.5))).unwrap();
        assert!(Report::load(dir.path()).is_err());
    }

    #[test]
    fn merge_prefixes_run_names() {
        let root = tempfile::tempdir().unwrap();
        let a = root.path().join("a");
        let b = root.path().join("b");
        write_report(&a, &Report { rows: vec![row(1, 0.1)], summary: summary() }).unwrap();
        write_report(&b, &Report { rows: vec![row(1, 0.2), row(2, 0.3)], summary: summary() }).unwrap();
        let mut out = Vec::new();
        assert_eq!(merge_logs(&[a, b], &mut out).unwrap(), 3);
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "run,trial,architecture,val_metric,shared,seconds");
        assert!(lines[1].starts_with("a,1,"));
        assert!(lines[3].starts_with("b,2,"));
    }
}

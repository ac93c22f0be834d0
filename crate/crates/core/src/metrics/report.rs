use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{MetricsError, Result};
use crate::harness::{read_summary, RunSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub label: Option<String>,
    pub method: String,
    pub staleness_s: u64,
    pub ranks: usize,
    pub nodes: usize,
    pub coherence_budget: Option<u64>,
    pub total_time_us: u64,
    pub exposed_us: u64,
    pub spike_ratio: Option<f64>,
    pub final_eval_loss: f64,
    pub bytes_moved: u64,
    pub energy_joules: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
    pub total_time_us: u64,
    pub total_exposed_us: u64,
    pub total_bytes_moved: u64,
    pub total_energy_joules: f64,
}

impl ReportTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "run,label,method,staleness_s,ranks,nodes,coherence_budget,total_time_us,exposed_us,spike_ratio,final_eval_loss,bytes_moved,energy_joules\n",
        );
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.run,
                r.label.clone().unwrap_or_default(),
                r.method,
                r.staleness_s,
                r.ranks,
                r.nodes,
                r.coherence_budget.map(|b| b.to_string()).unwrap_or_default(),
                r.total_time_us,
                r.exposed_us,
                r.spike_ratio.map(|x| x.to_string()).unwrap_or_default(),
                r.final_eval_loss,
                r.bytes_moved,
                r.energy_joules
            )
            .unwrap();
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| run | method | S | ranks | B | simulated time (us) | exposed (us) | spike ratio | final eval loss | bytes moved | energy (J) |\n|---|---|---|---|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} | {} | {:.6} | {} | {:.3} |",
                r.run,
                r.method,
                r.staleness_s,
                r.ranks,
                r.coherence_budget.map(|b| b.to_string()).unwrap_or_else(|| "-".into()),
                r.total_time_us,
                r.exposed_us,
                r.spike_ratio.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into()),
                r.final_eval_loss,
                r.bytes_moved,
                r.energy_joules
            )
            .unwrap();
        }
        writeln!(
            s,
            "| total | | | | | {} | {} | | | {} | {:.3} |",
            self.total_time_us, self.total_exposed_us, self.total_bytes_moved, self.total_energy_joules
        )
        .unwrap();
        s
    }
}

fn row(run: String, s: RunSummary) -> ReportRow {
    ReportRow {
        run,
        label: s.label,
        method: s.method,
        staleness_s: s.staleness_s,
        ranks: s.ranks,
        nodes: s.nodes,
        coherence_budget: s.coherence_budget,
        total_time_us: s.total_time_us,
        exposed_us: s.exposed_us,
        spike_ratio: s.spike.map(|x| x.spike_ratio),
        final_eval_loss: s.final_eval_loss,
        bytes_moved: s.intra_bytes + s.inter_bytes,
        energy_joules: s.energy_joules,
    }
}

/// Collects `summary.json` from `dir` and its immediate subdirectories
/// and writes `report.md` and `report.csv` into `dir`. Rows are ordered by
/// staleness, rank count, coherence budget, then run name.
pub fn report(dir: &Path) -> Result<ReportTable> {
    let mut found: Vec<(String, PathBuf)> = Vec::new();
    if dir.join("summary.json").is_file() {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| ".".into());
        found.push((name, dir.to_path_buf()));
    }
    if let Ok(entries) = std::fs::read_dir(dir) {
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() && p.join("summary.json").is_file() {
                found.push((e.file_name().to_string_lossy().into_owned(), p));
            }
        }
    }
    if found.is_empty() {
        return Err(MetricsError::MissingRuns(dir.display().to_string()));
    }
    let mut rows = Vec::with_capacity(found.len());
    for (name, p) in found {
        let s = read_summary(&p).map_err(|e| MetricsError::Io(e.to_string()))?;
        rows.push(row(name, s));
    }
    rows.sort_by(|a, b| {
        (a.staleness_s, a.ranks, a.coherence_budget, &a.run).cmp(&(b.staleness_s, b.ranks, b.coherence_budget, &b.run))
    });
    let table = ReportTable {
        total_time_us: rows.iter().map(|r| r.total_time_us).sum(),
        total_exposed_us: rows.iter().map(|r| r.exposed_us).sum(),
        total_bytes_moved: rows.iter().map(|r| r.bytes_moved).sum(),
        total_energy_joules: rows.iter().map(|r| r.energy_joules).sum(),
        rows,
    };
    let io = |e: std::io::Error| MetricsError::Io(e.to_string());
    std::fs::write(dir.join("report.md"), table.to_markdown()).map_err(io)?;
    std::fs::write(dir.join("report.csv"), table.to_csv()).map_err(io)?;
    Ok(table)
}

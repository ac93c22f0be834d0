use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::run::{RunResult, RunSummary};
use super::HarnessError;
use crate::asyncsched::write_jsonl;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub loss: f64,
    pub simulated_time_us: u64,
}

/// Writes `config.json`, `loss.csv`, `series.csv`, `trace.jsonl`,
/// `summary.json` and `summary.md` into `dir`.
pub fn write_outputs(dir: &Path, cfg: &RunConfig, res: &RunResult) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), cfg.to_json())?;

    let mut loss = String::from("step,loss,simulated_time_us\n");
    for r in &res.losses {
        writeln!(loss, "{},{},{}", r.step, r.loss, r.simulated_time_us).unwrap();
    }
    fs::write(dir.join("loss.csv"), loss)?;

    let mut series = String::from("step,total_us,compute_us,collective_us,barrier_wait_us,install_us,loss\n");
    for (s, l) in res.step_times.iter().zip(&res.losses) {
        writeln!(
            series,
            "{},{},{},{},{},{},{}",
            s.step, s.total_us, s.compute_us, s.collective_us, s.barrier_wait_us, s.install_us, l.loss
        )
        .unwrap();
    }
    fs::write(dir.join("series.csv"), series)?;

    write_jsonl(&dir.join("trace.jsonl"), &res.trace)?;
    let json = serde_json::to_string_pretty(&res.summary).map_err(|e| HarnessError::Io(e.to_string()))?;
    fs::write(dir.join("summary.json"), json)?;
    fs::write(dir.join("summary.md"), summary_markdown(&res.summary))?;
    Ok(())
}

fn summary_markdown(s: &RunSummary) -> String {
    let mut md = String::new();
    writeln!(md, "# Run summary\n").unwrap();
    writeln!(md, "| metric | value |\n|---|---|").unwrap();
    let spike = s
        .spike
        .map(|x| format!("{:.3} (median {:.0} us, max {:.0} us)", x.spike_ratio, x.median, x.max))
        .unwrap_or_else(|| "n/a".into());
    let rows: Vec<(&str, String)> = vec![
        ("method", s.method.clone()),
        ("staleness S", s.staleness_s.to_string()),
        ("pf", s.pf.to_string()),
        ("ranks / nodes", format!("{} / {}", s.ranks, s.nodes)),
        (
            "coherence budget",
            s.coherence_budget.map(|b| b.to_string()).unwrap_or_else(|| "off".into()),
        ),
        ("steps", s.steps.to_string()),
        ("initial eval loss", format!("{:.6}", s.initial_eval_loss)),
        ("final eval loss", format!("{:.6}", s.final_eval_loss)),
        ("simulated time (us)", s.total_time_us.to_string()),
        ("exposed barrier + install (us)", s.exposed_us.to_string()),
        ("step-time spike ratio", spike),
        ("jobs dispatched / installed", format!("{} / {}", s.pool.dispatched, s.pool.installed)),
        ("barrier waits", s.pool.barrier_waits.to_string()),
        ("intra / inter bytes", format!("{} / {}", s.intra_bytes, s.inter_bytes)),
        ("coherence syncs / hits", format!("{} / {}", s.coherence_syncs, s.coherence_hits)),
        ("energy proxy (J)", format!("{:.3}", s.energy_joules)),
    ];
    for (k, v) in rows {
        writeln!(md, "| {k} | {v} |").unwrap();
    }
    md
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRow>, HarnessError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || HarnessError::Io(format!("malformed loss row: {l}"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(LossRow {
                step: f[0].parse().map_err(|_| bad())?,
                loss: f[1].parse().map_err(|_| bad())?,
                simulated_time_us: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn read_summary(dir: &Path) -> Result<RunSummary, HarnessError> {
    let text = fs::read_to_string(dir.join("summary.json"))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Io(e.to_string()))
}

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::output::write_outputs;
use super::run::{run_training, RunSummary};
use super::HarnessError;
use crate::coherence::CoherenceBudget;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Staleness,
    Nodes,
    Budget,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Staleness => "staleness",
            SweepAxis::Nodes => "nodes",
            SweepAxis::Budget => "budget",
        }
    }

    /// `cfg` with this axis set to `value`. Node sweeps keep the base
    /// config's ranks per node and its global batch.
    pub fn apply(self, cfg: &RunConfig, value: u64) -> Result<RunConfig, HarnessError> {
        let mut c = cfg.clone();
        match self {
            SweepAxis::Staleness => c.sched.staleness_s = value,
            SweepAxis::Nodes => {
                let layout = cfg.topology.layout()?;
                let per_node = layout.nodes[0].len();
                c.topology.nodes = value as usize;
                c.topology.ranks = value as usize * per_node;
                c.topology.node_sizes = None;
            }
            SweepAxis::Budget => {
                if value == 0 {
                    return Err(HarnessError::ConfigInvalid("budget values must be positive".into()));
                }
                c.coherence_budget = CoherenceBudget::every(value);
            }
        }
        Ok(c)
    }
}

impl FromStr for SweepAxis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "staleness" | "S" => Ok(SweepAxis::Staleness),
            "nodes" => Ok(SweepAxis::Nodes),
            "budget" | "B" => Ok(SweepAxis::Budget),
            other => Err(HarnessError::ConfigInvalid(format!("unknown sweep axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: u64,
    pub total_time_us: u64,
    pub mean_step_us: f64,
    pub final_eval_loss: f64,
    pub bytes_moved: u64,
    pub coherence_bytes: u64,
    pub barrier_wait_us: u64,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "{},total_time_us,mean_step_us,final_eval_loss,bytes_moved,coherence_bytes,barrier_wait_us\n",
            self.axis.name()
        );
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.value, r.total_time_us, r.mean_step_us, r.final_eval_loss, r.bytes_moved, r.coherence_bytes, r.barrier_wait_us
            )
            .unwrap();
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "| {} | simulated time (us) | mean step (us) | final eval loss | bytes moved | coherence bytes | barrier wait (us) |\n|---|---|---|---|---|---|---|\n",
            self.axis.name()
        );
        for r in &self.rows {
            writeln!(
                s,
                "| {} | {} | {:.1} | {:.6} | {} | {} | {} |",
                r.value, r.total_time_us, r.mean_step_us, r.final_eval_loss, r.bytes_moved, r.coherence_bytes, r.barrier_wait_us
            )
            .unwrap();
        }
        s
    }
}

/// One run per axis value with the base config's seeds. Runs are written
/// to `<output_dir>/<axis>_<value>` when an output directory is set.
pub fn sweep(cfg: &RunConfig, axis: SweepAxis, values: &[u64]) -> Result<SweepTable, HarnessError> {
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let mut c = axis.apply(cfg, v)?;
        let dir = cfg.output_dir.as_ref().map(|d| d.join(format!("{}_{v}", axis.name())));
        c.output_dir = dir.clone();
        let mut res = run_training(&c)?;
        res.summary.label = Some(format!("{}={v}", axis.name()));
        if let Some(d) = &dir {
            write_outputs(d, &c, &res)?;
        }
        let s = res.summary;
        rows.push(SweepRow {
            value: v,
            total_time_us: s.total_time_us,
            mean_step_us: s.total_time_us as f64 / s.steps as f64,
            final_eval_loss: s.final_eval_loss,
            bytes_moved: s.intra_bytes + s.inter_bytes,
            coherence_bytes: s.coherence_intra_bytes + s.coherence_inter_bytes,
            barrier_wait_us: s.barrier_wait_us,
            summary: s,
        });
    }
    let table = SweepTable { axis, rows };
    if let Some(d) = &cfg.output_dir {
        std::fs::create_dir_all(d)?;
        std::fs::write(d.join("sweep.csv"), table.to_csv())?;
        std::fs::write(d.join("sweep.md"), table.to_markdown())?;
    }
    Ok(table)
}

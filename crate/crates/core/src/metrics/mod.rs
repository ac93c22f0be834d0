//! Post-processing of run traces: step-time spikes, exposed
//! preconditioning time, an energy proxy, the normalized loss-reduction
//! efficiency, and tables aggregated over run directories.

mod report;

pub use report::{report, ReportRow, ReportTable};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("trace is empty")]
    EmptyTrace,
    #[error("trace lacks step-time annotations: {0}")]
    MissingAnnotations(String),
    #[error("energy ratio must be positive, got {0}")]
    NonpositiveRatio(f64),
    #[error("no runs found under {0}")]
    MissingRuns(String),
    #[error("I/O error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Simulated time attribution of one step on one rank.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTime {
    pub step: u64,
    pub total_us: u64,
    pub compute_us: u64,
    pub collective_us: u64,
    pub barrier_wait_us: u64,
    /// Installing refreshed state plus synchronous page-ins.
    pub install_us: u64,
}

impl StepTime {
    pub fn attributed_us(&self) -> u64 {
        self.compute_us + self.collective_us + self.barrier_wait_us + self.install_us
    }

    pub fn exposed_us(&self) -> u64 {
        self.barrier_wait_us + self.install_us
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikeStats {
    pub median: f64,
    pub p99: f64,
    pub max: f64,
    /// Index of the first maximal entry.
    pub argmax: usize,
    pub spike_ratio: f64,
}

/// Order statistics of per-step times. The median of an even-length
/// trace averages the two middle values; p99 is the nearest-rank value.
pub fn spike_stats(totals: &[f64]) -> Result<SpikeStats> {
    if totals.is_empty() {
        return Err(MetricsError::EmptyTrace);
    }
    let mut sorted = totals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let rank = ((0.99 * n as f64).ceil() as usize).clamp(1, n);
    let max = sorted[n - 1];
    let argmax = totals.iter().position(|&t| t == max).unwrap();
    Ok(SpikeStats {
        median,
        p99: sorted[rank - 1],
        max,
        argmax,
        spike_ratio: if median > 0.0 { max / median } else { f64::INFINITY },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureWindow {
    /// Refresh step opening the window `[boundary, boundary + pf)`.
    pub boundary: u64,
    pub barrier_wait_us: u64,
    pub install_us: u64,
    pub exposed_us: u64,
    pub total_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureReport {
    pub windows: Vec<ExposureWindow>,
    pub total_exposed_us: u64,
    pub total_us: u64,
}

/// Exposed preconditioning time (barrier waits plus installs) grouped by
/// refresh window.
pub fn exposure_breakdown(trace: &[StepTime], pf: u64) -> Result<ExposureReport> {
    if trace.is_empty() {
        return Err(MetricsError::EmptyTrace);
    }
    if pf == 0 {
        return Err(MetricsError::MissingAnnotations("pf must be positive".into()));
    }
    if let Some(bad) = trace.iter().find(|s| s.attributed_us() > s.total_us) {
        return Err(MetricsError::MissingAnnotations(format!(
            "step {} attributes {} us of {} us",
            bad.step,
            bad.attributed_us(),
            bad.total_us
        )));
    }
    let mut windows: Vec<ExposureWindow> = Vec::new();
    for s in trace {
        let boundary = s.step - s.step % pf;
        if windows.last().map(|w| w.boundary) != Some(boundary) {
            windows.push(ExposureWindow {
                boundary,
                barrier_wait_us: 0,
                install_us: 0,
                exposed_us: 0,
                total_us: 0,
            });
        }
        let w = windows.last_mut().unwrap();
        w.barrier_wait_us += s.barrier_wait_us;
        w.install_us += s.install_us;
        w.exposed_us += s.exposed_us();
        w.total_us += s.total_us;
    }
    Ok(ExposureReport {
        total_exposed_us: windows.iter().map(|w| w.exposed_us).sum(),
        total_us: windows.iter().map(|w| w.total_us).sum(),
        windows,
    })
}

/// Power draw per worker class. Training ranks are charged at the compute
/// rates, refresh workers at the auxiliary rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyModel {
    pub compute_watts: f64,
    pub idle_watts: f64,
    pub aux_compute_watts: f64,
    pub aux_idle_watts: f64,
    /// Always false here: rates are simulated, not read from counters.
    pub measured: bool,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self {
            compute_watts: 300.0,
            idle_watts: 60.0,
            aux_compute_watts: 40.0,
            aux_idle_watts: 5.0,
            measured: false,
        }
    }
}

impl EnergyModel {
    pub fn is_valid(&self) -> bool {
        [
            self.compute_watts,
            self.idle_watts,
            self.aux_compute_watts,
            self.aux_idle_watts,
        ]
        .iter()
        .all(|w| w.is_finite() && *w >= 0.0)
    }

    /// Joules spent by one training rank over `total_us` with `active_us`
    /// of it computing.
    pub fn rank_joules(&self, active_us: u64, total_us: u64) -> f64 {
        let idle = total_us.saturating_sub(active_us);
        (active_us as f64 * self.compute_watts + idle as f64 * self.idle_watts) * 1e-6
    }

    pub fn aux_joules(&self, active_us: u64, total_us: u64) -> f64 {
        let idle = total_us.saturating_sub(active_us);
        (active_us as f64 * self.aux_compute_watts + idle as f64 * self.aux_idle_watts) * 1e-6
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyInput {
    pub l_final: f64,
    pub l_init: f64,
    /// Energy of the run divided by the baseline run's energy.
    pub e_ratio: f64,
}

impl EfficiencyInput {
    /// Cross-entropy of a uniform prediction over `vocab` classes.
    pub fn uniform_l_init(vocab: usize) -> f64 {
        (vocab as f64).ln()
    }
}

/// `(l_init - l_final) / e_ratio`.
pub fn compute_eta(inp: EfficiencyInput) -> Result<f64> {
    if !(inp.e_ratio > 0.0) {
        return Err(MetricsError::NonpositiveRatio(inp.e_ratio));
    }
    Ok((inp.l_init - inp.l_final) / inp.e_ratio)
}

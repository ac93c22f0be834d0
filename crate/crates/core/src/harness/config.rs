use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::coherence::{discover_topology, CoherenceBudget, NodeLayout};
use crate::metrics::EnergyModel;
use crate::precond::{Method, OptimizerConfig};
use crate::simnet::NetConfig;
use crate::tierstore::TierConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Tanh,
}

/// Layer widths `[d0, d1, ..., dk]`; layer `i` owns a `(d_{i+1}, d_i)`
/// weight matrix and there are no bias vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub dims: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            dims: vec![16, 32, 8],
            activation: Activation::Tanh,
            seed: 1,
        }
    }
}

impl ModelSpec {
    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.dims.windows(2).map(|w| (w[1], w[0])).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskConfig {
    /// `f(W) = c/2 ||A W B - C||^2` with `C = A W* B`. The model must be a
    /// single `(m, n)` layer; `A` is `rows x m` and `B` is `n x out_cols`.
    IllConditionedQuadratic {
        rows: usize,
        out_cols: usize,
        kappa: f64,
        seed: u64,
    },
    /// Softmax cross-entropy against the argmax labels of a random teacher
    /// network with the model's architecture.
    SyntheticClassifier {
        teacher_seed: u64,
        eval_size: usize,
        teacher_scale: f64,
    },
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::SyntheticClassifier {
            teacher_seed: 7,
            eval_size: 512,
            teacher_scale: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedConfig {
    #[serde(rename = "staleness_S")]
    pub staleness_s: u64,
    /// Modeled refresh workers per rank; defaults to one per block.
    pub pool_size: Option<usize>,
    /// Modeled refresh job duration in units of per-rank step compute.
    pub inject_job_delay_steps: f64,
    pub hook_drain_budget: usize,
    pub offload_inverse: bool,
    /// Real sleep added to each job on the worker threads.
    pub real_job_delay_us: u64,
}

impl Default for SchedConfig {
    fn default() -> Self {
        Self {
            staleness_s: 1,
            pool_size: None,
            inject_job_delay_steps: 0.5,
            hook_drain_budget: 4,
            offload_inverse: false,
            real_job_delay_us: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TopologyConfig {
    pub ranks: usize,
    pub nodes: usize,
    /// Explicit ranks per node; overrides `ranks` / `nodes` when set.
    pub node_sizes: Option<Vec<usize>>,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self {
            ranks: 1,
            nodes: 1,
            node_sizes: None,
        }
    }
}

impl TopologyConfig {
    pub fn layout(&self) -> Result<NodeLayout, HarnessError> {
        if let Some(sizes) = &self.node_sizes {
            let layout = NodeLayout::from_sizes(sizes);
            discover_topology(&layout).map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
            return Ok(layout);
        }
        if self.nodes == 0 || self.ranks == 0 || self.ranks % self.nodes != 0 {
            return Err(HarnessError::ConfigInvalid(format!(
                "{} ranks cannot be split evenly over {} nodes",
                self.ranks, self.nodes
            )));
        }
        Ok(NodeLayout::uniform(self.nodes, self.ranks / self.nodes))
    }
}

/// Everything a run depends on. A persisted config reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub optimizer: OptimizerConfig,
    pub sched: SchedConfig,
    pub coherence_budget: CoherenceBudget,
    pub topology: TopologyConfig,
    pub net: NetConfig,
    pub tier: TierConfig,
    pub task: TaskConfig,
    pub model: ModelSpec,
    pub steps: u64,
    /// Global batch, split across ranks.
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub warmup_frac: f64,
    /// Modeled compute time of one full step on a single rank.
    pub step_compute_us: u64,
    pub energy: EnergyModel,
    /// Relative band for final-loss comparisons across runs.
    pub loss_band: f64,
    pub output_dir: Option<PathBuf>,
    /// Keep rank 0's parameters after every step in the run result.
    #[serde(skip)]
    pub record_params: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            sched: SchedConfig::default(),
            coherence_budget: CoherenceBudget::NEVER,
            topology: TopologyConfig::default(),
            net: NetConfig::default(),
            tier: TierConfig::default(),
            task: TaskConfig::default(),
            model: ModelSpec::default(),
            steps: 200,
            batch_size: 64,
            seed: 0,
            clip_norm: 1.0,
            warmup_frac: 0.05,
            step_compute_us: 10_000,
            energy: EnergyModel::default(),
            loss_band: 0.02,
            output_dir: None,
            record_params: false,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::ConfigInvalid(m));
        self.optimizer
            .validate()
            .map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
        let layout = self.topology.layout()?;
        if self.model.dims.len() < 2 || self.model.dims.contains(&0) {
            return bad("model needs at least two nonzero layer widths".into());
        }
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if self.batch_size < layout.world_size() {
            return bad(format!(
                "batch of {} cannot be split over {} ranks",
                self.batch_size,
                layout.world_size()
            ));
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive".into());
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad("warmup_frac must lie in [0, 1)".into());
        }
        if !(self.sched.inject_job_delay_steps >= 0.0 && self.sched.inject_job_delay_steps.is_finite()) {
            return bad("inject_job_delay_steps must be finite and non-negative".into());
        }
        if self.sched.pool_size == Some(0) {
            return bad("pool_size must be positive".into());
        }
        if self.coherence_budget.0 == Some(0) {
            return bad("coherence budget must be at least 1".into());
        }
        if !self.energy.is_valid() {
            return bad("energy rates must be non-negative".into());
        }
        match &self.task {
            TaskConfig::IllConditionedQuadratic {
                rows, out_cols, kappa, ..
            } => {
                if self.model.dims.len() != 2 {
                    return bad("the quadratic task takes a single-layer model".into());
                }
                if !(*kappa >= 1.0 && kappa.is_finite()) {
                    return bad("kappa must be at least 1".into());
                }
                if *rows < layout.world_size() || *out_cols == 0 {
                    return bad("quadratic rows must cover every rank and out_cols must be positive".into());
                }
                if *rows < self.model.dims[1] || *out_cols < self.model.dims[0] {
                    return bad("quadratic needs rows >= m and out_cols >= n for a unique minimizer".into());
                }
            }
            TaskConfig::SyntheticClassifier {
                eval_size,
                teacher_scale,
                ..
            } => {
                if *eval_size == 0 || !(*teacher_scale > 0.0) {
                    return bad("classifier needs a positive eval_size and teacher_scale".into());
                }
            }
        }
        Ok(())
    }

    pub fn is_second_order(&self) -> bool {
        self.optimizer.method != Method::AdamW
    }
}

//! Baseline schemes, the shortest-path oracle and the sweep harness.

pub mod oracle;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::delay::{compute_times, Branch, DelayBreakdown};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::optimizer::{run, EvaluationResult, OptimizerConfig, Routing, ScenarioEvaluator};
use crate::qmix::Policy;
use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Bisection over α with learned routing.
    Proposed,
    /// Every frame on the small model, no packets at all.
    SmallOnly,
    /// Every raw frame shipped to a computing satellite, no model update.
    CentralizedLarge,
    /// α = 0.5 with learned routing.
    EvenSplit,
    /// α = 0.5 with unit-load shortest-delay routing.
    EvenSplitDijkstra,
}

impl Scheme {
    pub const ALL: [Scheme; 5] =
        [Scheme::Proposed, Scheme::SmallOnly, Scheme::CentralizedLarge, Scheme::EvenSplit, Scheme::EvenSplitDijkstra];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Proposed => "proposed",
            Scheme::SmallOnly => "small_only",
            Scheme::CentralizedLarge => "centralized_large",
            Scheme::EvenSplit => "even_split",
            Scheme::EvenSplitDijkstra => "even_split_dijkstra",
        }
    }

    pub fn needs_policy(self) -> bool {
        matches!(self, Scheme::Proposed | Scheme::EvenSplit)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown scheme `{s}`")))
    }
}

/// Outcome of one scheme on one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeResult {
    pub scheme: Scheme,
    /// Mean service delay over the tasks.
    pub objective: f64,
    pub alphas: Vec<f64>,
    pub breakdowns: Vec<DelayBreakdown>,
    /// Evaluations spent (bisection iterations for the learned schemes).
    pub evaluations: usize,
}

impl SchemeResult {
    fn from_evaluation(scheme: Scheme, r: &EvaluationResult, evaluations: usize) -> Result<Self> {
        let objective = r.objective().ok_or_else(|| {
            let causes: Vec<String> =
                r.issues.iter().enumerate().filter_map(|(i, c)| c.as_ref().map(|c| format!("task {i}: {c:?}"))).collect();
            Error::Optimizer(format!("{scheme} has unserved tasks: {}", causes.join("; ")))
        })?;
        Ok(SchemeResult {
            scheme,
            objective,
            alphas: r.alphas.clone(),
            breakdowns: r.breakdowns.iter().flatten().copied().collect(),
            evaluations,
        })
    }

    fn mean(&self, f: impl Fn(&DelayBreakdown) -> f64) -> f64 {
        if self.breakdowns.is_empty() {
            return 0.0;
        }
        self.breakdowns.iter().map(f).sum::<f64>() / self.breakdowns.len() as f64
    }
}

/// Runs `scheme` on `scenario`. `policy` is required by the learned schemes
/// only; `optimizer` matters for [`Scheme::Proposed`] only.
pub fn run_scheme(
    scheme: Scheme,
    scenario: &Scenario,
    policy: Option<&Policy>,
    env: &EnvConfig,
    optimizer: &OptimizerConfig,
) -> Result<SchemeResult> {
    let learned = || -> Result<Routing<'_>> {
        policy
            .map(Routing::Learned)
            .ok_or_else(|| Error::config(format!("scheme {scheme} needs a trained policy")))
    };
    match scheme {
        Scheme::SmallOnly => small_only(scenario),
        Scheme::CentralizedLarge => {
            let mut ev = ScenarioEvaluator::new(scenario, Routing::ShortestPath, env.clone())?;
            let n = scenario.tasks.len();
            let traffic = scenario.centralized_traffic().into_iter().map(Some).collect();
            let r = ev.evaluate_traffic(&vec![1.0; n], traffic, vec![None; n])?;
            SchemeResult::from_evaluation(scheme, &r, 1)
        }
        Scheme::EvenSplit | Scheme::EvenSplitDijkstra | Scheme::Proposed => {
            let routing = if scheme == Scheme::EvenSplitDijkstra { Routing::ShortestPath } else { learned()? };
            let config = if scheme == Scheme::Proposed { *optimizer } else { OptimizerConfig { iterations: 1, early_stop: false } };
            let mut ev = ScenarioEvaluator::new(scenario, routing, env.clone())?;
            let out = run(&mut ev, &config)?;
            SchemeResult::from_evaluation(scheme, &out.best, out.trace.len())
        }
    }
}

fn small_only(scenario: &Scenario) -> Result<SchemeResult> {
    let breakdowns = scenario
        .tasks
        .iter()
        .map(|t| {
            let node = &scenario.nodes[t.source];
            // the remote side is never used at α = 0
            let local = compute_times(t, 0.0, node, node)?.local;
            Ok(DelayBreakdown { local, total: local, binding: Branch::Local, ..DelayBreakdown::default() })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = breakdowns.len();
    let objective = if n == 0 { 0.0 } else { breakdowns.iter().map(|b| b.total).sum::<f64>() / n as f64 };
    Ok(SchemeResult { scheme: Scheme::SmallOnly, objective, alphas: vec![0.0; n], breakdowns, evaluations: 0 })
}

/// Quantity swept by an experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    /// Frames per task.
    Frames,
    /// Computing-satellite capacity in TOPS.
    ComputingTops,
    /// Bisection iterations K.
    Iterations,
}

impl SweepVariable {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepVariable::Frames => "frames",
            SweepVariable::ComputingTops => "computing_tops",
            SweepVariable::Iterations => "iterations",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentGrid {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
    /// Instance seeds; each drives role placement when placement is random.
    pub seeds: Vec<u64>,
    pub schemes: Vec<Scheme>,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        Self {
            variable: SweepVariable::ComputingTops,
            values: vec![1.0, 5.0, 10.0, 20.0],
            seeds: vec![0],
            schemes: Scheme::ALL.to_vec(),
        }
    }
}

impl ExperimentGrid {
    /// Parses a grid file: the keys of a `[bench]` section, without the header.
    pub fn from_toml(text: &str) -> Result<Self> {
        let grid: ExperimentGrid = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.seeds.is_empty() || self.schemes.is_empty() {
            return Err(Error::config("bench grid needs at least one value, seed and scheme"));
        }
        if let Some(v) = self.values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::config(format!("bench sweep value {v} must be positive")));
        }
        if self.variable == SweepVariable::Iterations && self.values.iter().any(|v| v.fract() != 0.0) {
            return Err(Error::config("iteration sweep values must be whole numbers"));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.values.len() * self.seeds.len() * self.schemes.len()
    }
}

/// One row of the results table. Failed cells keep `objective = None` and
/// the error text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub variable: SweepVariable,
    pub value: f64,
    pub scheme: Scheme,
    pub seed: u64,
    pub objective: Option<f64>,
    pub mean_alpha: Option<f64>,
    /// Mean T^loc.
    pub mean_local: Option<f64>,
    /// Mean T^d + T^lar.
    pub mean_offload: Option<f64>,
    /// Mean T^m.
    pub mean_model: Option<f64>,
    pub evaluations: Option<usize>,
    pub error: Option<String>,
}

/// Runs every (value, seed, scheme) cell. `build` makes the scenario of a
/// cell from the swept value and seed, and returns the optimizer settings to
/// use there. Cells run on at most `workers` threads; rows come back in
/// value, seed, scheme order.
pub fn run_grid<F>(grid: &ExperimentGrid, build: F, policy: Option<&Policy>, env: &EnvConfig, workers: usize) -> Result<Vec<GridRow>>
where
    F: Fn(f64, u64) -> Result<(Scenario, OptimizerConfig)> + Sync,
{
    grid.validate()?;
    let cells: Vec<(f64, u64)> = grid.values.iter().flat_map(|&v| grid.seeds.iter().map(move |&s| (v, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;
    let rows: Vec<Vec<GridRow>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(value, seed)| {
                let built = build(value, seed);
                grid.schemes
                    .iter()
                    .map(|&scheme| {
                        let outcome = built
                            .as_ref()
                            .map_err(|e| e.to_string())
                            .and_then(|(sc, opt)| run_scheme(scheme, sc, policy, env, opt).map_err(|e| e.to_string()));
                        row(grid.variable, value, scheme, seed, outcome)
                    })
                    .collect()
            })
            .collect()
    });
    Ok(rows.into_iter().flatten().collect())
}

fn row(variable: SweepVariable, value: f64, scheme: Scheme, seed: u64, outcome: std::result::Result<SchemeResult, String>) -> GridRow {
    match outcome {
        Ok(r) => GridRow {
            variable,
            value,
            scheme,
            seed,
            objective: Some(r.objective),
            mean_alpha: Some(r.alphas.iter().sum::<f64>() / r.alphas.len().max(1) as f64),
            mean_local: Some(r.mean(|b| b.local)),
            mean_offload: Some(r.mean(|b| b.offload_branch())),
            mean_model: Some(r.mean(|b| b.model_total)),
            evaluations: Some(r.evaluations),
            error: None,
        },
        Err(e) => GridRow {
            variable,
            value,
            scheme,
            seed,
            objective: None,
            mean_alpha: None,
            mean_local: None,
            mean_offload: None,
            mean_model: None,
            evaluations: None,
            error: Some(e),
        },
    }
}

//! Online bisection over the per-task allocation ratios.
//!
//! Every iteration evaluates all tasks jointly at the current midpoints (the
//! tasks share links, so one rollout serves all of them) and then moves each
//! task's interval by its own balance criterion: if local inference is the
//! slower branch, offload more; otherwise offload less.

use serde::{Deserialize, Serialize};

use crate::bench::oracle::dijkstra_route;
use crate::constellation::NodeId;
use crate::delay::{DelayBreakdown, PacketClass, RoutePair, TaskTraffic};
use crate::env::EnvConfig;
use crate::error::{Constraint, Error, Result};
use crate::qmix::Policy;
use crate::scenario::Scenario;

/// Why a task has no delay breakdown at some allocation ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TaskIssue {
    Infeasible { constraint: Constraint, detail: String },
    RouteFailed { detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub alphas: Vec<f64>,
    /// One entry per task; `None` where `issues` holds the cause.
    pub breakdowns: Vec<Option<DelayBreakdown>>,
    pub issues: Vec<Option<TaskIssue>>,
    /// Routes of every task (empty pairs for tasks without traffic).
    pub routes: Vec<RoutePair>,
    /// Packet sizes committed for each task, where feasible.
    pub traffic: Vec<Option<TaskTraffic>>,
    /// Computing satellite each task's model packet left from.
    pub origins: Vec<NodeId>,
}

impl EvaluationResult {
    pub fn feasible(&self) -> bool {
        self.issues.iter().all(Option::is_none) && self.breakdowns.iter().all(Option::is_some)
    }

    /// Mean service delay over all tasks, if every task was served.
    pub fn objective(&self) -> Option<f64> {
        if !self.feasible() || self.breakdowns.is_empty() {
            return None;
        }
        Some(self.breakdowns.iter().flatten().map(|b| b.total).sum::<f64>() / self.breakdowns.len() as f64)
    }
}

/// Anything that can price a vector of allocation ratios.
pub trait DelayEvaluator {
    fn num_tasks(&self) -> usize;
    fn evaluate(&mut self, alphas: &[f64]) -> Result<EvaluationResult>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BisectionState {
    pub low: Vec<f64>,
    pub up: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Iterations evaluated so far.
    pub k: usize,
}

impl BisectionState {
    pub fn new(tasks: usize) -> Self {
        BisectionState { low: vec![0.0; tasks], up: vec![1.0; tasks], alpha: vec![0.5; tasks], k: 0 }
    }

    pub fn width(&self, task: usize) -> f64 {
        self.up[task] - self.low[task]
    }

    /// Halves every task's interval. A task whose local branch is slower
    /// raises its lower bound. An infeasible large-model accuracy floor also
    /// raises it, since more offloaded frames relax that floor. Everything
    /// else (offload branch binding, failed routes) lowers the upper bound.
    pub fn update(&mut self, result: &EvaluationResult) {
        for i in 0..self.alpha.len() {
            let raise = match (&result.breakdowns[i], &result.issues[i]) {
                (_, Some(TaskIssue::Infeasible { constraint: Constraint::LargeModelAccuracy, .. })) => true,
                (_, Some(_)) => false,
                (Some(b), None) => b.local > b.offload_branch(),
                (None, None) => false,
            };
            if raise {
                self.low[i] = self.alpha[i];
            } else {
                self.up[i] = self.alpha[i];
            }
            self.alpha[i] = 0.5 * (self.low[i] + self.up[i]);
        }
        self.k += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Maximum bisection iterations K.
    pub iterations: usize,
    /// Stop once the objective rises above the previous iteration's.
    pub early_stop: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { iterations: 10, early_stop: true }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("optimizer.iterations must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub low: Vec<f64>,
    pub up: Vec<f64>,
    pub result: EvaluationResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    /// Lowest-objective feasible iterate.
    pub best: EvaluationResult,
    pub best_k: usize,
    /// Most recent evaluation, i.e. the bisection's converged point.
    pub last: EvaluationResult,
    pub trace: Vec<IterationRecord>,
    pub stopped_early: bool,
}

/// Runs up to `config.iterations` joint bisection steps starting from the
/// midpoint of [0, 1].
pub fn run(evaluator: &mut dyn DelayEvaluator, config: &OptimizerConfig) -> Result<RunOutcome> {
    config.validate()?;
    let n = evaluator.num_tasks();
    let mut state = BisectionState::new(n);
    let mut trace = Vec::with_capacity(config.iterations);
    let mut best: Option<(usize, EvaluationResult, f64)> = None;
    let mut previous: Option<f64> = None;
    let mut stopped_early = false;
    for k in 1..=config.iterations {
        let result = evaluator.evaluate(&state.alpha)?;
        let objective = result.objective();
        trace.push(IterationRecord { k, low: state.low.clone(), up: state.up.clone(), result: result.clone() });
        if let Some(obj) = objective {
            if best.as_ref().is_none_or(|(_, _, b)| obj < *b) {
                best = Some((k, result.clone(), obj));
            }
        }
        if config.early_stop {
            if let (Some(prev), Some(obj)) = (previous, objective) {
                if obj > prev {
                    stopped_early = true;
                    break;
                }
            }
        }
        if objective.is_some() {
            previous = objective;
        }
        if k < config.iterations {
            state.update(&result);
        }
    }
    let last = trace.last().expect("at least one iteration").result.clone();
    let Some((best_k, best, _)) = best else {
        let causes: Vec<String> = last
            .issues
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.as_ref().map(|c| format!("task {i}: {c:?}")))
            .collect();
        return Err(Error::Optimizer(format!("no feasible iterate in {} iterations; {}", trace.len(), causes.join("; "))));
    };
    Ok(RunOutcome { best, best_k, last, trace, stopped_early })
}

/// How packets are routed during an evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Routing<'a> {
    /// Greedy rollout of a trained policy.
    Learned(&'a Policy),
    /// Unit-load shortest-delay paths.
    ShortestPath,
}

/// Evaluates allocation ratios on a scenario: solves the packet-size
/// subproblems, routes the packets and prices the round. After each call the
/// model-packet origin of every task moves to the computing satellite its
/// data packet reached.
pub struct ScenarioEvaluator<'a> {
    pub scenario: &'a Scenario,
    pub routing: Routing<'a>,
    pub env: EnvConfig,
    pub origins: Vec<NodeId>,
    initial_origins: Vec<NodeId>,
}

impl<'a> ScenarioEvaluator<'a> {
    pub fn new(scenario: &'a Scenario, routing: Routing<'a>, env: EnvConfig) -> Result<Self> {
        let origins = scenario.default_origins()?;
        Ok(ScenarioEvaluator { scenario, routing, env, initial_origins: origins.clone(), origins })
    }

    /// Restores the nearest-computing-satellite origins.
    pub fn reset(&mut self) {
        self.origins.clone_from(&self.initial_origins);
    }

    /// Prices explicit traffic (`None` entries are tasks that send nothing
    /// and are reported with `issue`).
    pub fn evaluate_traffic(&mut self, alphas: &[f64], traffic: Vec<Option<TaskTraffic>>, mut issues: Vec<Option<TaskIssue>>) -> Result<EvaluationResult> {
        let sc = self.scenario;
        let n = sc.tasks.len();
        let served: Vec<usize> = (0..n).filter(|&i| traffic[i].is_some()).collect();
        let sub_traffic: Vec<TaskTraffic> = served.iter().map(|&i| traffic[i].clone().expect("served")).collect();
        let sub_origins: Vec<NodeId> = served.iter().map(|&i| self.origins[i]).collect();
        let mut routes: Vec<RoutePair> = (0..n).map(|i| RoutePair { task: i, data: None, model: None }).collect();
        let mut breakdowns: Vec<Option<DelayBreakdown>> = vec![None; n];

        let sub_routes: Vec<Option<RoutePair>> = match self.routing {
            Routing::ShortestPath => {
                let cpt = sc.computing_nodes();
                sub_traffic
                    .iter()
                    .zip(&sub_origins)
                    .map(|(t, &o)| {
                        let model = t
                            .sends(PacketClass::Model)
                            .then(|| dijkstra_route(&sc.snapshot, &sc.nodes, o, &[t.task.source], t.model_bits).map(|r| r.0))
                            .transpose();
                        let data = t
                            .sends(PacketClass::Data)
                            .then(|| dijkstra_route(&sc.snapshot, &sc.nodes, t.task.source, &cpt, t.data_bits).map(|r| r.0))
                            .transpose();
                        match (model, data) {
                            (Ok(model), Ok(data)) => Some(RoutePair { task: 0, model, data }),
                            _ => None,
                        }
                    })
                    .collect()
            }
            Routing::Learned(policy) => {
                let mut env = sc.env(sub_traffic.clone(), &sub_origins, EnvConfig { max_tasks: policy.max_tasks, ..self.env.clone() })?;
                policy.run_greedy(&mut env, None)?;
                let state = env.state();
                let m = sub_traffic.len();
                (0..m)
                    .map(|j| {
                        let ok = |k: usize| {
                            matches!(state.packets[k].status, crate::env::PacketStatus::Unused | crate::env::PacketStatus::Delivered)
                        };
                        (ok(j) && ok(m + j)).then(|| {
                            let path = |k: usize| {
                                (state.packets[k].status == crate::env::PacketStatus::Delivered).then(|| state.packets[k].path.clone())
                            };
                            RoutePair { task: 0, model: path(j), data: path(m + j) }
                        })
                    })
                    .collect()
            }
        };

        // Price only complete routes; failed packets still occupy no links
        // in the committed round.
        let mut priced_traffic = Vec::new();
        let mut priced_routes = Vec::new();
        let mut priced_origins = Vec::new();
        let mut priced_ids = Vec::new();
        for (j, &i) in served.iter().enumerate() {
            match &sub_routes[j] {
                Some(r) => {
                    routes[i] = RoutePair { task: i, ..r.clone() };
                    priced_traffic.push(sub_traffic[j].clone());
                    priced_routes.push(routes[i].clone());
                    priced_origins.push(sub_origins[j]);
                    priced_ids.push(i);
                }
                None => {
                    issues[i] = Some(TaskIssue::RouteFailed { detail: format!("no complete route for task {i}") });
                }
            }
        }
        let priced = sc.evaluate(&priced_traffic, &priced_routes, &priced_origins)?;
        for (b, &i) in priced.into_iter().zip(&priced_ids) {
            breakdowns[i] = Some(b);
        }
        let origins_used = self.origins.clone();
        for (i, r) in routes.iter().enumerate() {
            if let Some(&k) = r.data.as_ref().and_then(|d| d.last()) {
                self.origins[i] = k;
            }
        }
        Ok(EvaluationResult { alphas: alphas.to_vec(), breakdowns, issues, routes, traffic, origins: origins_used })
    }
}

impl DelayEvaluator for ScenarioEvaluator<'_> {
    fn num_tasks(&self) -> usize {
        self.scenario.tasks.len()
    }

    fn evaluate(&mut self, alphas: &[f64]) -> Result<EvaluationResult> {
        if alphas.len() != self.num_tasks() {
            return Err(Error::contract("one allocation ratio per task"));
        }
        if let Some(&a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Domain { value: a, lo: 0.0, hi: 1.0 });
        }
        let mut traffic = Vec::with_capacity(alphas.len());
        let mut issues = Vec::with_capacity(alphas.len());
        for c in self.scenario.commit(alphas) {
            match c {
                Ok(c) => {
                    traffic.push(Some(c.traffic));
                    issues.push(None);
                }
                Err(Error::Infeasible { constraint, detail }) => {
                    traffic.push(None);
                    issues.push(Some(TaskIssue::Infeasible { constraint, detail }));
                }
                Err(e) => return Err(e),
            }
        }
        self.evaluate_traffic(alphas, traffic, issues)
    }
}

/// Closed-form delay branches for testing the search itself:
/// `T_loc = a·(1 − α)` and `T_d + T_lar = b·α` per task, with no transfer
/// terms. Their crossing is `α* = a / (a + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBranches {
    pub local: Vec<f64>,
    pub offload: Vec<f64>,
}

impl LinearBranches {
    pub fn crossing(&self, task: usize) -> f64 {
        self.local[task] / (self.local[task] + self.offload[task])
    }
}

impl DelayEvaluator for LinearBranches {
    fn num_tasks(&self) -> usize {
        self.local.len()
    }

    fn evaluate(&mut self, alphas: &[f64]) -> Result<EvaluationResult> {
        let n = self.num_tasks();
        let breakdowns = alphas
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let local = self.local[i] * (1.0 - a);
                let large = self.offload[i] * a;
                let binding = if large >= local { crate::delay::Branch::Offload } else { crate::delay::Branch::Local };
                Some(DelayBreakdown { local, large, total: local.max(large), binding, ..DelayBreakdown::default() })
            })
            .collect();
        Ok(EvaluationResult {
            alphas: alphas.to_vec(),
            breakdowns,
            issues: vec![None; n],
            routes: (0..n).map(|i| RoutePair { task: i, data: None, model: None }).collect(),
            traffic: vec![None; n],
            origins: vec![0; n],
        })
    }
}

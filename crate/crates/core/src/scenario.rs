//! A concrete problem instance: one topology snapshot, role placement and
//! the sensing tasks of every remote sensing satellite.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::bench::oracle::{dijkstra_route, hop_distances};
use crate::constellation::{build_shell, random_roles, NodeAttributes, NodeId, Role, SatelliteNode, ShellConfig, TopologySnapshot};
use crate::delay::{evaluate_round, DelayBreakdown, PacketClass, RoutePair, TaskTraffic};
use crate::env::{EnvConfig, EpisodeTask, RoutingEnv};
use crate::error::{Error, Result};
use crate::workload::{image_volume, plan_for, MapSurrogate, OffloadPlan, SensingTask, TaskTemplate};

#[derive(Debug, Clone)]
pub struct Scenario {
    pub snapshot: Arc<TopologySnapshot>,
    pub nodes: Arc<[SatelliteNode]>,
    /// One task per remote sensing satellite, in ascending source order.
    pub tasks: Vec<SensingTask>,
    pub surrogate: MapSurrogate,
}

/// Packet sizes committed for one task at a given allocation ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommittedTask {
    pub plan: OffloadPlan,
    pub traffic: TaskTraffic,
}

impl Scenario {
    pub fn new(snapshot: Arc<TopologySnapshot>, nodes: Arc<[SatelliteNode]>, tasks: Vec<SensingTask>, surrogate: MapSurrogate) -> Result<Self> {
        if nodes.len() != snapshot.num_nodes() {
            return Err(Error::config("node list does not match the snapshot"));
        }
        for t in &tasks {
            t.validate()?;
            match nodes.get(t.source).map(|n| n.role) {
                Some(Role::RemoteSensing) => {}
                _ => return Err(Error::config(format!("task source {} is not a remote sensing satellite", t.source))),
            }
        }
        if !tasks.is_empty() && nodes.iter().all(|n| n.role != Role::Computing) {
            return Err(Error::config("no computing satellite in the constellation"));
        }
        surrogate.validate()?;
        Ok(Scenario { snapshot, nodes, tasks, surrogate })
    }

    pub fn computing_nodes(&self) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| n.role == Role::Computing).map(|n| n.id).collect()
    }

    /// Computing satellite with the fewest role-constrained hops to `source`,
    /// lowest id on ties.
    pub fn nearest_computing(&self, source: NodeId) -> Result<NodeId> {
        let dist = hop_distances(&self.snapshot, &self.nodes, &[source]);
        self.computing_nodes()
            .into_iter()
            .filter(|&k| dist[k] != usize::MAX)
            .min_by_key(|&k| (dist[k], k))
            .ok_or(Error::NoRoute { source_node: source, targets: self.computing_nodes() })
    }

    pub fn default_origins(&self) -> Result<Vec<NodeId>> {
        self.tasks.iter().map(|t| self.nearest_computing(t.source)).collect()
    }

    /// Solves both packet-size subproblems for every task.
    pub fn commit(&self, alphas: &[f64]) -> Vec<Result<CommittedTask>> {
        assert_eq!(alphas.len(), self.tasks.len(), "one allocation ratio per task");
        self.tasks
            .iter()
            .zip(alphas)
            .map(|(task, &alpha)| {
                let (plan, data_bits) = plan_for(task, alpha, &self.surrogate)?;
                let traffic = TaskTraffic {
                    task: task.clone(),
                    alpha,
                    data_bits,
                    model_bits: plan.model_bits,
                    extract_features: true,
                };
                Ok(CommittedTask { plan, traffic })
            })
            .collect()
    }

    /// Raw-frame offload of every frame with no model update.
    pub fn centralized_traffic(&self) -> Vec<TaskTraffic> {
        self.tasks
            .iter()
            .map(|t| TaskTraffic {
                task: t.clone(),
                alpha: 1.0,
                data_bits: image_volume(t),
                model_bits: 0.0,
                extract_features: false,
            })
            .collect()
    }

    /// Unit-load shortest-delay routes for every packet a task sends.
    pub fn dijkstra_routes(&self, traffic: &[TaskTraffic], origins: &[NodeId]) -> Result<Vec<RoutePair>> {
        let cpt = self.computing_nodes();
        traffic
            .iter()
            .zip(origins)
            .enumerate()
            .map(|(i, (t, &origin))| {
                let model = if t.sends(PacketClass::Model) {
                    Some(dijkstra_route(&self.snapshot, &self.nodes, origin, &[t.task.source], t.model_bits)?.0)
                } else {
                    None
                };
                let data = if t.sends(PacketClass::Data) {
                    Some(dijkstra_route(&self.snapshot, &self.nodes, t.task.source, &cpt, t.data_bits)?.0)
                } else {
                    None
                };
                Ok(RoutePair { task: i, data, model })
            })
            .collect()
    }

    pub fn evaluate(&self, traffic: &[TaskTraffic], routes: &[RoutePair], origins: &[NodeId]) -> Result<Vec<DelayBreakdown>> {
        evaluate_round(traffic, routes, &self.snapshot, &self.nodes, origins)
    }

    /// Environment tasks whose reference delay is the service delay of the
    /// same traffic under unit-load shortest-delay routing.
    pub fn episode_tasks(&self, traffic: Vec<TaskTraffic>, origins: &[NodeId]) -> Result<Vec<EpisodeTask>> {
        let routes = self.dijkstra_routes(&traffic, origins)?;
        let delays = self.evaluate(&traffic, &routes, origins)?;
        Ok(traffic
            .into_iter()
            .zip(origins)
            .zip(delays)
            .map(|((traffic, &model_origin), d)| EpisodeTask { traffic, model_origin, reference_delay: d.total })
            .collect())
    }

    pub fn env(&self, traffic: Vec<TaskTraffic>, origins: &[NodeId], config: EnvConfig) -> Result<RoutingEnv> {
        let tasks = self.episode_tasks(traffic, origins)?;
        RoutingEnv::new(self.snapshot.clone(), self.nodes.clone(), tasks, config)
    }
}

/// Draws training instances around a base scenario: optionally reshuffled
/// role placement, random allocation ratios and jittered frame counts.
#[derive(Debug, Clone)]
pub struct InstanceSampler {
    pub shell: ShellConfig,
    pub attributes: NodeAttributes,
    pub template: TaskTemplate,
    pub base: Scenario,
    pub env: EnvConfig,
    /// Probability of drawing a fresh random role placement.
    pub reshuffle_roles: f64,
    /// Allocation ratios are drawn uniformly from this interval.
    pub alpha_range: (f64, f64),
    /// Frame counts are scaled by a factor drawn from `[1 - j, 1 + j]`.
    pub frame_jitter: f64,
    /// Probability of keeping only a random non-empty subset of the tasks.
    pub task_subset: f64,
}

const RESHUFFLE_ATTEMPTS: usize = 16;

impl InstanceSampler {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<RoutingEnv> {
        let n_rs = self.base.tasks.len();
        let mut scenario = self.base.clone();
        if self.reshuffle_roles > 0.0 && rng.gen::<f64>() < self.reshuffle_roles {
            // a placement can wall a remote sensing satellite in behind
            // non-relays; redraw a few times, then keep the base placement
            for _ in 0..RESHUFFLE_ATTEMPTS {
                let roles = random_roles(&self.shell, n_rs, self.base.computing_nodes().len(), rng)?;
                let c = build_shell(&self.shell, &roles, &self.attributes)?;
                let tasks = c.ids_with_role(Role::RemoteSensing).into_iter().map(|s| self.template.instantiate(s)).collect();
                let candidate = Scenario::new(self.base.snapshot.clone(), c.nodes.into(), tasks, self.base.surrogate.clone())?;
                if candidate.default_origins().is_ok() {
                    scenario = candidate;
                    break;
                }
            }
        }
        let scenario = if self.task_subset > 0.0 && n_rs > 1 && rng.gen::<f64>() < self.task_subset {
            let k = rng.gen_range(1..=n_rs);
            let mut keep: Vec<usize> = (0..n_rs).collect();
            keep.shuffle(rng);
            keep.truncate(k);
            keep.sort_unstable();
            Scenario { tasks: keep.iter().map(|&i| scenario.tasks[i].clone()).collect(), ..scenario }
        } else {
            scenario
        };
        let origins = scenario.default_origins()?;
        let (lo, hi) = self.alpha_range;
        let mut traffic = Vec::with_capacity(n_rs);
        for task in &scenario.tasks {
            let mut task = task.clone();
            if self.frame_jitter > 0.0 {
                task.frames = (task.frames * rng.gen_range(1.0 - self.frame_jitter..=1.0 + self.frame_jitter)).max(1.0).round();
            }
            let alpha = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            let (plan, data_bits) = plan_for(&task, alpha, &scenario.surrogate)?;
            traffic.push(TaskTraffic { task, alpha, data_bits, model_bits: plan.model_bits, extract_features: true });
        }
        scenario.env(traffic, &origins, self.env.clone())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::constellation::{build_shell, scattered_roles, snapshot_topology, LinkBudget, NodeAttributes, ShellConfig};
    use crate::workload::TaskTemplate;

    pub(crate) fn default_scenario() -> Scenario {
        let cfg = ShellConfig::default();
        let roles = scattered_roles(&cfg, 6, 3).unwrap();
        let c = build_shell(&cfg, &roles, &NodeAttributes::default()).unwrap();
        let snap = snapshot_topology(&c, 0, &LinkBudget::default());
        let tpl = TaskTemplate::default();
        let tasks = c.ids_with_role(Role::RemoteSensing).into_iter().map(|s| tpl.instantiate(s)).collect();
        Scenario::new(Arc::new(snap), c.nodes.into(), tasks, MapSurrogate::default()).unwrap()
    }

    #[test]
    fn origins_are_computing_nodes() {
        let sc = default_scenario();
        for o in sc.default_origins().unwrap() {
            assert_eq!(sc.nodes[o].role, Role::Computing);
        }
    }

    #[test]
    fn dijkstra_round_is_complete() {
        let sc = default_scenario();
        let origins = sc.default_origins().unwrap();
        let traffic: Vec<_> = sc.commit(&[0.5; 6]).into_iter().map(|c| c.unwrap().traffic).collect();
        let routes = sc.dijkstra_routes(&traffic, &origins).unwrap();
        let d = sc.evaluate(&traffic, &routes, &origins).unwrap();
        assert_eq!(d.len(), 6);
        assert!(d.iter().all(|b| b.total.is_finite() && b.total > 0.0));
    }

    #[test]
    fn low_alpha_is_infeasible() {
        let sc = default_scenario();
        let out = sc.commit(&[0.1; 6]);
        assert!(out.iter().all(|r| matches!(r, Err(Error::Infeasible { .. }))));
    }
}

//! Multi-agent packet-routing environment over one topology snapshot.
//!
//! Agents are task slots: slot `i` controls whichever packet of task `i` is
//! live in the current phase, acting through the satellite that holds it.
//! The model phase moves update packets from their computing satellite to the
//! task's remote sensing satellite; the data phase then moves feature
//! packets from the remote sensing satellite to any computing satellite.
//! Rewards are terminal only.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::oracle::{dijkstra_route, hop_distances};
use crate::constellation::{Direction, NodeId, Role, SatelliteNode, TopologySnapshot};
use crate::delay::{propagation_time, relay_processing_time, task_delay, transmission_time, DelayBreakdown, LinkLoad, PacketClass, RelayLoad, RoutePair, TaskTraffic};
use crate::error::{Error, Result};

pub const NUM_ACTIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    NoOp,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::NoOp];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    pub fn direction(self) -> Option<Direction> {
        match self {
            Action::NoOp => None,
            a => Some(Direction::ALL[a.index()]),
        }
    }
}

pub type ActionMask = [bool; NUM_ACTIONS];

/// Only the no-op is legal.
pub const IDLE_MASK: ActionMask = [false, false, false, false, true];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Number of agent slots; tasks beyond this are rejected.
    pub max_tasks: usize,
    /// Steps per episode; `None` means 4·(planes + sats_per_plane).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_limit: Option<usize>,
    pub completion_reward: f64,
    /// Weight δ of the delay-shaped term.
    pub delta: f64,
    /// Sigmoid temperature μ.
    pub mu: f64,
    /// Normalized delay charged to tasks that did not complete.
    pub max_normalized_delay: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { max_tasks: 6, step_limit: None, completion_reward: 1.0, delta: 10.0, mu: 0.5, max_normalized_delay: 10.0 }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_tasks == 0 {
            return Err(Error::config("env.max_tasks must be positive"));
        }
        if self.step_limit == Some(0) {
            return Err(Error::config("env.step_limit must be positive"));
        }
        if !(self.mu > 0.0) || !self.delta.is_finite() || !self.completion_reward.is_finite() {
            return Err(Error::config("env.mu must be positive and reward weights finite"));
        }
        if !(self.max_normalized_delay > 1.0) {
            return Err(Error::config("env.max_normalized_delay must exceed 1"));
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        OBS_FIXED + self.max_tasks
    }

    pub fn state_dim(&self) -> usize {
        STATE_PER_SLOT * self.max_tasks + 2
    }
}

const OBS_FIXED: usize = 21;
const STATE_PER_SLOT: usize = 9;

/// What the environment needs to know about one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTask {
    pub traffic: TaskTraffic,
    /// Computing satellite the model packet leaves from.
    pub model_origin: NodeId,
    /// Service delay that maps to a normalized delay of one.
    pub reference_delay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Model,
    Data,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PacketStatus {
    /// The task sends no packet of this class.
    Unused,
    /// Created but its phase has not started.
    Waiting,
    InFlight,
    Delivered,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Packet {
    pub task: usize,
    pub class: PacketClass,
    pub status: PacketStatus,
    /// Visited nodes in order, origin first.
    pub path: Vec<NodeId>,
    /// Unit-load delay accumulated so far.
    pub accumulated_delay: f64,
    /// Unit-load shortest delay from the origin, used for normalization.
    pub reference_delay: f64,
}

impl Packet {
    pub fn node(&self) -> NodeId {
        *self.path.last().expect("packet path starts at its origin")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalState {
    pub phase: Phase,
    pub step: usize,
    /// Model packets of tasks `0..n`, then data packets of tasks `0..n`.
    pub packets: Vec<Packet>,
    pub link_load: LinkLoad,
    pub relay_load: RelayLoad,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSignal {
    pub r0: f64,
    pub r1: f64,
    pub total: f64,
    pub delta: f64,
    pub mu: f64,
    pub completed: usize,
    /// T_i^total / T_ref per task, capped; failed tasks carry the cap.
    pub normalized_delays: Vec<f64>,
    pub breakdowns: Vec<Option<DelayBreakdown>>,
}

impl RewardSignal {
    /// Mean model-plus-data transfer time over completed tasks.
    pub fn mean_transfer_delay(&self) -> Option<f64> {
        let done: Vec<f64> = self.breakdowns.iter().flatten().map(|b| b.transfer_time()).collect();
        (!done.is_empty()).then(|| done.iter().sum::<f64>() / done.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
}

/// One line of an episode transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptStep {
    pub step: usize,
    pub phase: Phase,
    /// Short digest of each slot's observation; `None` for idle slots.
    pub obs_hashes: Vec<Option<String>>,
    pub actions: Vec<Action>,
    /// Non-zero link counters as `(link, [model, data])`.
    pub link_loads: Vec<(usize, [u32; 2])>,
    pub reward: f64,
    pub done: bool,
}

pub struct RoutingEnv {
    config: EnvConfig,
    snapshot: Arc<TopologySnapshot>,
    nodes: Arc<[SatelliteNode]>,
    tasks: Vec<EpisodeTask>,
    computing: Vec<NodeId>,
    model_dist: Vec<Vec<usize>>,
    data_dist: Vec<usize>,
    planes: usize,
    sats_per_plane: usize,
    step_limit: usize,
    dist_scale: f64,
    state: GlobalState,
}

impl RoutingEnv {
    pub fn new(
        snapshot: Arc<TopologySnapshot>,
        nodes: Arc<[SatelliteNode]>,
        tasks: Vec<EpisodeTask>,
        config: EnvConfig,
    ) -> Result<Self> {
        config.validate()?;
        let n = snapshot.num_nodes();
        if nodes.len() != n {
            return Err(Error::config("node list does not match the snapshot"));
        }
        if tasks.len() > config.max_tasks {
            return Err(Error::config(format!("{} tasks exceed env.max_tasks = {}", tasks.len(), config.max_tasks)));
        }
        for t in &tasks {
            let src = t.traffic.task.source;
            if src >= n || nodes[src].role != Role::RemoteSensing {
                return Err(Error::config(format!("task source {src} is not a remote sensing satellite")));
            }
            if t.traffic.sends(PacketClass::Model) && (t.model_origin >= n || nodes[t.model_origin].role != Role::Computing) {
                return Err(Error::config(format!("model origin {} is not a computing satellite", t.model_origin)));
            }
            if !(t.reference_delay > 0.0 && t.reference_delay.is_finite()) {
                return Err(Error::config("reference delay must be positive and finite"));
            }
        }
        let computing: Vec<NodeId> = nodes.iter().filter(|s| s.role == Role::Computing).map(|s| s.id).collect();
        let model_dist = tasks.iter().map(|t| hop_distances(&snapshot, &nodes, &[t.traffic.task.source])).collect();
        let data_dist = hop_distances(&snapshot, &nodes, &computing);
        let planes = nodes.iter().map(|s| s.plane).max().map_or(1, |p| p + 1);
        let sats_per_plane = nodes.iter().map(|s| s.slot_in_plane).max().map_or(1, |s| s + 1);
        let step_limit = config.step_limit.unwrap_or(4 * (planes + sats_per_plane));
        let dist_scale = (2 * (planes / 2 + sats_per_plane / 2)).max(1) as f64;
        let state = GlobalState {
            phase: Phase::Model,
            step: 0,
            packets: Vec::new(),
            link_load: LinkLoad::new(snapshot.links.len()),
            relay_load: RelayLoad::new(n),
            done: true,
        };
        let mut env = RoutingEnv {
            config,
            snapshot,
            nodes,
            tasks,
            computing,
            model_dist,
            data_dist,
            planes,
            sats_per_plane,
            step_limit,
            dist_scale,
            state,
        };
        env.reset();
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn num_slots(&self) -> usize {
        self.config.max_tasks
    }

    pub fn tasks(&self) -> &[EpisodeTask] {
        &self.tasks
    }

    pub fn snapshot(&self) -> &TopologySnapshot {
        &self.snapshot
    }

    pub fn nodes(&self) -> &[SatelliteNode] {
        &self.nodes
    }

    pub fn state(&self) -> &GlobalState {
        &self.state
    }

    pub fn step_limit(&self) -> usize {
        self.step_limit
    }

    pub fn is_done(&self) -> bool {
        self.state.done
    }

    /// Places model packets at their origins and clears all counters.
    pub fn reset(&mut self) {
        let n = self.tasks.len();
        let mut packets = Vec::with_capacity(2 * n);
        for class in [PacketClass::Model, PacketClass::Data] {
            for (i, t) in self.tasks.iter().enumerate() {
                let origin = match class {
                    PacketClass::Model => t.model_origin,
                    PacketClass::Data => t.traffic.task.source,
                };
                let status = if !t.traffic.sends(class) {
                    PacketStatus::Unused
                } else if class == PacketClass::Model {
                    PacketStatus::InFlight
                } else {
                    PacketStatus::Waiting
                };
                let targets = match class {
                    PacketClass::Model => vec![t.traffic.task.source],
                    PacketClass::Data => self.computing.clone(),
                };
                let reference_delay = if status == PacketStatus::Unused {
                    0.0
                } else {
                    dijkstra_route(&self.snapshot, &self.nodes, origin, &targets, t.traffic.bits(class))
                        .map(|(_, d)| d)
                        .unwrap_or(0.0)
                };
                packets.push(Packet {
                    task: i,
                    class,
                    status,
                    path: vec![origin],
                    accumulated_delay: 0.0,
                    reference_delay,
                });
            }
        }
        self.state = GlobalState {
            phase: Phase::Model,
            step: 0,
            packets,
            link_load: LinkLoad::new(self.snapshot.links.len()),
            relay_load: RelayLoad::new(self.snapshot.num_nodes()),
            done: false,
        };
        self.mark_dead_ends();
        self.advance_phase();
    }

    fn packet_index(&self, slot: usize) -> usize {
        match self.state.phase {
            Phase::Model => slot,
            Phase::Data => self.tasks.len() + slot,
        }
    }

    /// The live packet controlled by `slot`, if any.
    pub fn packet(&self, slot: usize) -> Option<&Packet> {
        if self.state.done || slot >= self.tasks.len() {
            return None;
        }
        let p = &self.state.packets[self.packet_index(slot)];
        (p.status == PacketStatus::InFlight).then_some(p)
    }

    pub fn is_active(&self, slot: usize) -> bool {
        self.packet(slot).is_some()
    }

    pub fn active_slots(&self) -> Vec<usize> {
        (0..self.num_slots()).filter(|&s| self.is_active(s)).collect()
    }

    fn is_terminus(&self, p: &Packet, node: NodeId) -> bool {
        match p.class {
            PacketClass::Model => node == self.tasks[p.task].traffic.task.source,
            PacketClass::Data => self.nodes[node].role == Role::Computing,
        }
    }

    fn move_allowed(&self, p: &Packet, next: NodeId) -> bool {
        !p.path.contains(&next) && (self.nodes[next].role == Role::Relay || self.is_terminus(p, next))
    }

    fn packet_mask(&self, p: &Packet) -> ActionMask {
        let mut mask = [false; NUM_ACTIONS];
        for (d, nb) in self.snapshot.neighbors[p.node()].iter().enumerate() {
            if let Some(nb) = nb {
                mask[d] = self.snapshot.links[nb.link].usable() && self.move_allowed(p, nb.node);
            }
        }
        mask
    }

    /// Legal actions for `slot`. Slots without a live packet may only no-op.
    pub fn action_mask(&self, slot: usize) -> ActionMask {
        match self.packet(slot) {
            Some(p) => self.packet_mask(p),
            None => IDLE_MASK,
        }
    }

    fn mark_dead_ends(&mut self) {
        let stuck: Vec<usize> = (0..self.state.packets.len())
            .filter(|&i| {
                let p = &self.state.packets[i];
                p.status == PacketStatus::InFlight && !self.packet_mask(p)[..4].iter().any(|&b| b)
            })
            .collect();
        for i in stuck {
            self.state.packets[i].status = PacketStatus::Failed;
        }
    }

    fn live(&self, class: PacketClass) -> bool {
        self.state.packets.iter().any(|p| p.class == class && p.status == PacketStatus::InFlight)
    }

    fn advance_phase(&mut self) {
        if self.state.phase == Phase::Model && !self.live(PacketClass::Model) {
            self.state.phase = Phase::Data;
            for p in self.state.packets.iter_mut() {
                if p.class == PacketClass::Data && p.status == PacketStatus::Waiting {
                    p.status = PacketStatus::InFlight;
                }
            }
            self.mark_dead_ends();
        }
        if self.state.phase == Phase::Data && !self.live(PacketClass::Data) {
            self.state.done = true;
        }
    }

    /// Moves every live packet one hop. `actions` has one entry per slot.
    pub fn step(&mut self, actions: &[Action]) -> Result<StepOutcome> {
        if self.state.done {
            return Err(Error::contract("step called on a finished episode"));
        }
        if actions.len() != self.num_slots() {
            return Err(Error::contract(format!("expected {} actions, got {}", self.num_slots(), actions.len())));
        }
        for (slot, &a) in actions.iter().enumerate() {
            if !self.action_mask(slot)[a.index()] {
                return Err(Error::contract(format!("illegal action {a:?} for slot {slot}")));
            }
        }
        for (slot, &a) in actions.iter().enumerate() {
            let Some(dir) = a.direction() else { continue };
            let idx = self.packet_index(slot);
            let from = self.state.packets[idx].node();
            let nb = self.snapshot.neighbors[from][dir.index()].expect("mask admits only existing links");
            let link = &self.snapshot.links[nb.link];
            let p = &self.state.packets[idx];
            let class = p.class;
            let bits = self.tasks[p.task].traffic.bits(class);
            let terminus = self.is_terminus(p, nb.node);
            let mut hop = transmission_time(bits, link.rate_bps, 1)? + propagation_time(link.length_m);
            self.state.link_load.add(nb.link, class);
            if !terminus {
                hop += relay_processing_time(bits, self.nodes[nb.node].relay_cost, 1);
                self.state.relay_load.add(nb.node, class);
            }
            let p = &mut self.state.packets[idx];
            p.path.push(nb.node);
            p.accumulated_delay += hop;
            if terminus {
                p.status = PacketStatus::Delivered;
            }
        }
        self.state.step += 1;
        self.mark_dead_ends();
        self.advance_phase();
        if !self.state.done && self.state.step >= self.step_limit {
            for p in self.state.packets.iter_mut() {
                if matches!(p.status, PacketStatus::InFlight | PacketStatus::Waiting) {
                    p.status = PacketStatus::Failed;
                }
            }
            self.state.done = true;
        }
        let reward = if self.state.done { self.reward()?.total } else { 0.0 };
        Ok(StepOutcome { reward, done: self.state.done })
    }

    fn task_complete(&self, i: usize) -> bool {
        let n = self.tasks.len();
        [i, n + i].iter().all(|&k| matches!(self.state.packets[k].status, PacketStatus::Unused | PacketStatus::Delivered))
    }

    fn route_pair(&self, i: usize) -> RoutePair {
        let n = self.tasks.len();
        let path = |k: usize| {
            let p = &self.state.packets[k];
            (p.status == PacketStatus::Delivered).then(|| p.path.clone())
        };
        RoutePair { task: i, model: path(i), data: path(n + i) }
    }

    /// Terminal reward of the current state, with delays evaluated under the
    /// episode's accumulated loads.
    pub fn reward(&self) -> Result<RewardSignal> {
        let cfg = &self.config;
        let mut normalized = Vec::with_capacity(self.tasks.len());
        let mut breakdowns = Vec::with_capacity(self.tasks.len());
        let mut completed = 0;
        for (i, t) in self.tasks.iter().enumerate() {
            if self.task_complete(i) {
                let b = task_delay(
                    &t.traffic,
                    &self.route_pair(i),
                    t.model_origin,
                    &self.state.link_load,
                    &self.state.relay_load,
                    &self.snapshot,
                    &self.nodes,
                )?;
                completed += 1;
                normalized.push((b.total / t.reference_delay).clamp(0.0, cfg.max_normalized_delay));
                breakdowns.push(Some(b));
            } else {
                normalized.push(cfg.max_normalized_delay);
                breakdowns.push(None);
            }
        }
        let r0 = completed as f64 * cfg.completion_reward;
        let r1: f64 = normalized.iter().map(|&x| 1.0 / (1.0 + ((x - 1.0) / cfg.mu).exp())).sum();
        Ok(RewardSignal {
            r0,
            r1,
            total: r0 + cfg.delta * r1,
            delta: cfg.delta,
            mu: cfg.mu,
            completed,
            normalized_delays: normalized,
            breakdowns,
        })
    }

    /// Routes of a finished episode in which every packet arrived.
    pub fn extract_routes(&self) -> Result<Vec<RoutePair>> {
        let n = self.tasks.len();
        for i in 0..n {
            for (k, class) in [(i, PacketClass::Model), (n + i, PacketClass::Data)] {
                if !matches!(self.state.packets[k].status, PacketStatus::Unused | PacketStatus::Delivered) {
                    return Err(Error::PartialRoute { task: i, class: class.as_str() });
                }
            }
        }
        Ok((0..n).map(|i| self.route_pair(i)).collect())
    }

    /// Writes the observation of `slot` into `out` (length `obs_dim`); idle
    /// slots get all zeros.
    pub fn observe_into(&self, slot: usize, out: &mut [f64]) {
        assert_eq!(out.len(), self.config.obs_dim(), "observation buffer size");
        out.fill(0.0);
        let Some(p) = self.packet(slot) else { return };
        let t = self.config.max_tasks;
        let dist = match p.class {
            PacketClass::Model => &self.model_dist[p.task],
            PacketClass::Data => &self.data_dist,
        };
        let norm_dist = |d: usize| if d == usize::MAX { 1.0 } else { (d as f64 / self.dist_scale).min(1.0) };
        let mask = self.packet_mask(p);
        let cap = t as f64;
        out[0] = 1.0;
        out[1] = p.class.index() as f64;
        out[2 + p.task] = 1.0;
        let mut k = 2 + t;
        for d in 0..4 {
            out[k + d] = if mask[d] { 1.0 } else { 0.0 };
        }
        k += 4;
        out[k] = norm_dist(dist[p.node()]);
        k += 1;
        for (d, nb) in self.snapshot.neighbors[p.node()].iter().enumerate() {
            let Some(nb) = nb else {
                out[k + d] = 1.0;
                out[k + 4 + d] = 0.0;
                out[k + 8 + d] = 0.0;
                continue;
            };
            out[k + d] = if mask[d] {
                if self.is_terminus(p, nb.node) { 0.0 } else { norm_dist(dist[nb.node]) }
            } else {
                1.0
            };
            out[k + 4 + d] = (self.state.link_load.get(nb.link, p.class) as f64 / cap).min(1.0);
            out[k + 8 + d] = if self.nodes[nb.node].role == Role::Relay {
                (self.state.relay_load.get(nb.node, p.class) as f64 / cap).min(1.0)
            } else {
                0.0
            };
        }
        k += 12;
        out[k] = scaled_delay(p);
        out[k + 1] = self.model_leg_delay(p.task);
        debug_assert_eq!(k + 2, self.config.obs_dim());
    }

    /// Scaled delay of task `i`'s finished model transfer, zero before the
    /// data phase. The terminal reward depends on both legs, so the data
    /// phase must see what the model leg cost.
    fn model_leg_delay(&self, i: usize) -> f64 {
        let p = &self.state.packets[i];
        if self.state.phase == Phase::Data && p.status == PacketStatus::Delivered { scaled_delay(p) } else { 0.0 }
    }

    pub fn observation(&self, slot: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.config.obs_dim()];
        self.observe_into(slot, &mut v);
        v
    }

    /// Global state vector: per slot `[active, class, plane, slot, distance,
    /// delivered, failed, accumulated delay, model-leg delay]`, then `[phase, step]`.
    pub fn global_state_into(&self, out: &mut [f64]) {
        assert_eq!(out.len(), self.config.state_dim(), "state buffer size");
        out.fill(0.0);
        for slot in 0..self.tasks.len() {
            let idx = if self.state.done { self.tasks.len() + slot } else { self.packet_index(slot) };
            let p = &self.state.packets[idx];
            let node = &self.nodes[p.node()];
            let dist = match p.class {
                PacketClass::Model => self.model_dist[p.task][p.node()],
                PacketClass::Data => self.data_dist[p.node()],
            };
            let row = &mut out[slot * STATE_PER_SLOT..(slot + 1) * STATE_PER_SLOT];
            row[0] = if p.status == PacketStatus::InFlight && !self.state.done { 1.0 } else { 0.0 };
            row[1] = p.class.index() as f64;
            row[2] = node.plane as f64 / self.planes as f64;
            row[3] = node.slot_in_plane as f64 / self.sats_per_plane as f64;
            row[4] = if dist == usize::MAX { 1.0 } else { (dist as f64 / self.dist_scale).min(1.0) };
            row[5] = if p.status == PacketStatus::Delivered { 1.0 } else { 0.0 };
            row[6] = if p.status == PacketStatus::Failed { 1.0 } else { 0.0 };
            row[7] = scaled_delay(p);
            row[8] = self.model_leg_delay(slot);
        }
        let g = STATE_PER_SLOT * self.config.max_tasks;
        out[g] = if self.state.phase == Phase::Data { 1.0 } else { 0.0 };
        out[g + 1] = self.state.step as f64 / self.step_limit as f64;
    }

    pub fn global_state(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.config.state_dim()];
        self.global_state_into(&mut v);
        v
    }

    /// Transcript line for the step about to be taken with `actions`; call
    /// before [`RoutingEnv::step`] and fill in the outcome afterwards.
    pub fn transcript_step(&self, actions: &[Action]) -> TranscriptStep {
        let obs_hashes = (0..self.num_slots())
            .map(|s| self.is_active(s).then(|| observation_digest(&self.observation(s))))
            .collect();
        TranscriptStep {
            step: self.state.step,
            phase: self.state.phase,
            obs_hashes,
            actions: actions.to_vec(),
            link_loads: Vec::new(),
            reward: 0.0,
            done: false,
        }
    }

    pub fn nonzero_link_loads(&self) -> Vec<(usize, [u32; 2])> {
        self.state.link_load.as_slice().iter().enumerate().filter(|(_, c)| c[0] + c[1] > 0).map(|(i, c)| (i, *c)).collect()
    }
}

/// Accumulated delay over twice the reference, capped at 1.
fn scaled_delay(p: &Packet) -> f64 {
    if p.reference_delay > 0.0 { (p.accumulated_delay / (2.0 * p.reference_delay)).min(1.0) } else { 0.0 }
}

/// First 16 hex digits of the SHA-256 of the little-endian f64 encoding.
pub fn observation_digest(obs: &[f64]) -> String {
    let mut h = Sha256::new();
    for x in obs {
        h.update(x.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Runs one episode to completion with `policy(env, slot, last_action)`
/// choosing for active slots, returning the terminal reward.
pub fn run_episode<F>(env: &mut RoutingEnv, mut policy: F, mut transcript: Option<&mut Vec<TranscriptStep>>) -> Result<RewardSignal>
where
    F: FnMut(&RoutingEnv, usize, Action) -> Action,
{
    env.reset();
    let mut last = vec![Action::NoOp; env.num_slots()];
    while !env.is_done() {
        let actions: Vec<Action> = (0..env.num_slots())
            .map(|s| if env.is_active(s) { policy(env, s, last[s]) } else { Action::NoOp })
            .collect();
        let mut line = transcript.as_ref().map(|_| env.transcript_step(&actions));
        let out = env.step(&actions)?;
        if let (Some(t), Some(mut l)) = (transcript.as_deref_mut(), line.take()) {
            l.link_loads = env.nonzero_link_loads();
            l.reward = out.reward;
            l.done = out.done;
            t.push(l);
        }
        last = actions;
    }
    env.reward()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constellation::{build_shell, snapshot_topology, LinkBudget, NodeAttributes, ShellConfig};
    use crate::delay::count_loads;
    use crate::workload::TaskTemplate;

    fn world(p: usize, s: usize, roles: &[(usize, Role)]) -> (Arc<TopologySnapshot>, Arc<[SatelliteNode]>) {
        let cfg = ShellConfig { planes: p, sats_per_plane: s, ..ShellConfig::default() };
        let mut r = vec![Role::Relay; p * s];
        for &(i, role) in roles {
            r[i] = role;
        }
        let c = build_shell(&cfg, &r, &NodeAttributes::default()).unwrap();
        (Arc::new(snapshot_topology(&c, 0, &LinkBudget::default())), c.nodes.into())
    }

    fn task(source: NodeId, origin: NodeId, data_bits: f64, model_bits: f64) -> EpisodeTask {
        EpisodeTask {
            traffic: TaskTraffic {
                task: TaskTemplate::default().instantiate(source),
                alpha: 0.5,
                data_bits,
                model_bits,
                extract_features: true,
            },
            model_origin: origin,
            reference_delay: 1e3,
        }
    }

    fn cfg(max_tasks: usize) -> EnvConfig {
        EnvConfig { max_tasks, ..EnvConfig::default() }
    }

    #[test]
    fn one_task_one_live_packet() {
        let (snap, nodes) = world(4, 4, &[(0, Role::RemoteSensing), (10, Role::Computing)]);
        let env = RoutingEnv::new(snap, nodes, vec![task(0, 10, 1e6, 1e6)], cfg(1)).unwrap();
        assert_eq!(env.active_slots(), vec![0]);
        assert_eq!(env.state().phase, Phase::Model);
        assert_eq!(env.action_mask(0), [true, true, true, true, false]);
    }

    #[test]
    fn no_tasks_finishes_immediately() {
        let (snap, nodes) = world(2, 2, &[(0, Role::RemoteSensing), (1, Role::Computing)]);
        let env = RoutingEnv::new(snap, nodes, vec![], cfg(1)).unwrap();
        assert!(env.is_done());
    }

    #[test]
    fn rejects_wrong_roles() {
        let (snap, nodes) = world(3, 3, &[(0, Role::RemoteSensing), (4, Role::Computing)]);
        assert!(RoutingEnv::new(snap.clone(), nodes.clone(), vec![task(1, 4, 1e6, 1e6)], cfg(1)).is_err());
        assert!(RoutingEnv::new(snap, nodes, vec![task(0, 2, 1e6, 1e6)], cfg(1)).is_err());
    }

    #[test]
    fn single_plane_masks_sideways() {
        let (snap, nodes) = world(1, 4, &[(0, Role::RemoteSensing), (2, Role::Computing)]);
        let env = RoutingEnv::new(snap, nodes, vec![task(0, 2, 1e6, 1e6)], cfg(1)).unwrap();
        let m = env.action_mask(0);
        assert!(!m[Action::Left.index()] && !m[Action::Right.index()]);
        assert!(m[Action::Up.index()] && m[Action::Down.index()]);
    }

    #[test]
    fn one_hop_delivery_and_phase_flip() {
        // 1×4 ring: RS 0, CPT 1. Model packet 1 → 0 (Up), data 0 → 1 (Down).
        let (snap, nodes) = world(1, 4, &[(0, Role::RemoteSensing), (1, Role::Computing)]);
        let mut env = RoutingEnv::new(snap, nodes, vec![task(0, 1, 2e6, 1e6)], cfg(1)).unwrap();
        let out = env.step(&[Action::Up]).unwrap();
        assert!(!out.done);
        assert_eq!(env.state().phase, Phase::Data);
        assert_eq!(env.state().packets[0].status, PacketStatus::Delivered);
        let out = env.step(&[Action::Down]).unwrap();
        assert!(out.done);
        let routes = env.extract_routes().unwrap();
        assert_eq!(routes[0].model.as_deref(), Some(&[1, 0][..]));
        assert_eq!(routes[0].data.as_deref(), Some(&[0, 1][..]));
        assert!(out.reward > 1.0);
    }

    #[test]
    fn visited_and_wrong_role_neighbours_are_masked() {
        // 3×3: RS 0, CPT 4 (centre). Data packets may enter only relays or CPTs.
        let (snap, nodes) = world(3, 3, &[(0, Role::RemoteSensing), (2, Role::Computing), (4, Role::Computing)]);
        let t = task(0, 4, 1e6, 0.0);
        let mut env = RoutingEnv::new(snap.clone(), nodes, vec![t], cfg(1)).unwrap();
        assert_eq!(env.state().phase, Phase::Data);
        // node 0's Up neighbour is 2, a computing node: a valid data terminus
        assert!(env.action_mask(0)[Action::Up.index()]);
        env.step(&[Action::Down]).unwrap();
        // at node 1 the Up neighbour is the visited node 0
        assert!(!env.action_mask(0)[Action::Up.index()]);
    }

    #[test]
    fn model_packet_cannot_enter_other_remote_sensing_node() {
        let (snap, nodes) = world(1, 4, &[(0, Role::RemoteSensing), (2, Role::RemoteSensing), (1, Role::Computing)]);
        let env = RoutingEnv::new(snap, nodes, vec![task(0, 1, 0.0, 1e6)], cfg(1)).unwrap();
        // from 1: Up → 0 (own RS, allowed), Down → 2 (another RS, masked)
        assert_eq!(env.action_mask(0), [true, false, false, false, false]);
    }

    #[test]
    fn dead_end_marks_failure() {
        // 1×4 ring: RS 0, CPT 1 and 3. The model packet of a task whose RS is
        // 0 starts at 3; its only routes are direct.
        let (snap, nodes) = world(1, 4, &[(0, Role::RemoteSensing), (1, Role::Computing), (3, Role::Computing)]);
        let mut env = RoutingEnv::new(snap, nodes, vec![task(0, 3, 1e6, 1e6)], cfg(1)).unwrap();
        // 3 → Up reaches 2 (relay), then 2's neighbours are 1 (CPT, wrong role) and 3 (visited)
        env.step(&[Action::Up]).unwrap();
        assert_eq!(env.state().packets[0].status, PacketStatus::Failed);
        assert!(env.is_done() || env.state().phase == Phase::Data);
    }

    #[test]
    fn shared_link_counts_two() {
        // 2×4 shell: RS 0 and 4, CPT 2 and 6, two independent in-plane routes
        let (snap, nodes) = world(
            2,
            4,
            &[(0, Role::RemoteSensing), (4, Role::RemoteSensing), (2, Role::Computing), (6, Role::Computing)],
        );
        let tasks = vec![task(0, 2, 1e6, 0.0), task(4, 6, 1e6, 0.0)];
        let mut env = RoutingEnv::new(snap.clone(), nodes, tasks, cfg(2)).unwrap();
        // both packets go Down: 0→1, 4→5; then 1→2 and 5→6
        env.step(&[Action::Down, Action::Down]).unwrap();
        env.step(&[Action::Down, Action::Down]).unwrap();
        assert!(env.is_done());
        let routes = env.extract_routes().unwrap();
        let (links, relays) = count_loads(&routes, &snap).unwrap();
        assert_eq!(&links, &env.state().link_load);
        assert_eq!(&relays, &env.state().relay_load);
        // planes wrap (2 planes): 0 and 4 are Left/Right neighbours of each other
        let l = snap.link_between(0, 4).unwrap();
        assert_eq!(env.state().link_load.get(l, PacketClass::Data), 0);
    }

    #[test]
    fn two_packets_over_one_link() {
        let (snap, nodes) = world(1, 6, &[(5, Role::RemoteSensing), (2, Role::Computing)]);
        let tasks = vec![task(5, 2, 0.0, 1e6), task(5, 2, 0.0, 1e6)];
        let mut env = RoutingEnv::new(snap.clone(), nodes, tasks, cfg(2)).unwrap();
        env.step(&[Action::Down, Action::Down]).unwrap();
        let l = snap.link_between(2, 3).unwrap();
        assert_eq!(env.state().link_load.get(l, PacketClass::Model), 2);
        assert_eq!(env.state().relay_load.get(3, PacketClass::Model), 2);
    }

    #[test]
    fn illegal_action_is_rejected() {
        let (snap, nodes) = world(1, 4, &[(0, Role::RemoteSensing), (2, Role::Computing)]);
        let mut env = RoutingEnv::new(snap, nodes, vec![task(0, 2, 1e6, 1e6)], cfg(2)).unwrap();
        assert!(matches!(env.step(&[Action::Left, Action::NoOp]), Err(Error::Contract(_))));
        assert!(matches!(env.step(&[Action::NoOp, Action::NoOp]), Err(Error::Contract(_))));
        assert!(matches!(env.step(&[Action::Up, Action::Up]), Err(Error::Contract(_))));
        assert!(env.step(&[Action::Up, Action::NoOp]).is_ok());
    }

    #[test]
    fn step_limit_truncates() {
        let (snap, nodes) = world(4, 4, &[(0, Role::RemoteSensing), (10, Role::Computing)]);
        let config = EnvConfig { step_limit: Some(1), ..cfg(1) };
        let mut env = RoutingEnv::new(snap, nodes, vec![task(0, 10, 1e6, 1e6)], config).unwrap();
        let out = env.step(&[Action::Up]).unwrap();
        assert!(out.done);
        let r = env.reward().unwrap();
        assert_eq!(r.r0, 0.0);
        assert_eq!(r.completed, 0);
        assert!(matches!(env.extract_routes(), Err(Error::PartialRoute { task: 0, .. })));
    }

    #[test]
    fn reward_midpoint_and_limits() {
        let (snap, nodes) = world(1, 4, &[(0, Role::RemoteSensing), (1, Role::Computing)]);
        let mut t = task(0, 1, 0.0, 1e6);
        let mut env = RoutingEnv::new(snap.clone(), nodes.clone(), vec![t.clone()], cfg(1)).unwrap();
        env.step(&[Action::Up]).unwrap();
        let total = env.reward().unwrap().breakdowns[0].unwrap().total;
        t.reference_delay = total;
        let mut env = RoutingEnv::new(snap, nodes, vec![t], cfg(1)).unwrap();
        env.step(&[Action::Up]).unwrap();
        let r = env.reward().unwrap();
        assert!((r.r1 - 0.5).abs() < 1e-12);
        assert!((r.total - (1.0 + 10.0 * 0.5)).abs() < 1e-12);
        let term = |x: f64| 1.0 / (1.0 + ((x - 1.0) / 0.1_f64).exp());
        assert!(term(1e6) < 1e-300);
        assert!((term(0.0) - 1.0 / (1.0 + (-10.0_f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn observations_are_bounded() {
        let (snap, nodes) = world(4, 4, &[(0, Role::RemoteSensing), (5, Role::RemoteSensing), (10, Role::Computing)]);
        let tasks = vec![task(0, 10, 1e6, 1e6), task(5, 10, 1e6, 1e6)];
        let mut env = RoutingEnv::new(snap, nodes, tasks, cfg(3)).unwrap();
        let mut steps = 0;
        while !env.is_done() {
            for s in 0..3 {
                let o = env.observation(s);
                assert_eq!(o.len(), env.config().obs_dim());
                assert!(o.iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x)));
            }
            let st = env.global_state();
            assert!(st.iter().all(|x| (0.0..=1.0).contains(x)));
            let actions: Vec<Action> = (0..3)
                .map(|s| {
                    let m = env.action_mask(s);
                    Action::ALL[m.iter().position(|&b| b).unwrap()]
                })
                .collect();
            env.step(&actions).unwrap();
            steps += 1;
        }
        assert!(steps <= env.step_limit());
    }

    #[test]
    fn transcript_records_every_step() {
        let (snap, nodes) = world(1, 4, &[(0, Role::RemoteSensing), (1, Role::Computing)]);
        let mut env = RoutingEnv::new(snap, nodes, vec![task(0, 1, 2e6, 1e6)], cfg(1)).unwrap();
        let mut lines = Vec::new();
        let first_legal = |e: &RoutingEnv, s: usize, _: Action| Action::ALL[e.action_mask(s).iter().position(|&b| b).unwrap()];
        let r = run_episode(&mut env, first_legal, Some(&mut lines)).unwrap();
        assert_eq!(lines.len(), env.state().step);
        let last = lines.last().unwrap();
        assert!(last.done);
        assert_eq!(last.reward, r.total);
        assert!(lines[..lines.len() - 1].iter().all(|l| !l.done && l.reward == 0.0));
        assert_eq!(lines[0].obs_hashes[0].as_ref().unwrap().len(), 16);
    }
}

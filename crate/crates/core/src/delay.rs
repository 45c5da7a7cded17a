//! Communication and computation delay terms and the end-to-end service
//! delay of one task.
//!
//! Link and relay loads are static per evaluation round: every task commits
//! its routes first, the counters are derived from route membership, and only
//! then are delays computed. Model-packet and data-packet counters are kept
//! apart since the two phases never overlap in time.
//!
//! The per-link transmission term charges each packet `D·n_e/C_e`, i.e. its
//! own size times the number of same-class packets sharing the link. This is
//! a contention proxy rather than a serialisation schedule.

use serde::{Deserialize, Serialize};

use crate::constellation::{NodeId, Role, SatelliteNode, TopologySnapshot, SPEED_OF_LIGHT_M_S};
use crate::error::{Error, Result};
use crate::workload::{image_volume, SensingTask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PacketClass {
    Model,
    Data,
}

impl PacketClass {
    pub fn index(self) -> usize {
        match self {
            PacketClass::Model => 0,
            PacketClass::Data => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PacketClass::Model => "model",
            PacketClass::Data => "data",
        }
    }
}

/// Per-link packet counters (n_e^m, n_e^d), indexed by snapshot link id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkLoad {
    counts: Vec<[u32; 2]>,
}

impl LinkLoad {
    pub fn new(num_links: usize) -> Self {
        LinkLoad { counts: vec![[0; 2]; num_links] }
    }

    pub fn get(&self, link: usize, class: PacketClass) -> u32 {
        self.counts[link][class.index()]
    }

    pub fn add(&mut self, link: usize, class: PacketClass) {
        self.counts[link][class.index()] += 1;
    }

    pub fn as_slice(&self) -> &[[u32; 2]] {
        &self.counts
    }
}

/// Per-node relayed-packet counters (m_j^m, m_j^d).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayLoad {
    counts: Vec<[u32; 2]>,
}

impl RelayLoad {
    pub fn new(num_nodes: usize) -> Self {
        RelayLoad { counts: vec![[0; 2]; num_nodes] }
    }

    pub fn get(&self, node: NodeId, class: PacketClass) -> u32 {
        self.counts[node][class.index()]
    }

    pub fn add(&mut self, node: NodeId, class: PacketClass) {
        self.counts[node][class.index()] += 1;
    }

    pub fn as_slice(&self) -> &[[u32; 2]] {
        &self.counts
    }
}

/// Data route (remote sensing → computing) and model route (computing →
/// remote sensing) of one task. `None` means the packet is not sent.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RoutePair {
    pub task: usize,
    pub data: Option<Vec<NodeId>>,
    pub model: Option<Vec<NodeId>>,
}

impl RoutePair {
    pub fn route(&self, class: PacketClass) -> Option<&[NodeId]> {
        match class {
            PacketClass::Model => self.model.as_deref(),
            PacketClass::Data => self.data.as_deref(),
        }
    }

    /// Computing satellite reached by the data packet.
    pub fn compute_node(&self) -> Option<NodeId> {
        self.data.as_ref().and_then(|r| r.last().copied())
    }
}

pub fn hop_count(route: &[NodeId]) -> usize {
    route.len().saturating_sub(1)
}

/// Link ids traversed by `route`, failing on a hop without an ISL.
pub fn route_links(route: &[NodeId], snapshot: &TopologySnapshot) -> Result<Vec<usize>> {
    route
        .windows(2)
        .map(|w| {
            snapshot
                .link_between(w[0], w[1])
                .ok_or_else(|| Error::InvalidRoute(format!("no ISL between {} and {}", w[0], w[1])))
        })
        .collect()
}

/// Checks the structural route constraints: no repeated node, consecutive
/// nodes joined by an ISL, intermediates are relays, and the endpoints carry
/// the roles of `class`.
pub fn validate_route(route: &[NodeId], class: PacketClass, snapshot: &TopologySnapshot, nodes: &[SatelliteNode]) -> Result<()> {
    if route.is_empty() {
        return Err(Error::InvalidRoute("empty route".into()));
    }
    for (i, a) in route.iter().enumerate() {
        if route[i + 1..].contains(a) {
            return Err(Error::InvalidRoute(format!("node {a} visited twice")));
        }
    }
    route_links(route, snapshot)?;
    let (start_role, end_role) = match class {
        PacketClass::Data => (Role::RemoteSensing, Role::Computing),
        PacketClass::Model => (Role::Computing, Role::RemoteSensing),
    };
    if nodes[route[0]].role != start_role || nodes[*route.last().unwrap()].role != end_role {
        return Err(Error::InvalidRoute(format!("{} route endpoints have wrong roles", class.as_str())));
    }
    if route.len() > 2 {
        if let Some(bad) = route[1..route.len() - 1].iter().find(|&&n| nodes[n].role != Role::Relay) {
            return Err(Error::InvalidRoute(format!("intermediate node {bad} is not a relay")));
        }
    }
    Ok(())
}

/// Derives link and relay counters from route membership over the active
/// route set.
pub fn count_loads(routes: &[RoutePair], snapshot: &TopologySnapshot) -> Result<(LinkLoad, RelayLoad)> {
    let mut links = LinkLoad::new(snapshot.links.len());
    let mut relays = RelayLoad::new(snapshot.num_nodes());
    for pair in routes {
        for class in [PacketClass::Model, PacketClass::Data] {
            if let Some(route) = pair.route(class) {
                for l in route_links(route, snapshot)? {
                    links.add(l, class);
                }
                if route.len() > 2 {
                    for &j in &route[1..route.len() - 1] {
                        relays.add(j, class);
                    }
                }
            }
        }
    }
    Ok((links, relays))
}

/// t^tran = D·n_e / C_e.
pub fn transmission_time(bits: f64, rate_bps: f64, load: u32) -> Result<f64> {
    if !(rate_bps > 0.0) {
        return Err(Error::InvalidRoute("transmission over a zero-rate link".into()));
    }
    Ok(bits * load as f64 / rate_bps)
}

/// t^prop = d_e / c.
pub fn propagation_time(length_m: f64) -> f64 {
    length_m / SPEED_OF_LIGHT_M_S
}

/// t^proc = ξ_j·D·m_j.
pub fn relay_processing_time(bits: f64, relay_cost: f64, load: u32) -> f64 {
    relay_cost * bits * load as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ComputeTimes {
    pub feature: f64,
    pub local: f64,
    pub large: f64,
}

/// Feature extraction, local inference and large-model inference times.
pub fn compute_times(task: &SensingTask, alpha: f64, source: &SatelliteNode, compute: &SatelliteNode) -> Result<ComputeTimes> {
    let local_cap = source.effective_capacity();
    let remote_cap = compute.effective_capacity();
    if !(local_cap > 0.0) {
        return Err(Error::config(format!("node {} has no compute capacity", source.id)));
    }
    if !(remote_cap > 0.0) {
        return Err(Error::config(format!("node {} has no compute capacity", compute.id)));
    }
    Ok(ComputeTimes {
        feature: alpha * image_volume(task) * task.cycles_per_bit / local_cap,
        local: (1.0 - alpha) * task.frames * task.small_ops / local_cap,
        large: alpha * task.frames * task.large_ops / remote_cap,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RouteDelay {
    pub transmission: f64,
    pub propagation: f64,
    pub processing: f64,
}

impl RouteDelay {
    pub fn total(&self) -> f64 {
        self.processing + self.transmission + self.propagation
    }
}

/// Transmission and propagation summed over every hop, relay processing over
/// intermediate nodes only.
pub fn route_delay(
    route: &[NodeId],
    bits: f64,
    class: PacketClass,
    links: &LinkLoad,
    relays: &RelayLoad,
    snapshot: &TopologySnapshot,
    nodes: &[SatelliteNode],
) -> Result<RouteDelay> {
    let mut out = RouteDelay::default();
    for li in route_links(route, snapshot)? {
        let link = &snapshot.links[li];
        out.transmission += transmission_time(bits, link.rate_bps, links.get(li, class))
            .map_err(|_| Error::UnusableLink(link.u, link.v))?;
        out.propagation += propagation_time(link.length_m);
    }
    if route.len() > 2 {
        for &j in &route[1..route.len() - 1] {
            out.processing += relay_processing_time(bits, nodes[j].relay_cost, relays.get(j, class));
        }
    }
    Ok(out)
}

/// Which side of the parallel stage determines completion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Data transfer plus large-model inference.
    Offload,
    /// Small-model inference on the remote sensing satellite.
    #[default]
    Local,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Offload => "offload",
            Branch::Local => "local",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DelayBreakdown {
    pub model_transmission: f64,
    pub model_propagation: f64,
    pub model_processing: f64,
    pub data_transmission: f64,
    pub data_propagation: f64,
    pub data_processing: f64,
    pub feature: f64,
    pub local: f64,
    pub large: f64,
    pub model_total: f64,
    pub data_total: f64,
    pub total: f64,
    pub binding: Branch,
}

impl DelayBreakdown {
    pub fn offload_branch(&self) -> f64 {
        self.data_total + self.large
    }

    /// Time the computing satellite waits for the local branch to finish.
    pub fn idle_time(&self) -> f64 {
        (self.local - self.offload_branch()).max(0.0)
    }

    /// Communication part only (model plus data packet delay).
    pub fn transfer_time(&self) -> f64 {
        self.model_total + self.data_total
    }
}

/// T_total = T_m + T_f + max(T_d + T_lar, T_loc).
pub fn total_service_delay(model: RouteDelay, data: RouteDelay, compute: ComputeTimes) -> DelayBreakdown {
    let model_total = model.processing + model.transmission + model.propagation;
    let data_total = data.processing + data.transmission + data.propagation;
    let offload = data_total + compute.large;
    let (binding, tail) = if compute.local > offload {
        (Branch::Local, compute.local)
    } else {
        (Branch::Offload, offload)
    };
    DelayBreakdown {
        model_transmission: model.transmission,
        model_propagation: model.propagation,
        model_processing: model.processing,
        data_transmission: data.transmission,
        data_propagation: data.propagation,
        data_processing: data.processing,
        feature: compute.feature,
        local: compute.local,
        large: compute.large,
        model_total,
        data_total,
        total: model_total + compute.feature + tail,
        binding,
    }
}

/// What one task puts on the network in an evaluation round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTraffic {
    pub task: SensingTask,
    pub alpha: f64,
    pub data_bits: f64,
    pub model_bits: f64,
    /// False when raw frames are shipped and no features are extracted.
    pub extract_features: bool,
}

impl TaskTraffic {
    pub fn sends(&self, class: PacketClass) -> bool {
        match class {
            PacketClass::Model => self.model_bits > 0.0,
            PacketClass::Data => self.data_bits > 0.0,
        }
    }

    pub fn bits(&self, class: PacketClass) -> f64 {
        match class {
            PacketClass::Model => self.model_bits,
            PacketClass::Data => self.data_bits,
        }
    }
}

/// Delay breakdown of every task for a committed route set. Loads are
/// derived from all routes in `routes` together.
pub fn evaluate_round(
    traffic: &[TaskTraffic],
    routes: &[RoutePair],
    snapshot: &TopologySnapshot,
    nodes: &[SatelliteNode],
    fallback_compute: &[NodeId],
) -> Result<Vec<DelayBreakdown>> {
    if traffic.len() != routes.len() || traffic.len() != fallback_compute.len() {
        return Err(Error::contract("traffic, routes and compute nodes must align"));
    }
    let (links, relays) = count_loads(routes, snapshot)?;
    traffic
        .iter()
        .zip(routes)
        .zip(fallback_compute)
        .map(|((t, pair), &fallback)| {
            task_delay(t, pair, fallback, &links, &relays, snapshot, nodes)
        })
        .collect()
}

/// Breakdown of one task given precomputed round loads.
pub fn task_delay(
    traffic: &TaskTraffic,
    pair: &RoutePair,
    fallback_compute: NodeId,
    links: &LinkLoad,
    relays: &RelayLoad,
    snapshot: &TopologySnapshot,
    nodes: &[SatelliteNode],
) -> Result<DelayBreakdown> {
    let leg = |class: PacketClass| -> Result<RouteDelay> {
        match (traffic.sends(class), pair.route(class)) {
            (false, _) => Ok(RouteDelay::default()),
            (true, Some(r)) => route_delay(r, traffic.bits(class), class, links, relays, snapshot, nodes),
            (true, None) => Err(Error::PartialRoute { task: pair.task, class: class.as_str() }),
        }
    };
    let model = leg(PacketClass::Model)?;
    let data = leg(PacketClass::Data)?;
    let k = if traffic.sends(PacketClass::Data) {
        pair.compute_node().unwrap_or(fallback_compute)
    } else {
        fallback_compute
    };
    let mut compute = compute_times(&traffic.task, traffic.alpha, &nodes[traffic.task.source], &nodes[k])?;
    if !traffic.extract_features {
        compute.feature = 0.0;
    }
    Ok(total_service_delay(model, data, compute))
}

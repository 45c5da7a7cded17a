//! Walker delta shell generation, circular-orbit propagation and +grid ISL
//! topology snapshots.
//!
//! Node ids are assigned row-major: `id = plane * sats_per_plane + slot`.
//! Positions are Earth-centred inertial coordinates in kilometres; link
//! lengths are stored in metres.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = usize;

/// ECI position in kilometres.
pub type Eci = [f64; 3];

pub const EARTH_RADIUS_KM: f64 = 6378.137;
/// Standard gravitational parameter of Earth, km^3/s^2.
pub const EARTH_MU_KM3_S2: f64 = 398_600.441_8;
pub const SPEED_OF_LIGHT_M_S: f64 = 299_792_458.0;
pub const BOLTZMANN_J_K: f64 = 1.380_649e-23;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShellConfig {
    pub planes: usize,
    pub sats_per_plane: usize,
    pub altitude_km: f64,
    pub inclination_deg: f64,
    /// Walker phasing as a fraction of the in-plane spacing.
    pub phase_offset: f64,
    pub slot_seconds: f64,
}

impl Default for ShellConfig {
    fn default() -> Self {
        Self {
            planes: 8,
            sats_per_plane: 8,
            altitude_km: 800.0,
            inclination_deg: 30.0,
            phase_offset: 0.0,
            slot_seconds: 30.0,
        }
    }
}

impl ShellConfig {
    pub fn validate(&self) -> Result<()> {
        if self.planes < 1 {
            return Err(Error::config("constellation.planes must be >= 1"));
        }
        if self.sats_per_plane < 2 {
            return Err(Error::config("constellation.sats_per_plane must be >= 2"));
        }
        if !(self.altitude_km > 0.0) {
            return Err(Error::config("constellation.altitude_km must be > 0"));
        }
        if !(0.0..=180.0).contains(&self.inclination_deg) {
            return Err(Error::config("constellation.inclination_deg must lie in [0, 180]"));
        }
        if !(0.0..1.0).contains(&self.phase_offset) {
            return Err(Error::config("constellation.phase_offset must lie in [0, 1)"));
        }
        if !(self.slot_seconds > 0.0) {
            return Err(Error::config("constellation.slot_seconds must be > 0"));
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.planes * self.sats_per_plane
    }

    pub fn orbit_radius_km(&self) -> f64 {
        EARTH_RADIUS_KM + self.altitude_km
    }

    /// Mean motion in rad/s.
    pub fn mean_motion(&self) -> f64 {
        (EARTH_MU_KM3_S2 / self.orbit_radius_km().powi(3)).sqrt()
    }

    pub fn node_id(&self, plane: usize, slot: usize) -> NodeId {
        plane * self.sats_per_plane + slot
    }

    pub fn plane_slot(&self, id: NodeId) -> (usize, usize) {
        (id / self.sats_per_plane, id % self.sats_per_plane)
    }

    /// Hop distance on the wrap-around grid, ignoring roles.
    pub fn grid_distance(&self, a: NodeId, b: NodeId) -> usize {
        let (pa, sa) = self.plane_slot(a);
        let (pb, sb) = self.plane_slot(b);
        let ring = |x: usize, y: usize, n: usize| {
            let d = x.abs_diff(y);
            d.min(n - d)
        };
        ring(pa, pb, self.planes) + ring(sa, sb, self.sats_per_plane)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    RemoteSensing,
    Relay,
    Computing,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::RemoteSensing => "remote_sensing",
            Role::Relay => "relay",
            Role::Computing => "computing",
        }
    }
}

/// Per-role hardware parameters applied when a shell is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NodeAttributes {
    /// Operations per second of a remote sensing satellite.
    pub remote_sensing_capacity: f64,
    /// Operations per second of a computing satellite.
    pub computing_capacity: f64,
    pub utilization: f64,
    /// Relay processing time per bit, seconds.
    pub relay_cost: f64,
}

impl Default for NodeAttributes {
    fn default() -> Self {
        Self {
            remote_sensing_capacity: 1e12,
            computing_capacity: 10e12,
            utilization: 0.8,
            relay_cost: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatelliteNode {
    pub id: NodeId,
    pub role: Role,
    pub plane: usize,
    pub slot_in_plane: usize,
    /// F, operations (cycles) per second. Zero for relays.
    pub compute_capacity: f64,
    /// γ in (0, 1].
    pub utilization: f64,
    /// ξ, seconds per relayed bit.
    pub relay_cost: f64,
}

impl SatelliteNode {
    pub fn effective_capacity(&self) -> f64 {
        self.utilization * self.compute_capacity
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constellation {
    pub shell: ShellConfig,
    pub nodes: Vec<SatelliteNode>,
}

impl Constellation {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn ids_with_role(&self, role: Role) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| n.role == role).map(|n| n.id).collect()
    }

    pub fn role(&self, id: NodeId) -> Role {
        self.nodes[id].role
    }

    /// Rebuilds the node list with a new role map, keeping per-role attributes.
    pub fn with_roles(&self, roles: &[Role], attrs: &NodeAttributes) -> Result<Constellation> {
        build_shell(&self.shell, roles, attrs)
    }
}

/// Assigns roles and hardware to every node of the shell.
pub fn build_shell(config: &ShellConfig, roles: &[Role], attrs: &NodeAttributes) -> Result<Constellation> {
    config.validate()?;
    let n = config.num_nodes();
    if roles.len() != n {
        return Err(Error::config(format!(
            "role assignment covers {} nodes, shell has {n}",
            roles.len()
        )));
    }
    if !roles.contains(&Role::Computing) {
        return Err(Error::config("at least one computing satellite is required"));
    }
    if !roles.contains(&Role::RemoteSensing) {
        return Err(Error::config("at least one remote sensing satellite is required"));
    }
    if !(attrs.utilization > 0.0 && attrs.utilization <= 1.0) {
        return Err(Error::config("utilization must lie in (0, 1]"));
    }
    if !(attrs.remote_sensing_capacity > 0.0 && attrs.computing_capacity > 0.0) {
        return Err(Error::config("compute capacities must be positive"));
    }
    if !(attrs.relay_cost >= 0.0) {
        return Err(Error::config("relay_cost must be >= 0"));
    }
    let nodes = roles
        .iter()
        .enumerate()
        .map(|(id, &role)| {
            let (plane, slot_in_plane) = config.plane_slot(id);
            let compute_capacity = match role {
                Role::RemoteSensing => attrs.remote_sensing_capacity,
                Role::Computing => attrs.computing_capacity,
                Role::Relay => 0.0,
            };
            SatelliteNode {
                id,
                role,
                plane,
                slot_in_plane,
                compute_capacity,
                utilization: attrs.utilization,
                relay_cost: attrs.relay_cost,
            }
        })
        .collect();
    Ok(Constellation { shell: config.clone(), nodes })
}

/// Spreads computing then remote sensing satellites over the grid by greedy
/// farthest-point selection (ties go to the lowest id). Everything else relays.
pub fn scattered_roles(config: &ShellConfig, num_remote_sensing: usize, num_computing: usize) -> Result<Vec<Role>> {
    let n = config.num_nodes();
    if num_computing == 0 {
        return Err(Error::config("at least one computing satellite is required"));
    }
    if num_remote_sensing == 0 {
        return Err(Error::config("at least one remote sensing satellite is required"));
    }
    if num_remote_sensing + num_computing > n {
        return Err(Error::config(format!(
            "{num_remote_sensing} remote sensing + {num_computing} computing satellites exceed {n} nodes"
        )));
    }
    let mut roles = vec![Role::Relay; n];
    let mut chosen: Vec<NodeId> = Vec::new();
    let pick = |role: Role, roles: &mut Vec<Role>, chosen: &mut Vec<NodeId>| {
        let next = if chosen.is_empty() {
            0
        } else {
            (0..n)
                .filter(|id| roles[*id] == Role::Relay)
                .max_by(|&a, &b| {
                    let da = chosen.iter().map(|&c| config.grid_distance(a, c)).min().unwrap();
                    let db = chosen.iter().map(|&c| config.grid_distance(b, c)).min().unwrap();
                    // prefer larger distance, then lower id
                    da.cmp(&db).then(b.cmp(&a))
                })
                .expect("free node available")
        };
        roles[next] = role;
        chosen.push(next);
    };
    for _ in 0..num_computing {
        pick(Role::Computing, &mut roles, &mut chosen);
    }
    for _ in 0..num_remote_sensing {
        pick(Role::RemoteSensing, &mut roles, &mut chosen);
    }
    Ok(roles)
}

/// Uniformly random placement of the special roles.
pub fn random_roles<R: Rng>(config: &ShellConfig, num_remote_sensing: usize, num_computing: usize, rng: &mut R) -> Result<Vec<Role>> {
    let n = config.num_nodes();
    if num_computing == 0 || num_remote_sensing == 0 || num_remote_sensing + num_computing > n {
        return Err(Error::config(format!(
            "cannot place {num_remote_sensing} remote sensing and {num_computing} computing satellites on {n} nodes"
        )));
    }
    let mut ids: Vec<NodeId> = (0..n).collect();
    ids.shuffle(rng);
    let mut roles = vec![Role::Relay; n];
    ids[..num_remote_sensing].iter().for_each(|&i| roles[i] = Role::RemoteSensing);
    ids[num_remote_sensing..num_remote_sensing + num_computing].iter().for_each(|&i| roles[i] = Role::Computing);
    Ok(roles)
}

/// Role map file: lists of node ids per special role; all others relay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleMap {
    pub remote_sensing: Vec<NodeId>,
    pub computing: Vec<NodeId>,
}

impl RoleMap {
    pub fn to_roles(&self, num_nodes: usize) -> Result<Vec<Role>> {
        let mut roles = vec![Role::Relay; num_nodes];
        let assignments = self
            .remote_sensing
            .iter()
            .map(|&id| (id, Role::RemoteSensing))
            .chain(self.computing.iter().map(|&id| (id, Role::Computing)));
        for (id, role) in assignments {
            if id >= num_nodes {
                return Err(Error::config(format!("role map references node {id} outside the shell")));
            }
            if roles[id] != Role::Relay {
                return Err(Error::config(format!("node {id} is assigned more than one role")));
            }
            roles[id] = role;
        }
        Ok(roles)
    }

    pub fn from_roles(roles: &[Role]) -> Self {
        let with = |r: Role| roles.iter().enumerate().filter(|(_, &x)| x == r).map(|(i, _)| i).collect();
        RoleMap { remote_sensing: with(Role::RemoteSensing), computing: with(Role::Computing) }
    }
}

/// Circular-orbit position of `node` at the start of time slot `slot`.
pub fn position_at(node: &SatelliteNode, config: &ShellConfig, slot: u64) -> Eci {
    position_at_time(node.plane, node.slot_in_plane, config, slot as f64 * config.slot_seconds)
}

pub fn position_at_time(plane: usize, slot_in_plane: usize, config: &ShellConfig, t: f64) -> Eci {
    let r = config.orbit_radius_km();
    let s = config.sats_per_plane as f64;
    let raan = 2.0 * PI * plane as f64 / config.planes as f64;
    let anomaly = 2.0 * PI * slot_in_plane as f64 / s
        + 2.0 * PI * config.phase_offset * plane as f64 / s
        + config.mean_motion() * t;
    let inc = config.inclination_deg.to_radians();

    let (x, y) = (r * anomaly.cos(), r * anomaly.sin());
    // tilt about the line of nodes, then rotate the node line to the RAAN
    let (a, b, c) = (x, y * inc.cos(), y * inc.sin());
    [a * raan.cos() - b * raan.sin(), a * raan.sin() + b * raan.cos(), c]
}

pub fn distance_km(a: &Eci, b: &Eci) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Link-budget parameters for the Shannon-form ISL rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkBudget {
    pub tx_power_w: f64,
    pub tx_gain_dbi: f64,
    pub rx_gain_dbi: f64,
    pub carrier_hz: f64,
    pub margin_db: f64,
    pub bandwidth_hz: f64,
    pub system_temp_k: f64,
}

impl Default for LinkBudget {
    fn default() -> Self {
        Self {
            tx_power_w: 10.0,
            tx_gain_dbi: 30.0,
            rx_gain_dbi: 30.0,
            carrier_hz: 23e9,
            margin_db: 1.5,
            bandwidth_hz: 500e6,
            system_temp_k: 300.0,
        }
    }
}

fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

impl LinkBudget {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tx_power_w", self.tx_power_w),
            ("carrier_hz", self.carrier_hz),
            ("bandwidth_hz", self.bandwidth_hz),
            ("system_temp_k", self.system_temp_k),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::config(format!("link.{name} must be > 0")));
            }
        }
        Ok(())
    }

    pub fn noise_power_w(&self) -> f64 {
        BOLTZMANN_J_K * self.system_temp_k * self.bandwidth_hz
    }

    /// Free-space path loss (linear) over `length_m`.
    pub fn free_space_loss(&self, length_m: f64) -> f64 {
        (4.0 * PI * length_m * self.carrier_hz / SPEED_OF_LIGHT_M_S).powi(2)
    }

    pub fn snr(&self, length_m: f64) -> f64 {
        let gains = db_to_linear(self.tx_gain_dbi) * db_to_linear(self.rx_gain_dbi);
        self.tx_power_w * gains
            / (self.free_space_loss(length_m) * db_to_linear(self.margin_db) * self.noise_power_w())
    }
}

/// Achievable ISL rate in bits/s. Returns 0 when the SNR is not positive.
pub fn link_rate(length_m: f64, budget: &LinkBudget) -> f64 {
    let snr = budget.snr(length_m);
    if !(snr > 0.0) || !snr.is_finite() {
        return 0.0;
    }
    let rate = budget.bandwidth_hz * (1.0 + snr).log2();
    if rate > 0.0 {
        rate
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    IntraPlane,
    InterPlane,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IslLink {
    /// Canonical ordering: `u < v`.
    pub u: NodeId,
    pub v: NodeId,
    pub length_m: f64,
    pub rate_bps: f64,
    pub kind: LinkKind,
}

impl IslLink {
    pub fn usable(&self) -> bool {
        self.rate_bps > 0.0
    }

    pub fn other(&self, end: NodeId) -> NodeId {
        if end == self.u {
            self.v
        } else {
            self.u
        }
    }
}

/// Forwarding directions of the +grid: preceding/succeeding satellite in the
/// same plane, and same-slot satellite in the left/right adjacent plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Neighbor {
    pub node: NodeId,
    pub link: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologySnapshot {
    pub slot: u64,
    pub positions: Vec<Eci>,
    pub links: Vec<IslLink>,
    /// Per node, per [`Direction`], the neighbour reached over a usable ISL.
    pub neighbors: Vec<[Option<Neighbor>; 4]>,
    #[serde(skip)]
    link_index: HashMap<(NodeId, NodeId), usize>,
}

impl TopologySnapshot {
    pub fn num_nodes(&self) -> usize {
        self.positions.len()
    }

    pub fn link_between(&self, a: NodeId, b: NodeId) -> Option<usize> {
        self.link_index.get(&(a.min(b), a.max(b))).copied()
    }

    pub fn link(&self, a: NodeId, b: NodeId) -> Option<&IslLink> {
        self.link_between(a, b).map(|i| &self.links[i])
    }

    pub fn degree(&self, node: NodeId) -> usize {
        self.links.iter().filter(|l| l.u == node || l.v == node).count()
    }

    /// Usable neighbours of `node`, de-duplicated (2-wide rings map two
    /// directions onto the same satellite).
    pub fn adjacent(&self, node: NodeId) -> Vec<Neighbor> {
        let mut out: Vec<Neighbor> = Vec::with_capacity(4);
        for n in self.neighbors[node].iter().flatten() {
            if !out.iter().any(|o| o.node == n.node) {
                out.push(*n);
            }
        }
        out
    }

    fn rebuild_index(&mut self) {
        self.link_index = self.links.iter().enumerate().map(|(i, l)| ((l.u, l.v), i)).collect();
    }

    /// Restores lookup tables after deserialisation.
    pub fn reindexed(mut self) -> Self {
        self.rebuild_index();
        self
    }

    /// Builds a snapshot from explicit positions and links; used by tests and
    /// by callers that bring their own geometry.
    pub fn from_parts(slot: u64, positions: Vec<Eci>, links: Vec<IslLink>, neighbors: Vec<[Option<Neighbor>; 4]>) -> Self {
        let mut snap = TopologySnapshot { slot, positions, links, neighbors, link_index: HashMap::new() };
        snap.rebuild_index();
        snap
    }
}

/// +grid ISL topology at `slot`: wrap-around in-plane ring plus same-slot
/// links to both adjacent planes.
pub fn snapshot_topology(constellation: &Constellation, slot: u64, budget: &LinkBudget) -> TopologySnapshot {
    let cfg = &constellation.shell;
    let (p_count, s_count) = (cfg.planes, cfg.sats_per_plane);
    let positions: Vec<Eci> = constellation.nodes.iter().map(|n| position_at(n, cfg, slot)).collect();

    let mut links: Vec<IslLink> = Vec::new();
    let mut index: HashMap<(NodeId, NodeId), usize> = HashMap::new();
    let mut add = |a: NodeId, b: NodeId, kind: LinkKind, links: &mut Vec<IslLink>| -> Option<usize> {
        if a == b {
            return None;
        }
        let key = (a.min(b), a.max(b));
        if let Some(&i) = index.get(&key) {
            return Some(i);
        }
        let length_m = distance_km(&positions[key.0], &positions[key.1]) * 1e3;
        links.push(IslLink { u: key.0, v: key.1, length_m, rate_bps: link_rate(length_m, budget), kind });
        index.insert(key, links.len() - 1);
        Some(links.len() - 1)
    };

    let mut neighbors = vec![[None; 4]; cfg.num_nodes()];
    for p in 0..p_count {
        for s in 0..s_count {
            let id = cfg.node_id(p, s);
            let targets = [
                (Direction::Up, cfg.node_id(p, (s + s_count - 1) % s_count), LinkKind::IntraPlane),
                (Direction::Down, cfg.node_id(p, (s + 1) % s_count), LinkKind::IntraPlane),
                (Direction::Left, cfg.node_id((p + p_count - 1) % p_count, s), LinkKind::InterPlane),
                (Direction::Right, cfg.node_id((p + 1) % p_count, s), LinkKind::InterPlane),
            ];
            for (dir, other, kind) in targets {
                if let Some(li) = add(id, other, kind, &mut links) {
                    if links[li].usable() {
                        neighbors[id][dir.index()] = Some(Neighbor { node: other, link: li });
                    }
                }
            }
        }
    }
    let mut snap = TopologySnapshot { slot, positions, links, neighbors, link_index: HashMap::new() };
    snap.rebuild_index();
    snap
}

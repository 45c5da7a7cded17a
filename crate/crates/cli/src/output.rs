//! Row types of the exported CSV and JSON files. Column sets are listed in
//! docs/schemas.md.

use serde::Serialize;

use leo_collab::constellation::{Constellation, LinkKind, TopologySnapshot};
use leo_collab::delay::{hop_count, Branch};
use leo_collab::optimizer::{EvaluationResult, RunOutcome, TaskIssue};
use leo_collab::scenario::Scenario;

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

#[derive(Serialize)]
pub struct TopologyNode {
    pub id: usize,
    pub plane: usize,
    pub slot_in_plane: usize,
    pub role: &'static str,
    pub position_km: [f64; 3],
}

#[derive(Serialize)]
pub struct TopologyLink {
    pub u: usize,
    pub v: usize,
    pub kind: LinkKind,
    pub length_m: f64,
    pub rate_bps: f64,
}

#[derive(Serialize)]
pub struct Topology {
    pub slot: u64,
    pub planes: usize,
    pub sats_per_plane: usize,
    pub nodes: Vec<TopologyNode>,
    pub links: Vec<TopologyLink>,
}

pub fn topology_json(c: &Constellation, snap: &TopologySnapshot) -> Topology {
    Topology {
        slot: snap.slot,
        planes: c.shell.planes,
        sats_per_plane: c.shell.sats_per_plane,
        nodes: c
            .nodes
            .iter()
            .map(|n| TopologyNode {
                id: n.id,
                plane: n.plane,
                slot_in_plane: n.slot_in_plane,
                role: n.role.as_str(),
                position_km: snap.positions[n.id],
            })
            .collect(),
        links: snap
            .links
            .iter()
            .map(|l| TopologyLink { u: l.u, v: l.v, kind: l.kind, length_m: l.length_m, rate_bps: l.rate_bps })
            .collect(),
    }
}

#[derive(Serialize)]
pub struct BisectRow {
    pub k: usize,
    /// Allocation ratios of all tasks joined with `;`.
    pub alphas: String,
    /// Means over served tasks.
    pub t_loc: Option<f64>,
    pub t_d_plus_t_lar: Option<f64>,
    pub objective: Option<f64>,
    pub idle: Option<f64>,
    pub feasible: bool,
}

pub fn bisect_rows(outcome: &RunOutcome) -> Vec<BisectRow> {
    outcome
        .trace
        .iter()
        .map(|it| {
            let served: Vec<_> = it.result.breakdowns.iter().flatten().collect();
            let mean = |f: &dyn Fn(&leo_collab::delay::DelayBreakdown) -> f64| {
                (!served.is_empty()).then(|| served.iter().map(|b| f(b)).sum::<f64>() / served.len() as f64)
            };
            BisectRow {
                k: it.k,
                alphas: it.result.alphas.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(";"),
                t_loc: mean(&|b| b.local),
                t_d_plus_t_lar: mean(&|b| b.offload_branch()),
                objective: it.result.objective(),
                idle: mean(&|b| b.idle_time()),
                feasible: it.result.feasible(),
            }
        })
        .collect()
}

#[derive(Serialize)]
pub struct EvaluationRow {
    pub task: usize,
    pub source: usize,
    pub alpha: f64,
    pub compute_node: Option<usize>,
    pub model_hops: Option<usize>,
    pub data_hops: Option<usize>,
    pub t_model: Option<f64>,
    pub t_feature: Option<f64>,
    pub t_data: Option<f64>,
    pub t_lar: Option<f64>,
    pub t_loc: Option<f64>,
    pub total: Option<f64>,
    pub binding: Option<Branch>,
    /// `served`, or why the task was not.
    pub status: String,
}

pub fn evaluation_rows(scenario: &Scenario, r: &EvaluationResult) -> Vec<EvaluationRow> {
    scenario
        .tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let b = r.breakdowns[i];
            let route = &r.routes[i];
            let status = match &r.issues[i] {
                None => "served".to_string(),
                Some(TaskIssue::Infeasible { constraint, .. }) => format!("infeasible: {constraint}"),
                Some(TaskIssue::RouteFailed { detail }) => format!("route failed: {detail}"),
            };
            EvaluationRow {
                task: i,
                source: t.source,
                alpha: r.alphas[i],
                compute_node: route.compute_node(),
                model_hops: route.model.as_deref().map(hop_count),
                data_hops: route.data.as_deref().map(hop_count),
                t_model: b.map(|b| b.model_total),
                t_feature: b.map(|b| b.feature),
                t_data: b.map(|b| b.data_total),
                t_lar: b.map(|b| b.large),
                t_loc: b.map(|b| b.local),
                total: b.map(|b| b.total),
                binding: b.map(|b| b.binding),
                status,
            }
        })
        .collect()
}

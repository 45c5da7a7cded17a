//! Shortest-delay routing oracle at unit load.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::constellation::{NodeId, Role, SatelliteNode, TopologySnapshot};
use crate::delay::{propagation_time, relay_processing_time, transmission_time};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    cost: f64,
    hops: usize,
    node: NodeId,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (cost, hops, node)
        other
            .cost
            .total_cmp(&self.cost)
            .then(other.hops.cmp(&self.hops))
            .then(other.node.cmp(&self.node))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Cheapest path from `source` to any node in `targets` where every
/// intermediate hop is a relay. `hop_cost(link, next)` prices entering
/// `next` over `link`; `next_is_target` tells whether the hop ends the path.
/// Ties on cost are broken by fewer hops, then by lower node id.
pub fn shortest_route<F>(
    snapshot: &TopologySnapshot,
    nodes: &[SatelliteNode],
    source: NodeId,
    targets: &[NodeId],
    mut hop_cost: F,
) -> Result<(Vec<NodeId>, f64)>
where
    F: FnMut(usize, NodeId, bool) -> f64,
{
    let n = snapshot.num_nodes();
    let mut best: Vec<Option<(f64, usize)>> = vec![None; n];
    let mut parent: Vec<Option<NodeId>> = vec![None; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    best[source] = Some((0.0, 0));
    heap.push(Entry { cost: 0.0, hops: 0, node: source });

    while let Some(Entry { cost, hops, node }) = heap.pop() {
        if done[node] {
            continue;
        }
        done[node] = true;
        if targets.contains(&node) && node != source {
            let mut path = vec![node];
            let mut cur = node;
            while let Some(p) = parent[cur] {
                path.push(p);
                cur = p;
            }
            path.reverse();
            return Ok((path, cost));
        }
        // only the source and relays forward traffic
        if node != source && nodes[node].role != Role::Relay {
            continue;
        }
        for nb in snapshot.adjacent(node) {
            let next = nb.node;
            let is_target = targets.contains(&next);
            if done[next] || (!is_target && nodes[next].role != Role::Relay) {
                continue;
            }
            let c = cost + hop_cost(nb.link, next, is_target);
            let candidate = (c, hops + 1);
            let better = match best[next] {
                None => true,
                Some((bc, bh)) => c < bc || (c == bc && hops + 1 < bh),
            };
            if better {
                best[next] = Some(candidate);
                parent[next] = Some(node);
                heap.push(Entry { cost: c, hops: hops + 1, node: next });
            }
        }
    }
    Err(Error::NoRoute { source_node: source, targets: targets.to_vec() })
}

/// Minimum-delay route for a `bits`-sized packet with every link and relay
/// load fixed at one: transmission plus propagation per hop, plus relay
/// processing when the hop enters an intermediate node.
pub fn dijkstra_route(
    snapshot: &TopologySnapshot,
    nodes: &[SatelliteNode],
    source: NodeId,
    targets: &[NodeId],
    bits: f64,
) -> Result<(Vec<NodeId>, f64)> {
    shortest_route(snapshot, nodes, source, targets, |link, next, is_target| {
        let l = &snapshot.links[link];
        let tran = transmission_time(bits, l.rate_bps, 1).unwrap_or(f64::INFINITY);
        let relay = if is_target { 0.0 } else { relay_processing_time(bits, nodes[next].relay_cost, 1) };
        tran + propagation_time(l.length_m) + relay
    })
}

/// Role-constrained hop distance from every node to the nearest of
/// `targets`; `usize::MAX` where unreachable.
pub fn hop_distances(snapshot: &TopologySnapshot, nodes: &[SatelliteNode], targets: &[NodeId]) -> Vec<usize> {
    let n = snapshot.num_nodes();
    let mut dist = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::new();
    for &t in targets {
        dist[t] = 0;
        queue.push_back(t);
    }
    while let Some(w) = queue.pop_front() {
        // a non-target, non-relay node can start a path but never extend one
        if dist[w] != 0 && nodes[w].role != Role::Relay {
            continue;
        }
        for nb in snapshot.adjacent(w) {
            if dist[nb.node] == usize::MAX {
                dist[nb.node] = dist[w] + 1;
                queue.push_back(nb.node);
            }
        }
    }
    dist
}

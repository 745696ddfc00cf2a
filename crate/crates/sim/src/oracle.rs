//! Independent baselines computed with full knowledge of the network.
//!
//! Both searches run on the directed graph in which `u -> v` exists when the
//! channel between them can carry `amount` from `u`.

use antroute::{ChannelGraph, Msat, NodeId};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

fn feasible_out(graph: &ChannelGraph, amount: Msat) -> BTreeMap<NodeId, Vec<NodeId>> {
    let mut out: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for ch in graph.channels() {
        for (from, to) in [
            (ch.endpoint_a, ch.endpoint_b),
            (ch.endpoint_b, ch.endpoint_a),
        ] {
            if ch.can_forward(from, amount).unwrap_or(false) {
                out.entry(from).or_default().push(to);
            }
        }
    }
    for v in out.values_mut() {
        v.sort();
    }
    out
}

/// Fewest hops from `payer` to `payee`; `None` when unreachable.
pub fn shortest_hops(
    graph: &ChannelGraph,
    payer: NodeId,
    payee: NodeId,
    amount: Msat,
) -> Option<usize> {
    if payer == payee {
        return Some(0);
    }
    let out = feasible_out(graph, amount);
    let mut dist = BTreeMap::from([(payer, 0usize)]);
    let mut queue = VecDeque::from([payer]);
    while let Some(u) = queue.pop_front() {
        let d = dist[&u];
        for &v in out.get(&u).map(|v| v.as_slice()).unwrap_or(&[]) {
            if dist.contains_key(&v) {
                continue;
            }
            if v == payee {
                return Some(d + 1);
            }
            dist.insert(v, d + 1);
            queue.push_back(v);
        }
    }
    None
}

/// Cheapest total of intermediary fees from `payer` to `payee`.
pub fn cheapest_fee(
    graph: &ChannelGraph,
    payer: NodeId,
    payee: NodeId,
    amount: Msat,
    fee_of: impl Fn(NodeId) -> Msat,
) -> Option<Msat> {
    let out = feasible_out(graph, amount);
    let mut best: BTreeMap<NodeId, Msat> = BTreeMap::from([(payer, 0)]);
    let mut heap = BinaryHeap::from([Reverse((0u64, payer))]);
    while let Some(Reverse((cost, u))) = heap.pop() {
        if u == payee {
            return Some(cost);
        }
        if best.get(&u).is_some_and(|&b| b < cost) {
            continue;
        }
        for &v in out.get(&u).map(|v| v.as_slice()).unwrap_or(&[]) {
            let step = if v == payee { 0 } else { fee_of(v) };
            let next = cost.saturating_add(step);
            if best.get(&v).is_none_or(|&b| next < b) {
                best.insert(v, next);
                heap.push(Reverse((next, v)));
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{generate, CapacityModel, TopologyKind, TopologySpec};
    use antroute::{Channel, ChannelMode};

    fn graph(kind: TopologyKind, capacity: Msat) -> ChannelGraph {
        let spec = TopologySpec {
            kind,
            capacity: CapacityModel::Constant { capacity },
            unidirectional_fraction: 0.0,
        };
        generate(&spec, 0).unwrap().validate().unwrap()
    }

    #[test]
    fn line_end_to_end() {
        let g = graph(TopologyKind::Line { n: 4 }, 1000);
        assert_eq!(shortest_hops(&g, NodeId(0), NodeId(3), 10), Some(3));
    }

    #[test]
    fn amount_above_every_capacity() {
        let g = graph(TopologyKind::Line { n: 4 }, 1000);
        assert_eq!(shortest_hops(&g, NodeId(0), NodeId(3), 1001), None);
        assert_eq!(cheapest_fee(&g, NodeId(0), NodeId(3), 1001, |_| 1), None);
    }

    #[test]
    fn grid_corner_to_corner() {
        let g = graph(TopologyKind::Grid { rows: 5, cols: 5 }, 1000);
        assert_eq!(shortest_hops(&g, NodeId(0), NodeId(24), 10), Some(8));
    }

    #[test]
    fn one_way_channel_blocks_reverse() {
        let mut ch = Channel::bidirectional(NodeId(0), NodeId(1), 100, 100);
        ch.mode = ChannelMode::UnidirectionalAb;
        let g = ChannelGraph::new(vec![ch]).unwrap();
        assert_eq!(shortest_hops(&g, NodeId(0), NodeId(1), 5), Some(1));
        assert_eq!(shortest_hops(&g, NodeId(1), NodeId(0), 5), None);
    }

    #[test]
    fn cheapest_prefers_low_fee_detour() {
        // 0-1-3 costs 10, 0-2-4-3 costs 2
        let chans = [(0, 1), (1, 3), (0, 2), (2, 4), (4, 3)]
            .into_iter()
            .map(|(a, b)| Channel::bidirectional(NodeId(a), NodeId(b), 100, 100))
            .collect();
        let g = ChannelGraph::new(chans).unwrap();
        let fee = |n: NodeId| match n.0 {
            1 => 10,
            _ => 1,
        };
        assert_eq!(cheapest_fee(&g, NodeId(0), NodeId(3), 5, fee), Some(2));
        assert_eq!(shortest_hops(&g, NodeId(0), NodeId(3), 5), Some(2));
        assert_eq!(cheapest_fee(&g, NodeId(0), NodeId(1), 5, fee), Some(0));
    }
}

//! Network topologies and their generators.

use antroute::{Channel, ChannelError, ChannelGraph, ChannelMode, Msat, NodeId};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologyKind {
    Line { n: u32 },
    Ring { n: u32 },
    Grid { rows: u32, cols: u32 },
    ErdosRenyi { n: u32, p: f64 },
    BarabasiAlbert { n: u32, m: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CapacityModel {
    Constant { capacity: Msat },
    UniformRange { lo: Msat, hi: Msat },
}

impl Default for CapacityModel {
    fn default() -> Self {
        CapacityModel::Constant {
            capacity: 1_000_000_000,
        }
    }
}

impl CapacityModel {
    fn draw<R: Rng>(&self, rng: &mut R) -> Msat {
        match *self {
            CapacityModel::Constant { capacity } => capacity,
            CapacityModel::UniformRange { lo, hi } => rng.gen_range(lo..=hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub kind: TopologyKind,
    #[serde(default)]
    pub capacity: CapacityModel,
    /// Share of channels that only carry payments one way.
    #[serde(default)]
    pub unidirectional_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyMeta {
    pub spec: TopologySpec,
    pub seed: u64,
    /// Node count before the largest component was extracted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_nodes: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub nodes: Vec<NodeId>,
    pub channels: Vec<Channel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<TopologyMeta>,
}

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("channel references unknown node {0}")]
    UnknownNode(NodeId),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

impl Topology {
    pub fn validate(&self) -> Result<ChannelGraph, TopologyError> {
        let known: BTreeSet<NodeId> = self.nodes.iter().copied().collect();
        for ch in &self.channels {
            for end in [ch.endpoint_a, ch.endpoint_b] {
                if !known.contains(&end) {
                    return Err(TopologyError::UnknownNode(end));
                }
            }
        }
        Ok(ChannelGraph::new(self.channels.clone())?)
    }

    pub fn adjacency(&self) -> BTreeMap<NodeId, Vec<NodeId>> {
        let mut adj: BTreeMap<NodeId, Vec<NodeId>> =
            self.nodes.iter().map(|&n| (n, Vec::new())).collect();
        for ch in &self.channels {
            adj.entry(ch.endpoint_a).or_default().push(ch.endpoint_b);
            adj.entry(ch.endpoint_b).or_default().push(ch.endpoint_a);
        }
        for v in adj.values_mut() {
            v.sort();
        }
        adj
    }

    pub fn is_connected(&self) -> bool {
        match self.nodes.first() {
            None => true,
            Some(&start) => component(&self.adjacency(), start).len() == self.nodes.len(),
        }
    }
}

fn component(adj: &BTreeMap<NodeId, Vec<NodeId>>, start: NodeId) -> BTreeSet<NodeId> {
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(u) = queue.pop_front() {
        for &v in adj.get(&u).map(|v| v.as_slice()).unwrap_or(&[]) {
            if seen.insert(v) {
                queue.push_back(v);
            }
        }
    }
    seen
}

fn params(msg: impl Into<String>) -> TopologyError {
    TopologyError::Params(msg.into())
}

fn edges(
    kind: TopologyKind,
    rng: &mut ChaCha8Rng,
) -> Result<(u32, Vec<(u32, u32)>), TopologyError> {
    let out = match kind {
        TopologyKind::Line { n } => {
            if n < 2 {
                return Err(params("line needs n >= 2"));
            }
            (n, (1..n).map(|i| (i - 1, i)).collect())
        }
        TopologyKind::Ring { n } => {
            if n < 3 {
                return Err(params("ring needs n >= 3"));
            }
            let mut e: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
            e.push((0, n - 1));
            (n, e)
        }
        TopologyKind::Grid { rows, cols } => {
            if rows == 0 || cols == 0 || rows * cols < 2 {
                return Err(params("grid needs at least two cells"));
            }
            let id = |r: u32, c: u32| r * cols + c;
            let mut e = Vec::new();
            for r in 0..rows {
                for c in 0..cols {
                    if c + 1 < cols {
                        e.push((id(r, c), id(r, c + 1)));
                    }
                    if r + 1 < rows {
                        e.push((id(r, c), id(r + 1, c)));
                    }
                }
            }
            (rows * cols, e)
        }
        TopologyKind::ErdosRenyi { n, p } => {
            if n < 2 {
                return Err(params("erdos_renyi needs n >= 2"));
            }
            if !(0.0..=1.0).contains(&p) {
                return Err(params("erdos_renyi needs p in [0, 1]"));
            }
            let mut e = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if rng.gen_bool(p) {
                        e.push((i, j));
                    }
                }
            }
            (n, e)
        }
        TopologyKind::BarabasiAlbert { n, m } => {
            if m < 1 {
                return Err(params("barabasi_albert needs m >= 1"));
            }
            if n < 2 || n <= m {
                return Err(params("barabasi_albert needs n >= 2 and n > m"));
            }
            // Seed clique of m + 1 nodes, then preferential attachment.
            let mut e = Vec::new();
            let mut ends: Vec<u32> = Vec::new();
            for i in 0..=m {
                for j in i + 1..=m {
                    e.push((i, j));
                    ends.extend([i, j]);
                }
            }
            for v in m + 1..n {
                let mut targets = BTreeSet::new();
                while targets.len() < m as usize {
                    targets.insert(*ends.choose(rng).expect("non-empty"));
                }
                for t in targets {
                    e.push((t, v));
                    ends.extend([t, v]);
                }
            }
            (n, e)
        }
    };
    Ok(out)
}

/// Builds a topology; fully determined by `spec` and `seed`.
pub fn generate(spec: &TopologySpec, seed: u64) -> Result<Topology, TopologyError> {
    if !(0.0..=1.0).contains(&spec.unidirectional_fraction) {
        return Err(params("unidirectional_fraction must be in [0, 1]"));
    }
    if let CapacityModel::UniformRange { lo, hi } = spec.capacity {
        if lo > hi {
            return Err(params("capacity range has lo > hi"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, mut e) = edges(spec.kind, &mut rng)?;

    let mut generated_nodes = None;
    let mut node_count = n;
    if matches!(spec.kind, TopologyKind::ErdosRenyi { .. }) {
        let full = Topology {
            nodes: (0..n).map(NodeId).collect(),
            channels: e
                .iter()
                .map(|&(a, b)| Channel::bidirectional(NodeId(a), NodeId(b), 0, 0))
                .collect(),
            meta: None,
        };
        let adj = full.adjacency();
        let mut best: BTreeSet<NodeId> = BTreeSet::new();
        let mut seen: BTreeSet<NodeId> = BTreeSet::new();
        for &v in &full.nodes {
            if seen.contains(&v) {
                continue;
            }
            let comp = component(&adj, v);
            seen.extend(comp.iter().copied());
            if comp.len() > best.len() {
                best = comp;
            }
        }
        let relabel: BTreeMap<u32, u32> = best
            .iter()
            .enumerate()
            .map(|(i, v)| (v.0, i as u32))
            .collect();
        e = e
            .into_iter()
            .filter_map(|(a, b)| Some((*relabel.get(&a)?, *relabel.get(&b)?)))
            .collect();
        generated_nodes = Some(n);
        node_count = best.len() as u32;
        if best.len() < 2 {
            return Err(params("erdos_renyi produced no component with a channel"));
        }
    }
    let channels = e
        .into_iter()
        .map(|(a, b)| {
            let capacity_ab = spec.capacity.draw(&mut rng);
            let capacity_ba = spec.capacity.draw(&mut rng);
            let mode = if spec.unidirectional_fraction > 0.0
                && rng.gen_bool(spec.unidirectional_fraction)
            {
                if rng.gen_bool(0.5) {
                    ChannelMode::UnidirectionalAb
                } else {
                    ChannelMode::UnidirectionalBa
                }
            } else {
                ChannelMode::Bidirectional
            };
            Channel {
                endpoint_a: NodeId(a),
                endpoint_b: NodeId(b),
                capacity_ab,
                capacity_ba,
                mode,
            }
        })
        .collect();

    Ok(Topology {
        nodes: (0..node_count).map(NodeId).collect(),
        channels,
        meta: Some(TopologyMeta {
            spec: spec.clone(),
            seed,
            generated_nodes,
        }),
    })
}

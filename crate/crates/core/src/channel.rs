//! Payment channels, neighbor bookkeeping and broadcast selection.

use crate::{Msat, NodeId};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use thiserror::Error;

/// Default length of the short-term statistics window, in events.
pub const DEFAULT_STATS_WINDOW: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    #[default]
    Bidirectional,
    /// Payments may only flow from `endpoint_a` to `endpoint_b`.
    UnidirectionalAb,
    /// Payments may only flow from `endpoint_b` to `endpoint_a`.
    UnidirectionalBa,
}

/// A payment channel with a spendable balance per direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Channel {
    pub endpoint_a: NodeId,
    pub endpoint_b: NodeId,
    pub capacity_ab: Msat,
    pub capacity_ba: Msat,
    #[serde(default)]
    pub mode: ChannelMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChannelError {
    #[error("node {node} is not an endpoint of channel {a}-{b}")]
    NotAnEndpoint { node: NodeId, a: NodeId, b: NodeId },
    #[error("channel from {0} to itself")]
    SelfChannel(NodeId),
    #[error("more than one channel between {0} and {1}")]
    DuplicateChannel(NodeId, NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SettleError {
    #[error("a payment path needs at least two nodes")]
    PathTooShort,
    #[error("expected {expected} hop fees, got {actual}")]
    FeeCountMismatch { expected: usize, actual: usize },
    #[error("fees exhaust the payment before hop {hop}")]
    FeesExceedAmount { hop: usize },
    #[error("no channel for hop {hop} ({from} -> {to})")]
    NoChannel {
        hop: usize,
        from: NodeId,
        to: NodeId,
    },
    #[error("hop {hop} can carry {available} msat, needs {needed}")]
    Infeasible {
        hop: usize,
        needed: Msat,
        available: Msat,
    },
}

impl Channel {
    pub fn bidirectional(a: NodeId, b: NodeId, capacity_ab: Msat, capacity_ba: Msat) -> Self {
        Channel {
            endpoint_a: a,
            endpoint_b: b,
            capacity_ab,
            capacity_ba,
            mode: ChannelMode::Bidirectional,
        }
    }

    pub fn other(&self, node: NodeId) -> Option<NodeId> {
        if node == self.endpoint_a {
            Some(self.endpoint_b)
        } else if node == self.endpoint_b {
            Some(self.endpoint_a)
        } else {
            None
        }
    }

    fn not_endpoint(&self, node: NodeId) -> ChannelError {
        ChannelError::NotAnEndpoint {
            node,
            a: self.endpoint_a,
            b: self.endpoint_b,
        }
    }

    /// Spendable balance from `from` towards the other endpoint; zero when the
    /// mode forbids that direction.
    pub fn directed_capacity(&self, from: NodeId) -> Result<Msat, ChannelError> {
        if from == self.endpoint_a {
            Ok(match self.mode {
                ChannelMode::UnidirectionalBa => 0,
                _ => self.capacity_ab,
            })
        } else if from == self.endpoint_b {
            Ok(match self.mode {
                ChannelMode::UnidirectionalAb => 0,
                _ => self.capacity_ba,
            })
        } else {
            Err(self.not_endpoint(from))
        }
    }

    /// Whether `from` can push `amount` through this channel.
    pub fn can_forward(&self, from: NodeId, amount: Msat) -> Result<bool, ChannelError> {
        Ok(self.directed_capacity(from)? >= amount)
    }

    /// Moves `amount` from `from` to the other side. Bidirectional channels
    /// shift balance; unidirectional ones only drain.
    fn transfer(&mut self, from: NodeId, amount: Msat) -> Result<(), ChannelError> {
        let a_to_b = if from == self.endpoint_a {
            true
        } else if from == self.endpoint_b {
            false
        } else {
            return Err(self.not_endpoint(from));
        };
        let bidirectional = self.mode == ChannelMode::Bidirectional;
        let (out, back) = if a_to_b {
            (&mut self.capacity_ab, &mut self.capacity_ba)
        } else {
            (&mut self.capacity_ba, &mut self.capacity_ab)
        };
        *out -= amount;
        if bidirectional {
            *back += amount;
        }
        Ok(())
    }
}

/// All channels of a network, indexed by unordered endpoint pair.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChannelGraph {
    channels: Vec<Channel>,
    index: BTreeMap<(NodeId, NodeId), usize>,
}

fn pair(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl ChannelGraph {
    pub fn new(channels: Vec<Channel>) -> Result<Self, ChannelError> {
        let mut index = BTreeMap::new();
        for (i, ch) in channels.iter().enumerate() {
            if ch.endpoint_a == ch.endpoint_b {
                return Err(ChannelError::SelfChannel(ch.endpoint_a));
            }
            if index
                .insert(pair(ch.endpoint_a, ch.endpoint_b), i)
                .is_some()
            {
                return Err(ChannelError::DuplicateChannel(ch.endpoint_a, ch.endpoint_b));
            }
        }
        Ok(ChannelGraph { channels, index })
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn get(&self, a: NodeId, b: NodeId) -> Option<&Channel> {
        self.index.get(&pair(a, b)).map(|&i| &self.channels[i])
    }

    /// Channels incident to `node`, ordered by neighbor id.
    pub fn incident(&self, node: NodeId) -> Vec<(NodeId, Channel)> {
        let mut out: Vec<_> = self
            .channels
            .iter()
            .filter_map(|ch| ch.other(node).map(|n| (n, *ch)))
            .collect();
        out.sort_by_key(|(n, _)| *n);
        out
    }

    /// Settles a payment along `path` atomically.
    ///
    /// `hop_fees[i]` is the fee kept by `path[i + 1]`. The amount entering hop
    /// `i` is `amount` minus the fees of every intermediary before it. Returns
    /// the amount moved over each hop. On error no channel is touched.
    pub fn settle_path(
        &mut self,
        path: &[NodeId],
        amount: Msat,
        hop_fees: &[Msat],
    ) -> Result<Vec<Msat>, SettleError> {
        if path.len() < 2 {
            return Err(SettleError::PathTooShort);
        }
        if hop_fees.len() != path.len() - 2 {
            return Err(SettleError::FeeCountMismatch {
                expected: path.len() - 2,
                actual: hop_fees.len(),
            });
        }

        let mut plan = Vec::with_capacity(path.len() - 1);
        let mut remaining = amount;
        for (hop, w) in path.windows(2).enumerate() {
            if hop > 0 {
                remaining = remaining
                    .checked_sub(hop_fees[hop - 1])
                    .ok_or(SettleError::FeesExceedAmount { hop })?;
            }
            let idx = *self
                .index
                .get(&pair(w[0], w[1]))
                .ok_or(SettleError::NoChannel {
                    hop,
                    from: w[0],
                    to: w[1],
                })?;
            plan.push((idx, w[0], remaining));
        }

        // Check every hop against a scratch copy first so that repeated
        // channels in one path are accounted for.
        let mut scratch: BTreeMap<usize, Channel> = BTreeMap::new();
        for (hop, &(idx, from, moved)) in plan.iter().enumerate() {
            let ch = scratch.entry(idx).or_insert(self.channels[idx]);
            let available = ch
                .directed_capacity(from)
                .expect("path node is an endpoint");
            if available < moved {
                return Err(SettleError::Infeasible {
                    hop,
                    needed: moved,
                    available,
                });
            }
            ch.transfer(from, moved).expect("path node is an endpoint");
        }
        for (idx, ch) in scratch {
            self.channels[idx] = ch;
        }
        Ok(plan.into_iter().map(|(_, _, moved)| moved).collect())
    }
}

/// Something a neighbor did that feeds its performance record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelayEvent {
    /// The neighbor relayed a pheromone seed to us.
    Pheromone,
    /// The neighbor returned a matched seed to us.
    Matched,
    /// A payment routed through the neighbor completed.
    PaymentOk(Msat),
    /// A route through the neighbor failed or misbehaved.
    PaymentFail,
}

/// Long-term counters plus a sliding window of the most recent events.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborStats {
    pub pheromone_relayed: u64,
    pub matched_relayed: u64,
    pub payments_completed: u64,
    pub payments_failed: u64,
    pub volume_total: Msat,
    window: VecDeque<RelayEvent>,
    window_len: usize,
}

/// Counters restricted to the short-term window.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ShortWindow {
    pub pheromone_relayed: u64,
    pub matched_relayed: u64,
    pub payments_completed: u64,
    pub payments_failed: u64,
    pub volume_total: Msat,
}

impl Default for NeighborStats {
    fn default() -> Self {
        NeighborStats::new(DEFAULT_STATS_WINDOW)
    }
}

impl NeighborStats {
    pub fn new(window_len: usize) -> Self {
        NeighborStats {
            pheromone_relayed: 0,
            matched_relayed: 0,
            payments_completed: 0,
            payments_failed: 0,
            volume_total: 0,
            window: VecDeque::with_capacity(window_len),
            window_len,
        }
    }

    pub fn record(&mut self, event: RelayEvent) {
        match event {
            RelayEvent::Pheromone => self.pheromone_relayed += 1,
            RelayEvent::Matched => self.matched_relayed += 1,
            RelayEvent::PaymentOk(amount) => {
                self.payments_completed += 1;
                self.volume_total = self.volume_total.saturating_add(amount);
            }
            RelayEvent::PaymentFail => self.payments_failed += 1,
        }
        if self.window_len == 0 {
            return;
        }
        if self.window.len() == self.window_len {
            self.window.pop_front();
        }
        self.window.push_back(event);
    }

    pub fn window_events(&self) -> usize {
        self.window.len()
    }

    pub fn short(&self) -> ShortWindow {
        let mut s = ShortWindow::default();
        for ev in &self.window {
            match *ev {
                RelayEvent::Pheromone => s.pheromone_relayed += 1,
                RelayEvent::Matched => s.matched_relayed += 1,
                RelayEvent::PaymentOk(v) => {
                    s.payments_completed += 1;
                    s.volume_total = s.volume_total.saturating_add(v);
                }
                RelayEvent::PaymentFail => s.payments_failed += 1,
            }
        }
        s
    }

    /// Share of recent events in which the neighbor did something useful.
    /// Zero for a neighbor with no recent events at all.
    pub fn short_success_ratio(&self) -> f64 {
        if self.window.is_empty() {
            return 0.0;
        }
        let s = self.short();
        let good = s.pheromone_relayed + s.matched_relayed + s.payments_completed;
        good as f64 / self.window.len() as f64
    }

    pub fn failure_ratio(&self) -> f64 {
        let total = self.payments_completed + self.payments_failed;
        self.payments_failed as f64 / total.max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreWeights {
    pub completed: f64,
    pub volume: f64,
    pub short_success: f64,
    pub failure: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        ScoreWeights {
            completed: 1.0,
            volume: 1.0,
            short_success: 1.0,
            failure: 1.0,
        }
    }
}

/// Performance benchmark of a neighbor:
///
/// `w1·ln(1+completed) + w2·ln(1+volume) + w3·short_success − w4·failure_ratio`,
/// floored at zero.
pub fn neighbor_score(stats: &NeighborStats, w: &ScoreWeights) -> f64 {
    let score = w.completed * (stats.payments_completed as f64).ln_1p()
        + w.volume * (stats.volume_total as f64).ln_1p()
        + w.short_success * stats.short_success_ratio()
        - w.failure * stats.failure_ratio();
    score.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BroadcastPolicy {
    /// Every eligible neighbor.
    #[default]
    FloodAll,
    /// The `k` best-scoring neighbors.
    TopK(usize),
    /// `k` neighbors drawn without replacement with weight `rank^-alpha`.
    ParetoWeighted { alpha: f64, k: usize },
}

/// A node's view of one neighbor.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborRecord {
    pub neighbor: NodeId,
    pub channel: Channel,
    pub stats: NeighborStats,
}

impl NeighborRecord {
    pub fn new(neighbor: NodeId, channel: Channel, window_len: usize) -> Self {
        NeighborRecord {
            neighbor,
            channel,
            stats: NeighborStats::new(window_len),
        }
    }
}

/// Picks the neighbors a seed is relayed to.
pub fn select_broadcast_set<'a, R: Rng + ?Sized>(
    records: impl IntoIterator<Item = &'a NeighborRecord>,
    exclude: &[NodeId],
    policy: &BroadcastPolicy,
    weights: &ScoreWeights,
    rng: &mut R,
) -> Vec<NodeId> {
    let mut candidates: Vec<&NeighborRecord> = records
        .into_iter()
        .filter(|r| !exclude.contains(&r.neighbor))
        .collect();
    candidates.sort_by_key(|r| r.neighbor);
    candidates.dedup_by_key(|r| r.neighbor);

    let ranked = |candidates: Vec<&NeighborRecord>| -> Vec<NodeId> {
        let mut scored: Vec<(f64, NodeId)> = candidates
            .into_iter()
            .map(|r| (neighbor_score(&r.stats, weights), r.neighbor))
            .collect();
        scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        scored.into_iter().map(|(_, n)| n).collect()
    };

    match *policy {
        BroadcastPolicy::FloodAll => candidates.into_iter().map(|r| r.neighbor).collect(),
        BroadcastPolicy::TopK(k) => {
            let mut ranked = ranked(candidates);
            ranked.truncate(k);
            ranked
        }
        BroadcastPolicy::ParetoWeighted { alpha, k } => {
            let mut pool: Vec<(NodeId, f64)> = ranked(candidates)
                .into_iter()
                .enumerate()
                .map(|(i, n)| (n, ((i + 1) as f64).powf(-alpha)))
                .collect();
            let mut picked = Vec::with_capacity(k.min(pool.len()));
            while picked.len() < k && !pool.is_empty() {
                let total: f64 = pool.iter().map(|(_, w)| w).sum();
                let mut target = rng.gen::<f64>() * total;
                let mut chosen = pool.len() - 1;
                for (i, (_, w)) in pool.iter().enumerate() {
                    if target < *w {
                        chosen = i;
                        break;
                    }
                    target -= w;
                }
                picked.push(pool.remove(chosen).0);
            }
            picked
        }
    }
}

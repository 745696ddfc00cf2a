//! Per-node protocol state machine.
//!
//! Every node, payer and payee included, runs this same machine. The endpoints
//! differ only in that they call [`NodeState::originate`], and the payer later
//! [`NodeState::confirm`]s one of the offers it collected.
//!
//! The node's routing memory is keyed by `(R, direction)`. Each entry is one
//! of three kinds:
//!
//! * `Origin`: this node launched the seed.
//! * `Relayed`: first sight of `R` here; the seed was rebroadcast.
//! * `Meeting`: the conjugate direction was already known, so this seed was
//!   matched instead of relayed. The two floods stop at their meeting frontier.
//!
//! For every relayed copy the node remembers which transmitter copy it derived
//! from. A matched or confirmed seed carries the counter of the link it is
//! crossing, so each hop finds exactly the broadcast the previous node relied
//! on. This keeps the back-routed path consistent with the fee and counter
//! that were accumulated on the way out.

use crate::audit::{self, AuditError, AuditTrail};
use crate::channel::{
    neighbor_score, select_broadcast_set, BroadcastPolicy, Channel, NeighborRecord, RelayEvent,
    ScoreWeights, DEFAULT_STATS_WINDOW,
};
use crate::seed::{
    make_pheromone_pair, DecodeError, DerivedSeed, Direction, MatchingId, SeedKind, SeedMessage,
};
use crate::{Msat, NodeId, SimTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Default route-memory lifetime: 30 s.
pub const DEFAULT_TTL: SimTime = 30_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Payer,
    Payee,
}

impl Role {
    pub fn direction(self) -> Direction {
        match self {
            Role::Payer => Direction::A,
            Role::Payee => Direction::B,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NodeConfig {
    /// Lifetime of routing data, in microseconds.
    pub ttl: SimTime,
    /// Origin counters start uniformly in `[0, counter_start_max]`.
    pub counter_start_max: u32,
    /// Each relay adds a step drawn uniformly from `[1, counter_step_max]`.
    pub counter_step_max: u32,
    /// Fee this node charges for relaying or matching.
    pub fee: Msat,
    pub broadcast_policy: BroadcastPolicy,
    /// Only relay pheromone seeds over channels that can carry the amount.
    pub volume_gating: bool,
    pub score_weights: ScoreWeights,
    pub stats_window: usize,
    /// The payer confirms at `start + factor × (first offer − start)`.
    pub offer_wait_factor: u32,
    /// The payer attaches an audit trail to its confirmed seed.
    pub audit: bool,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            ttl: DEFAULT_TTL,
            counter_start_max: 0,
            counter_step_max: 1,
            fee: 0,
            broadcast_policy: BroadcastPolicy::FloodAll,
            volume_gating: true,
            score_weights: ScoreWeights::default(),
            stats_window: DEFAULT_STATS_WINDOW,
            offer_wait_factor: 2,
            audit: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("counter_step_max must be at least 1")]
    ZeroCounterStep,
    #[error("ttl must be positive")]
    ZeroTtl,
    #[error("offer_wait_factor must be at least 1")]
    ZeroOfferWait,
}

impl NodeConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.counter_step_max == 0 {
            return Err(ConfigError::ZeroCounterStep);
        }
        if self.ttl == 0 {
            return Err(ConfigError::ZeroTtl);
        }
        if self.offer_wait_factor == 0 {
            return Err(ConfigError::ZeroOfferWait);
        }
        Ok(())
    }
}

/// Next counter value for a relayed seed: `prev` plus a step in
/// `[1, counter_step_max]`, saturating.
pub fn next_counter<R: Rng + ?Sized>(prev: u32, config: &NodeConfig, rng: &mut R) -> u32 {
    let step = if config.counter_step_max <= 1 {
        1
    } else {
        rng.gen_range(1..=config.counter_step_max)
    };
    prev.saturating_add(step)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Transmitter {
    pub neighbor: NodeId,
    pub counter: u32,
    /// `current_fee` of the copy as it arrived.
    pub fee: Msat,
    pub received_at: SimTime,
}

/// One copy this node sent out, and the received copy it was derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct SendRecord {
    to: NodeId,
    counter: u32,
    fee: Msat,
    source: Option<(NodeId, u32)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Origin,
    Relayed,
    Meeting,
}

/// A node's memory of one `(R, direction)` pair.
#[derive(Debug, Clone)]
pub struct MempoolEntry {
    pub r: DerivedSeed,
    pub direction: Direction,
    pub kind: EntryKind,
    pub min_counter_seen: u32,
    /// In arrival order. Empty only for origin entries.
    pub transmitters: Vec<Transmitter>,
    pub amount: Msat,
    pub max_fee: Msat,
    pub first_seen: SimTime,
    sends: Vec<SendRecord>,
}

impl MempoolEntry {
    /// Lowest-counter transmitter, earliest receipt on ties.
    pub fn best_transmitter(&self) -> Option<&Transmitter> {
        self.transmitters
            .iter()
            .min_by_key(|t| (t.counter, t.received_at))
    }

    /// The transmitter copy behind what we sent `to` at `counter`.
    fn source_of(&self, to: NodeId, counter: u32) -> Option<(NodeId, u32)> {
        let exact = self
            .sends
            .iter()
            .find(|s| s.to == to && s.counter == counter);
        let send = exact.or_else(|| self.sends.iter().rev().find(|s| s.to == to))?;
        send.source
    }

    pub fn fee_sent_to(&self, to: NodeId) -> Option<Msat> {
        self.sends.iter().rev().find(|s| s.to == to).map(|s| s.fee)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchState {
    MatchedSent,
    ConfirmedSeen,
    Acked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRole {
    /// On the payer's trail (or the payer itself).
    PayerSide,
    /// The node where the floods met.
    Matching,
    /// On the payee's trail (or the payee itself).
    PayeeSide,
}

/// Route lock for one matching id.
#[derive(Debug, Clone, Serialize)]
pub struct MatchRecord {
    pub matching_id: MatchingId,
    pub r: DerivedSeed,
    pub role: MatchRole,
    /// Previous hop toward the payer; `None` at the payer.
    pub toward_alice: Option<NodeId>,
    /// Next hop toward the payee; `None` at the payee.
    pub toward_bob: Option<NodeId>,
    /// Counter to put on the confirmed seed sent to `toward_bob`.
    pub next_counter: u32,
    /// Pinned at first sight, never changed.
    pub total_fee: Msat,
    pub state: MatchState,
    pub created_at: SimTime,
    /// Sum of both sides' counters; only known at the matching node.
    pub counter_span: Option<u32>,
    pub amount: Msat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Offer {
    pub matching_id: MatchingId,
    pub total_fee: Msat,
    /// Neighbor that delivered the matched seed; `None` if we matched ourselves.
    pub delivered_by: Option<NodeId>,
    pub counter: u32,
    pub received_at: SimTime,
}

#[derive(Debug, Clone)]
struct Request {
    role: Role,
    started_at: SimTime,
    amount: Msat,
    max_fee: Msat,
    offers: Vec<Offer>,
    confirmed: Option<MatchingId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Malformed,
    NotNeighbor,
    FeeCeiling,
    Stale,
    FeeAnomaly,
    Duplicate,
    RouteLock,
    Late,
}

impl DropReason {
    pub fn name(self) -> &'static str {
        match self {
            DropReason::Malformed => "malformed",
            DropReason::NotNeighbor => "not_neighbor",
            DropReason::FeeCeiling => "fee_ceiling",
            DropReason::Stale => "stale",
            DropReason::FeeAnomaly => "fee_anomaly",
            DropReason::Duplicate => "duplicate",
            DropReason::RouteLock => "route_lock",
            DropReason::Late => "late",
        }
    }
}

/// What the node wants the outside world to do.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Send {
        to: NodeId,
        msg: SeedMessage,
        audit: Option<AuditTrail>,
    },
    /// Path acknowledgement travelling back to the payer; echoes the confirmed seed.
    Ack {
        to: NodeId,
        msg: SeedMessage,
    },
    /// Call [`NodeState::confirm`] for `r` at `at`.
    ScheduleConfirm {
        r: DerivedSeed,
        at: SimTime,
    },
    MatchMade {
        r: DerivedSeed,
        matching_id: MatchingId,
        total_fee: Msat,
    },
    OfferReceived {
        r: DerivedSeed,
        matching_id: MatchingId,
        total_fee: Msat,
    },
    Confirmed {
        r: DerivedSeed,
        matching_id: MatchingId,
        total_fee: Msat,
        offers: usize,
        min_offer_fee: Msat,
    },
    DeliveredToPayee {
        r: DerivedSeed,
        matching_id: MatchingId,
        msg: SeedMessage,
        audit: Option<AuditTrail>,
    },
    PathAcked {
        r: DerivedSeed,
        matching_id: MatchingId,
        total_fee: Msat,
    },
    Dropped(DropReason),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct NodeCounters {
    pub malformed: u64,
    pub fee_rejections: u64,
    pub stale: u64,
    pub fee_anomalies: u64,
    pub duplicates: u64,
    pub route_lock_failures: u64,
    pub late: u64,
    pub matches_made: u64,
}

#[derive(Debug, Clone)]
pub struct NodeState {
    id: NodeId,
    neighbors: Vec<NeighborRecord>,
    mempool: BTreeMap<(DerivedSeed, Direction), MempoolEntry>,
    matches: BTreeMap<MatchingId, MatchRecord>,
    requests: BTreeMap<DerivedSeed, Request>,
    audit_tokens: BTreeMap<MatchingId, (u64, SimTime)>,
    config: NodeConfig,
    rng: ChaCha8Rng,
    counters: NodeCounters,
}

impl NodeState {
    pub fn new(
        id: NodeId,
        channels: impl IntoIterator<Item = (NodeId, Channel)>,
        config: NodeConfig,
        rng_seed: u64,
    ) -> Result<Self, ConfigError> {
        config.validate()?;
        let mut neighbors: Vec<NeighborRecord> = channels
            .into_iter()
            .map(|(n, ch)| NeighborRecord::new(n, ch, config.stats_window))
            .collect();
        neighbors.sort_by_key(|r| r.neighbor);
        Ok(NodeState {
            id,
            neighbors,
            mempool: BTreeMap::new(),
            matches: BTreeMap::new(),
            requests: BTreeMap::new(),
            audit_tokens: BTreeMap::new(),
            config,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            counters: NodeCounters::default(),
        })
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    pub fn set_broadcast_policy(&mut self, policy: BroadcastPolicy) {
        self.config.broadcast_policy = policy;
    }

    pub fn counters(&self) -> &NodeCounters {
        &self.counters
    }

    pub fn neighbors(&self) -> &[NeighborRecord] {
        &self.neighbors
    }

    pub fn neighbor(&self, id: NodeId) -> Option<&NeighborRecord> {
        self.neighbors.iter().find(|r| r.neighbor == id)
    }

    pub fn neighbor_score(&self, id: NodeId) -> Option<f64> {
        self.neighbor(id)
            .map(|r| neighbor_score(&r.stats, &self.config.score_weights))
    }

    /// Replaces our copy of the channel to `neighbor` after a settlement.
    pub fn update_channel(&mut self, neighbor: NodeId, channel: Channel) {
        if let Some(rec) = self.neighbors.iter_mut().find(|r| r.neighbor == neighbor) {
            rec.channel = channel;
        }
    }

    pub fn entry(&self, r: &DerivedSeed, direction: Direction) -> Option<&MempoolEntry> {
        self.mempool.get(&(*r, direction))
    }

    pub fn mempool_len(&self) -> usize {
        self.mempool.len()
    }

    pub fn mempool_entries(&self) -> impl Iterator<Item = &MempoolEntry> {
        self.mempool.values()
    }

    pub fn match_record(&self, id: MatchingId) -> Option<&MatchRecord> {
        self.matches.get(&id)
    }

    pub fn matches_len(&self) -> usize {
        self.matches.len()
    }

    pub fn offers(&self, r: &DerivedSeed) -> &[Offer] {
        self.requests
            .get(r)
            .map(|q| q.offers.as_slice())
            .unwrap_or(&[])
    }

    /// Age of the oldest routing entry, if any.
    pub fn oldest_entry_age(&self, now: SimTime) -> Option<SimTime> {
        self.mempool
            .values()
            .map(|e| now.saturating_sub(e.first_seen))
            .max()
    }

    /// No routing state of any kind is held.
    pub fn is_idle(&self) -> bool {
        self.mempool.is_empty()
            && self.matches.is_empty()
            && self.requests.is_empty()
            && self.audit_tokens.is_empty()
    }

    fn record_event(&mut self, neighbor: NodeId, event: RelayEvent) {
        if let Some(rec) = self.neighbors.iter_mut().find(|r| r.neighbor == neighbor) {
            rec.stats.record(event);
        }
    }

    fn drop(&mut self, reason: DropReason) -> Vec<Action> {
        let c = &mut self.counters;
        match reason {
            DropReason::Malformed | DropReason::NotNeighbor => c.malformed += 1,
            DropReason::FeeCeiling => c.fee_rejections += 1,
            DropReason::Stale => c.stale += 1,
            DropReason::FeeAnomaly => c.fee_anomalies += 1,
            DropReason::Duplicate => c.duplicates += 1,
            DropReason::RouteLock => c.route_lock_failures += 1,
            DropReason::Late => c.late += 1,
        }
        vec![Action::Dropped(reason)]
    }

    /// Neighbors a seed of `direction` may be relayed to. Payer seeds need
    /// capacity from us to them; payee seeds need capacity from them to us.
    fn broadcast_targets(
        &mut self,
        direction: Direction,
        amount: Msat,
        exclude: &[NodeId],
    ) -> Vec<NodeId> {
        let me = self.id;
        let gating = self.config.volume_gating;
        let eligible = self.neighbors.iter().filter(|rec| {
            if !gating {
                return true;
            }
            let payer_side = match direction {
                Direction::A => me,
                Direction::B => rec.neighbor,
            };
            rec.channel.can_forward(payer_side, amount).unwrap_or(false)
        });
        select_broadcast_set(
            eligible,
            exclude,
            &self.config.broadcast_policy,
            &self.config.score_weights,
            &mut self.rng,
        )
    }

    /// Launches this endpoint's pheromone seed.
    pub fn originate(
        &mut self,
        role: Role,
        r_a: &[u8; 16],
        r_b: &[u8; 16],
        amount: Msat,
        max_fee: Msat,
        now: SimTime,
    ) -> Vec<Action> {
        let (seed_a, seed_b) = make_pheromone_pair(r_a, r_b, amount, max_fee);
        let seed = match role {
            Role::Payer => seed_a,
            Role::Payee => seed_b,
        };
        let initial = if self.config.counter_start_max == 0 {
            0
        } else {
            self.rng.gen_range(0..=self.config.counter_start_max)
        };
        let counter = next_counter(initial, &self.config, &mut self.rng);
        let msg = SeedMessage { counter, ..seed };

        let targets = self.broadcast_targets(seed.direction, amount, &[]);
        let sends = targets
            .iter()
            .map(|&to| SendRecord {
                to,
                counter,
                fee: 0,
                source: None,
            })
            .collect();
        self.mempool.insert(
            (seed.r, seed.direction),
            MempoolEntry {
                r: seed.r,
                direction: seed.direction,
                kind: EntryKind::Origin,
                min_counter_seen: initial,
                transmitters: Vec::new(),
                amount,
                max_fee,
                first_seen: now,
                sends,
            },
        );
        self.requests.insert(
            seed.r,
            Request {
                role,
                started_at: now,
                amount,
                max_fee,
                offers: Vec::new(),
                confirmed: None,
            },
        );
        targets
            .into_iter()
            .map(|to| Action::Send {
                to,
                msg,
                audit: None,
            })
            .collect()
    }

    /// Entry point for a frame arriving on the wire.
    pub fn receive_frame(
        &mut self,
        frame: &[u8],
        audit: Option<AuditTrail>,
        from: NodeId,
        now: SimTime,
    ) -> Vec<Action> {
        match SeedMessage::decode(frame) {
            Ok(msg) => self.receive(msg, audit, from, now),
            Err(DecodeError::Truncated { .. })
            | Err(DecodeError::UnknownTag(_))
            | Err(DecodeError::MissingMatchingId)
            | Err(DecodeError::TrailingBytes(_)) => self.drop(DropReason::Malformed),
        }
    }

    pub fn receive(
        &mut self,
        msg: SeedMessage,
        audit: Option<AuditTrail>,
        from: NodeId,
        now: SimTime,
    ) -> Vec<Action> {
        if self.neighbor(from).is_none() {
            return self.drop(DropReason::NotNeighbor);
        }
        match msg.kind {
            SeedKind::Pheromone => self.handle_pheromone(msg, from, now),
            SeedKind::Matched => self.handle_matched(msg, from, now),
            SeedKind::Confirmed => self.handle_confirmed(msg, audit, from, now),
        }
    }

    pub fn handle_pheromone(
        &mut self,
        msg: SeedMessage,
        from: NodeId,
        now: SimTime,
    ) -> Vec<Action> {
        if msg.kind != SeedKind::Pheromone {
            return self.drop(DropReason::Malformed);
        }
        self.record_event(from, RelayEvent::Pheromone);
        let key = (msg.r, msg.direction);
        let conjugate_known = self
            .mempool
            .contains_key(&(msg.r, msg.direction.conjugate()));
        let transmitter = Transmitter {
            neighbor: from,
            counter: msg.counter,
            fee: msg.current_fee,
            received_at: now,
        };

        match self.mempool.get(&key).map(|e| e.kind) {
            // Our own seed came back around.
            Some(EntryKind::Origin) => Vec::new(),
            Some(EntryKind::Relayed) => {
                let entry = self.mempool.get_mut(&key).unwrap();
                let improved = msg.counter < entry.min_counter_seen;
                entry.transmitters.push(transmitter);
                if !improved {
                    return Vec::new();
                }
                entry.min_counter_seen = msg.counter;
                self.relay(msg, from)
            }
            Some(EntryKind::Meeting) => {
                let entry = self.mempool.get_mut(&key).unwrap();
                let improved = msg.counter < entry.min_counter_seen;
                entry.transmitters.push(transmitter);
                if !improved {
                    return Vec::new();
                }
                entry.min_counter_seen = msg.counter;
                self.try_match(msg, from, now)
            }
            None if conjugate_known => {
                self.mempool.insert(
                    key,
                    MempoolEntry {
                        r: msg.r,
                        direction: msg.direction,
                        kind: EntryKind::Meeting,
                        min_counter_seen: msg.counter,
                        transmitters: vec![transmitter],
                        amount: msg.amount,
                        max_fee: msg.max_fee,
                        first_seen: now,
                        sends: Vec::new(),
                    },
                );
                self.try_match(msg, from, now)
            }
            None => {
                if msg.current_fee.saturating_add(self.config.fee) > msg.max_fee {
                    return self.drop(DropReason::FeeCeiling);
                }
                self.mempool.insert(
                    key,
                    MempoolEntry {
                        r: msg.r,
                        direction: msg.direction,
                        kind: EntryKind::Relayed,
                        min_counter_seen: msg.counter,
                        transmitters: vec![transmitter],
                        amount: msg.amount,
                        max_fee: msg.max_fee,
                        first_seen: now,
                        sends: Vec::new(),
                    },
                );
                self.relay(msg, from)
            }
        }
    }

    /// Rebroadcasts a pheromone copy received from `from`, adding our fee.
    fn relay(&mut self, msg: SeedMessage, from: NodeId) -> Vec<Action> {
        let fee = msg.current_fee.saturating_add(self.config.fee);
        if fee > msg.max_fee {
            return self.drop(DropReason::FeeCeiling);
        }
        let counter = next_counter(msg.counter, &self.config, &mut self.rng);
        let out = SeedMessage {
            counter,
            current_fee: fee,
            ..msg
        };
        let targets = self.broadcast_targets(msg.direction, msg.amount, &[from]);
        let entry = self.mempool.get_mut(&(msg.r, msg.direction)).unwrap();
        entry.sends.extend(targets.iter().map(|&to| SendRecord {
            to,
            counter,
            fee,
            source: Some((from, msg.counter)),
        }));
        targets
            .into_iter()
            .map(|to| Action::Send {
                to,
                msg: out,
                audit: None,
            })
            .collect()
    }

    /// Both floods meet here: `incoming` just arrived from `from` and the
    /// conjugate direction is already stored.
    pub fn try_match(&mut self, incoming: SeedMessage, from: NodeId, now: SimTime) -> Vec<Action> {
        let Some(stored) = self
            .mempool
            .get(&(incoming.r, incoming.direction.conjugate()))
        else {
            return self.drop(DropReason::Stale);
        };
        // (next hop, counter on that link, fee accumulated on that side)
        let stored_side = match stored.kind {
            EntryKind::Origin => (None, stored.min_counter_seen, 0),
            _ => match stored.best_transmitter() {
                Some(t) => (Some(t.neighbor), t.counter, t.fee),
                None => return self.drop(DropReason::Stale),
            },
        };
        let own_fee = if stored.kind == EntryKind::Origin {
            0
        } else {
            self.config.fee
        };
        let incoming_side = (Some(from), incoming.counter, incoming.current_fee);
        let (a_side, b_side) = match incoming.direction {
            Direction::A => (incoming_side, stored_side),
            Direction::B => (stored_side, incoming_side),
        };

        let total = a_side.2.saturating_add(b_side.2).saturating_add(own_fee);
        let base = SeedMessage {
            kind: SeedKind::Pheromone,
            direction: Direction::A,
            counter: a_side.1,
            current_fee: 0,
            matching_id: None,
            ..incoming
        };
        let matched = match base.promote_to_matched(MatchingId(self.rng.gen()), total) {
            Ok(m) => m,
            Err(_) => return self.drop(DropReason::FeeCeiling),
        };
        let matching_id = matched.matching_id.expect("matched seed has an id");
        self.counters.matches_made += 1;
        self.matches.insert(
            matching_id,
            MatchRecord {
                matching_id,
                r: incoming.r,
                role: MatchRole::Matching,
                toward_alice: a_side.0,
                toward_bob: b_side.0,
                next_counter: b_side.1,
                total_fee: total,
                state: MatchState::MatchedSent,
                created_at: now,
                counter_span: Some(a_side.1.saturating_add(b_side.1)),
                amount: incoming.amount,
            },
        );

        let mut out = vec![Action::MatchMade {
            r: incoming.r,
            matching_id,
            total_fee: total,
        }];
        match a_side.0 {
            Some(to) => out.push(Action::Send {
                to,
                msg: matched,
                audit: None,
            }),
            None => out.extend(self.accept_offer(matched, None, now)),
        }
        out
    }

    /// Payer-side bookkeeping for an arriving matched seed.
    fn accept_offer(
        &mut self,
        msg: SeedMessage,
        from: Option<NodeId>,
        now: SimTime,
    ) -> Vec<Action> {
        let matching_id = msg.matching_id.expect("matched seed has an id");
        let Some(req) = self.requests.get_mut(&msg.r) else {
            return self.drop(DropReason::Late);
        };
        if req.role != Role::Payer || req.confirmed.is_some() {
            return self.drop(DropReason::Late);
        }
        if msg.current_fee > req.max_fee {
            return self.drop(DropReason::FeeCeiling);
        }
        if let Some(prev) = req.offers.iter().find(|o| o.matching_id == matching_id) {
            let reason = if prev.total_fee != msg.current_fee {
                DropReason::FeeAnomaly
            } else {
                DropReason::Duplicate
            };
            if reason == DropReason::FeeAnomaly {
                if let Some(n) = from {
                    self.record_event(n, RelayEvent::PaymentFail);
                }
            }
            return self.drop(reason);
        }
        req.offers.push(Offer {
            matching_id,
            total_fee: msg.current_fee,
            delivered_by: from,
            counter: msg.counter,
            received_at: now,
        });
        let mut out = vec![Action::OfferReceived {
            r: msg.r,
            matching_id,
            total_fee: msg.current_fee,
        }];
        if req.offers.len() == 1 {
            let waited = now.saturating_sub(req.started_at);
            let at = req
                .started_at
                .saturating_add(waited.saturating_mul(self.config.offer_wait_factor as u64));
            out.push(Action::ScheduleConfirm { r: msg.r, at });
        }
        out
    }

    pub fn handle_matched(&mut self, msg: SeedMessage, from: NodeId, now: SimTime) -> Vec<Action> {
        let Some(matching_id) = msg.matching_id.filter(|_| msg.kind == SeedKind::Matched) else {
            return self.drop(DropReason::Malformed);
        };
        if let Some(rec) = self.matches.get(&matching_id) {
            if rec.total_fee != msg.current_fee {
                self.record_event(from, RelayEvent::PaymentFail);
                return self.drop(DropReason::FeeAnomaly);
            }
            return self.drop(DropReason::Duplicate);
        }
        let Some(entry) = self.mempool.get(&(msg.r, Direction::A)) else {
            return self.drop(DropReason::Stale);
        };
        match entry.kind {
            EntryKind::Origin => {
                self.record_event(from, RelayEvent::Matched);
                self.accept_offer(msg, Some(from), now)
            }
            EntryKind::Meeting => self.drop(DropReason::Stale),
            EntryKind::Relayed => {
                let Some((prev, prev_counter)) = entry.source_of(from, msg.counter) else {
                    return self.drop(DropReason::Stale);
                };
                if prev == from {
                    return self.drop(DropReason::RouteLock);
                }
                self.record_event(from, RelayEvent::Matched);
                self.matches.insert(
                    matching_id,
                    MatchRecord {
                        matching_id,
                        r: msg.r,
                        role: MatchRole::PayerSide,
                        toward_alice: Some(prev),
                        toward_bob: Some(from),
                        next_counter: msg.counter,
                        total_fee: msg.current_fee,
                        state: MatchState::MatchedSent,
                        created_at: now,
                        counter_span: None,
                        amount: msg.amount,
                    },
                );
                vec![Action::Send {
                    to: prev,
                    msg: SeedMessage {
                        counter: prev_counter,
                        ..msg
                    },
                    audit: None,
                }]
            }
        }
    }

    /// Payer: choose the cheapest offer (earliest on ties) and lock its route.
    pub fn confirm(&mut self, r: &DerivedSeed, now: SimTime) -> Vec<Action> {
        let Some(req) = self.requests.get(r) else {
            return Vec::new();
        };
        if req.role != Role::Payer || req.confirmed.is_some() {
            return Vec::new();
        }
        let Some(best) = req
            .offers
            .iter()
            .enumerate()
            .min_by_key(|(i, o)| (o.total_fee, *i))
            .map(|(_, o)| *o)
        else {
            return Vec::new();
        };
        let offers = req.offers.len();
        let min_offer_fee = best.total_fee;
        let (amount, max_fee) = (req.amount, req.max_fee);

        let (to, counter, span) = match best.delivered_by {
            Some(n) => {
                self.matches.insert(
                    best.matching_id,
                    MatchRecord {
                        matching_id: best.matching_id,
                        r: *r,
                        role: MatchRole::PayerSide,
                        toward_alice: None,
                        toward_bob: Some(n),
                        next_counter: best.counter,
                        total_fee: best.total_fee,
                        state: MatchState::ConfirmedSeen,
                        created_at: now,
                        counter_span: None,
                        amount,
                    },
                );
                (n, best.counter, None)
            }
            None => {
                let Some(rec) = self.matches.get_mut(&best.matching_id) else {
                    return self.drop(DropReason::Stale);
                };
                let Some(n) = rec.toward_bob else {
                    return self.drop(DropReason::RouteLock);
                };
                rec.state = MatchState::ConfirmedSeen;
                (n, rec.next_counter, rec.counter_span)
            }
        };
        self.requests.get_mut(r).unwrap().confirmed = Some(best.matching_id);

        let msg = SeedMessage {
            kind: SeedKind::Confirmed,
            direction: Direction::A,
            r: *r,
            counter,
            amount,
            max_fee,
            current_fee: best.total_fee,
            matching_id: Some(best.matching_id),
        };
        let audit = self.config.audit.then(|| AuditTrail {
            counter_span: span,
            tokens: Vec::new(),
        });
        vec![
            Action::Confirmed {
                r: *r,
                matching_id: best.matching_id,
                total_fee: best.total_fee,
                offers,
                min_offer_fee,
            },
            Action::Send { to, msg, audit },
        ]
    }

    fn append_audit_token(&mut self, id: MatchingId, audit: &mut Option<AuditTrail>, now: SimTime) {
        if let Some(trail) = audit.as_mut() {
            let token = trail.append_token(&mut self.rng);
            self.audit_tokens.insert(id, (token, now));
        }
    }

    pub fn handle_confirmed(
        &mut self,
        msg: SeedMessage,
        mut audit: Option<AuditTrail>,
        from: NodeId,
        now: SimTime,
    ) -> Vec<Action> {
        let Some(matching_id) = msg.matching_id.filter(|_| msg.kind == SeedKind::Confirmed) else {
            return self.drop(DropReason::Malformed);
        };

        if let Some(rec) = self.matches.get(&matching_id) {
            if rec.state != MatchState::MatchedSent {
                return self.drop(DropReason::Duplicate);
            }
            if rec.toward_alice != Some(from) {
                return self.drop(DropReason::RouteLock);
            }
            if rec.total_fee != msg.current_fee {
                self.record_event(from, RelayEvent::PaymentFail);
                return self.drop(DropReason::FeeAnomaly);
            }
            let rec = self.matches.get_mut(&matching_id).unwrap();
            rec.state = MatchState::ConfirmedSeen;
            let (next, counter, span) = (rec.toward_bob, rec.next_counter, rec.counter_span);
            if let (Some(trail), Some(span)) = (audit.as_mut(), span) {
                trail.counter_span = Some(span);
            }
            return match next {
                Some(to) => {
                    self.append_audit_token(matching_id, &mut audit, now);
                    vec![Action::Send {
                        to,
                        msg: SeedMessage { counter, ..msg },
                        audit,
                    }]
                }
                None => vec![Action::DeliveredToPayee {
                    r: msg.r,
                    matching_id,
                    msg,
                    audit,
                }],
            };
        }

        // Payee trail: lock lazily on first sight.
        let Some(entry) = self.mempool.get(&(msg.r, Direction::B)) else {
            return self.drop(DropReason::RouteLock);
        };
        let (next, counter) = match entry.kind {
            EntryKind::Origin => (None, 0),
            EntryKind::Meeting => return self.drop(DropReason::RouteLock),
            EntryKind::Relayed => match entry.source_of(from, msg.counter) {
                Some((prev, c)) if prev != from => (Some(prev), c),
                _ => return self.drop(DropReason::RouteLock),
            },
        };
        self.matches.insert(
            matching_id,
            MatchRecord {
                matching_id,
                r: msg.r,
                role: MatchRole::PayeeSide,
                toward_alice: Some(from),
                toward_bob: next,
                next_counter: counter,
                total_fee: msg.current_fee,
                state: MatchState::ConfirmedSeen,
                created_at: now,
                counter_span: None,
                amount: msg.amount,
            },
        );
        match next {
            Some(to) => {
                self.append_audit_token(matching_id, &mut audit, now);
                vec![Action::Send {
                    to,
                    msg: SeedMessage { counter, ..msg },
                    audit,
                }]
            }
            None => vec![Action::DeliveredToPayee {
                r: msg.r,
                matching_id,
                msg,
                audit,
            }],
        }
    }

    /// Payee: start the path acknowledgement for a delivered confirmed seed.
    pub fn acknowledge(&mut self, matching_id: MatchingId, msg: SeedMessage) -> Vec<Action> {
        let Some(rec) = self.matches.get_mut(&matching_id) else {
            return self.drop(DropReason::Stale);
        };
        rec.state = MatchState::Acked;
        let (amount, prev) = (rec.amount, rec.toward_alice);
        match prev {
            Some(to) => {
                self.record_event(to, RelayEvent::PaymentOk(amount));
                vec![Action::Ack { to, msg }]
            }
            None => Vec::new(),
        }
    }

    pub fn handle_ack(&mut self, msg: SeedMessage, from: NodeId) -> Vec<Action> {
        let Some(matching_id) = msg.matching_id else {
            return self.drop(DropReason::Malformed);
        };
        let Some(rec) = self.matches.get_mut(&matching_id) else {
            return self.drop(DropReason::Stale);
        };
        if rec.toward_bob != Some(from) || rec.state != MatchState::ConfirmedSeen {
            return self.drop(DropReason::RouteLock);
        }
        rec.state = MatchState::Acked;
        let (amount, prev, fee, r) = (rec.amount, rec.toward_alice, rec.total_fee, rec.r);
        self.record_event(from, RelayEvent::PaymentOk(amount));
        match prev {
            Some(to) => {
                self.record_event(to, RelayEvent::PaymentOk(amount));
                vec![Action::Ack { to, msg }]
            }
            None => vec![Action::PathAcked {
                r,
                matching_id,
                total_fee: fee,
            }],
        }
    }

    /// One step of the payer's audit replay. A node that holds no token for
    /// this route passes the trail through untouched.
    pub fn replay_audit<'a>(
        &mut self,
        matching_id: MatchingId,
        trail: &'a [u64],
    ) -> Result<&'a [u64], AuditError> {
        match self.audit_tokens.remove(&matching_id) {
            Some((token, _)) => audit::replay_step(trail, token),
            None => Ok(trail),
        }
    }

    /// Forgets the audit token retained for a route.
    pub fn discard_audit_token(&mut self, matching_id: MatchingId) -> Option<u64> {
        self.audit_tokens.remove(&matching_id).map(|(t, _)| t)
    }

    /// Drops everything older than the TTL, plus acknowledged routes.
    /// Returns the number of mempool entries and route locks removed.
    pub fn ttl_sweep(&mut self, now: SimTime) -> usize {
        let cutoff = now.saturating_sub(self.config.ttl);
        let expired = |t: SimTime| t < cutoff;

        let before = self.mempool.len();
        self.mempool.retain(|_, e| !expired(e.first_seen));
        let mut evicted = before - self.mempool.len();

        let mut unanswered = Vec::new();
        let before = self.matches.len();
        self.matches.retain(|_, rec| {
            if rec.state == MatchState::Acked {
                return false;
            }
            if expired(rec.created_at) {
                if rec.state == MatchState::ConfirmedSeen {
                    if let Some(n) = rec.toward_bob {
                        unanswered.push(n);
                    }
                }
                return false;
            }
            true
        });
        evicted += before - self.matches.len();
        for n in unanswered {
            self.record_event(n, RelayEvent::PaymentFail);
        }

        self.requests.retain(|_, q| !expired(q.started_at));
        self.audit_tokens.retain(|_, (_, t)| !expired(*t));
        evicted
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(i: u32) -> NodeId {
        NodeId(i)
    }

    fn node(id: u32, neighbors: &[(u32, Msat)], config: NodeConfig) -> NodeState {
        let chans = neighbors
            .iter()
            .map(|&(m, cap)| (n(m), Channel::bidirectional(n(id), n(m), cap, cap)));
        NodeState::new(n(id), chans, config, id as u64).unwrap()
    }

    fn sends(actions: &[Action]) -> Vec<(NodeId, SeedMessage)> {
        actions
            .iter()
            .filter_map(|a| match a {
                Action::Send { to, msg, .. } => Some((*to, *msg)),
                _ => None,
            })
            .collect()
    }

    const RA: [u8; 16] = [1; 16];
    const RB: [u8; 16] = [2; 16];

    fn pheromone(direction: Direction, counter: u32, fee: Msat, max_fee: Msat) -> SeedMessage {
        let (a, b) = make_pheromone_pair(&RA, &RB, 100, max_fee);
        let base = if direction == Direction::A { a } else { b };
        SeedMessage {
            counter,
            current_fee: fee,
            ..base
        }
    }

    #[test]
    fn originate_floods_all_neighbors() {
        let mut alice = node(0, &[(1, 1000), (2, 1000), (3, 1000)], NodeConfig::default());
        let out = sends(&alice.originate(Role::Payer, &RA, &RB, 100, 50, 0));
        assert_eq!(out.len(), 3);
        for (_, m) in &out {
            assert_eq!(m.kind, SeedKind::Pheromone);
            assert_eq!(m.direction, Direction::A);
            assert_eq!(m.current_fee, 0);
            assert_eq!(m.counter, 1);
        }
    }

    #[test]
    fn originate_respects_volume() {
        let mut alice = node(0, &[(1, 1000), (2, 50), (3, 1000)], NodeConfig::default());
        let out = sends(&alice.originate(Role::Payer, &RA, &RB, 100, 50, 0));
        let to: Vec<_> = out.iter().map(|(t, _)| *t).collect();
        assert_eq!(to, vec![n(1), n(3)]);
    }

    #[test]
    fn originate_without_neighbors_is_silent() {
        let mut lonely = node(0, &[], NodeConfig::default());
        assert!(lonely.originate(Role::Payer, &RA, &RB, 1, 1, 0).is_empty());
    }

    #[test]
    fn counter_start_zero_gives_first_counter_one() {
        let cfg = NodeConfig {
            counter_start_max: 0,
            counter_step_max: 1,
            ..NodeConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(next_counter(0, &cfg, &mut rng), 1);
        let cfg = NodeConfig {
            counter_step_max: 3,
            ..cfg
        };
        for _ in 0..100 {
            let c = next_counter(7, &cfg, &mut rng);
            assert!((8..=10).contains(&c));
        }
        assert_eq!(next_counter(u32::MAX, &cfg, &mut rng), u32::MAX);
    }

    #[test]
    fn first_sight_relays_with_fee() {
        let cfg = NodeConfig {
            fee: 3,
            ..NodeConfig::default()
        };
        let mut x = node(5, &[(1, 1000), (2, 1000), (3, 1000), (4, 1000)], cfg);
        let out = sends(&x.handle_pheromone(pheromone(Direction::A, 1, 2, 50), n(1), 10));
        assert_eq!(out.len(), 3);
        assert!(out
            .iter()
            .all(|(to, m)| *to != n(1) && m.current_fee == 5 && m.counter == 2));
    }

    #[test]
    fn relay_refuses_past_fee_ceiling() {
        let cfg = NodeConfig {
            fee: 3,
            ..NodeConfig::default()
        };
        let mut x = node(5, &[(1, 1000), (2, 1000)], cfg);
        let out = x.handle_pheromone(pheromone(Direction::A, 1, 8, 10), n(1), 10);
        assert_eq!(out, vec![Action::Dropped(DropReason::FeeCeiling)]);
        assert_eq!(x.mempool_len(), 0);
    }

    #[test]
    fn repeat_copy_only_relayed_on_lower_counter() {
        let mut x = node(5, &[(1, 1000), (2, 1000), (3, 1000)], NodeConfig::default());
        assert_eq!(
            sends(&x.handle_pheromone(pheromone(Direction::A, 4, 0, 50), n(1), 0)).len(),
            2
        );
        assert!(x
            .handle_pheromone(pheromone(Direction::A, 4, 0, 50), n(2), 1)
            .is_empty());
        assert!(x
            .handle_pheromone(pheromone(Direction::A, 6, 0, 50), n(3), 2)
            .is_empty());
        let again = sends(&x.handle_pheromone(pheromone(Direction::A, 2, 0, 50), n(2), 3));
        assert_eq!(
            again.iter().map(|s| s.0).collect::<Vec<_>>(),
            vec![n(1), n(3)]
        );
        let e = x.entry(&again[0].1.r, Direction::A).unwrap();
        assert_eq!(e.min_counter_seen, 2);
        assert_eq!(e.transmitters.len(), 4);
        assert_eq!(e.best_transmitter().unwrap().neighbor, n(2));
    }

    #[test]
    fn conjugate_arrival_matches() {
        let cfg = NodeConfig {
            fee: 2,
            ..NodeConfig::default()
        };
        let mut m = node(5, &[(1, 1000), (2, 1000)], cfg);
        m.handle_pheromone(pheromone(Direction::A, 3, 3, 10), n(1), 0);
        let out = m.handle_pheromone(pheromone(Direction::B, 2, 4, 10), n(2), 5);
        assert!(matches!(out[0], Action::MatchMade { total_fee: 9, .. }));
        let s = sends(&out);
        assert_eq!(s.len(), 1);
        let (to, matched) = s[0];
        assert_eq!(to, n(1));
        assert_eq!(matched.kind, SeedKind::Matched);
        assert_eq!(matched.current_fee, 9);
        assert_eq!(matched.counter, 3);
        let rec = m.match_record(matched.matching_id.unwrap()).unwrap();
        assert_eq!(rec.toward_alice, Some(n(1)));
        assert_eq!(rec.toward_bob, Some(n(2)));
        assert_eq!(rec.counter_span, Some(5));
    }

    #[test]
    fn infeasible_fee_prevents_match() {
        let cfg = NodeConfig {
            fee: 2,
            ..NodeConfig::default()
        };
        let mut m = node(5, &[(1, 1000), (2, 1000)], cfg);
        m.handle_pheromone(pheromone(Direction::A, 3, 4, 10), n(1), 0);
        let out = m.handle_pheromone(pheromone(Direction::B, 2, 5, 10), n(2), 5);
        assert_eq!(out, vec![Action::Dropped(DropReason::FeeCeiling)]);
        assert_eq!(m.matches_len(), 0);
    }

    #[test]
    fn matched_relay_forwards_unchanged_fee_and_pins_it() {
        let mut x = node(5, &[(1, 1000), (2, 1000)], NodeConfig::default());
        let sent = sends(&x.handle_pheromone(pheromone(Direction::A, 1, 0, 50), n(1), 0));
        assert_eq!(sent[0].0, n(2));
        let matched = sent[0].1.promote_to_matched(MatchingId(77), 6).unwrap();
        let out = sends(&x.handle_matched(matched, n(2), 5));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, n(1));
        assert_eq!(out[0].1.current_fee, 6);
        assert_eq!(out[0].1.counter, 1);

        let same = x.handle_matched(matched, n(2), 6);
        assert_eq!(same, vec![Action::Dropped(DropReason::Duplicate)]);
        let inflated = SeedMessage {
            current_fee: 7,
            ..matched
        };
        assert_eq!(
            x.handle_matched(inflated, n(2), 7),
            vec![Action::Dropped(DropReason::FeeAnomaly)]
        );
        assert_eq!(x.counters().fee_anomalies, 1);
        assert_eq!(x.neighbor(n(2)).unwrap().stats.payments_failed, 1);
    }

    #[test]
    fn matched_without_entry_is_stale() {
        let mut x = node(5, &[(1, 1000)], NodeConfig::default());
        let m = pheromone(Direction::A, 1, 0, 5)
            .promote_to_matched(MatchingId(1), 0)
            .unwrap();
        assert_eq!(
            x.handle_matched(m, n(1), 0),
            vec![Action::Dropped(DropReason::Stale)]
        );
    }

    #[test]
    fn payer_collects_offers_and_picks_cheapest() {
        let mut alice = node(0, &[(1, 1000), (2, 1000), (3, 1000)], NodeConfig::default());
        let out = sends(&alice.originate(Role::Payer, &RA, &RB, 100, 50, 0));
        let seed = out[0].1;
        let offer = |id, fee| seed.promote_to_matched(MatchingId(id), fee).unwrap();
        let first = alice.handle_matched(offer(1, 9), n(1), 10);
        assert!(first.contains(&Action::ScheduleConfirm { r: seed.r, at: 20 }));
        alice.handle_matched(offer(2, 7), n(2), 12);
        alice.handle_matched(offer(3, 12), n(3), 13);
        assert_eq!(alice.offers(&seed.r).len(), 3);

        let out = alice.confirm(&seed.r, 20);
        assert!(matches!(
            out[0],
            Action::Confirmed {
                total_fee: 7,
                offers: 3,
                min_offer_fee: 7,
                ..
            }
        ));
        let s = sends(&out);
        assert_eq!(s[0].0, n(2));
        assert_eq!(s[0].1.kind, SeedKind::Confirmed);
        assert_eq!(s[0].1.matching_id, Some(MatchingId(2)));
        assert!(alice.confirm(&seed.r, 21).is_empty());
    }

    #[test]
    fn fee_tie_goes_to_earliest_offer() {
        let mut alice = node(0, &[(1, 1000), (2, 1000)], NodeConfig::default());
        let seed = sends(&alice.originate(Role::Payer, &RA, &RB, 100, 50, 0))[0].1;
        alice.handle_matched(seed.promote_to_matched(MatchingId(10), 7).unwrap(), n(2), 3);
        alice.handle_matched(seed.promote_to_matched(MatchingId(11), 7).unwrap(), n(1), 4);
        let s = sends(&alice.confirm(&seed.r, 6));
        assert_eq!(s[0].1.matching_id, Some(MatchingId(10)));
        assert_eq!(s[0].0, n(2));
    }

    #[test]
    fn confirmed_with_unknown_id_is_dropped() {
        let mut x = node(5, &[(1, 1000)], NodeConfig::default());
        let c = pheromone(Direction::A, 1, 0, 5)
            .promote_to_matched(MatchingId(1), 0)
            .unwrap()
            .promote_to_confirmed()
            .unwrap();
        assert_eq!(
            x.handle_confirmed(c, None, n(1), 0),
            vec![Action::Dropped(DropReason::RouteLock)]
        );
        assert_eq!(x.counters().route_lock_failures, 1);
    }

    #[test]
    fn sweep_threshold() {
        let cfg = NodeConfig {
            ttl: 100,
            ..NodeConfig::default()
        };
        let mut x = node(5, &[(1, 1000), (2, 1000)], cfg);
        x.handle_pheromone(pheromone(Direction::A, 1, 0, 50), n(1), 0);
        assert_eq!(x.ttl_sweep(99), 0);
        assert_eq!(x.ttl_sweep(100), 0);
        assert_eq!(x.mempool_len(), 1);
        assert_eq!(x.ttl_sweep(101), 1);
        assert!(x.is_idle());
    }

    #[test]
    fn messages_from_strangers_are_dropped() {
        let mut x = node(5, &[(1, 1000)], NodeConfig::default());
        let out = x.receive(pheromone(Direction::A, 1, 0, 5), None, n(9), 0);
        assert_eq!(out, vec![Action::Dropped(DropReason::NotNeighbor)]);
        let out = x.receive_frame(&[0xff; 3], None, n(1), 0);
        assert_eq!(out, vec![Action::Dropped(DropReason::Malformed)]);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = NodeConfig {
            counter_step_max: 0,
            ..NodeConfig::default()
        };
        assert_eq!(cfg.validate(), Err(ConfigError::ZeroCounterStep));
        let cfg = NodeConfig {
            ttl: 0,
            ..NodeConfig::default()
        };
        assert!(NodeState::new(n(0), [], cfg, 0).is_err());
    }
}

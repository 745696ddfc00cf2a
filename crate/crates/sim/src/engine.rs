//! The discrete-event loop.
//!
//! Events are ordered by `(time, sequence number)`; the sequence number is
//! assigned when an event is scheduled, so ties resolve in scheduling order.

use crate::adversary::Adversary;
use crate::metrics::{self, AuditOutcome, Metrics, Outcome, PaymentRecord, RunTotals};
use crate::oracle;
use crate::scenario::{Latency, PaymentSpec, PolicySwitch, Scenario, ScenarioError};
use crate::{stream_seed, Stream};
use antroute::audit::{intermediaries_from_span, verify_count};
use antroute::node::Action;
use antroute::{
    AuditError, AuditTrail, ChannelGraph, DerivedSeed, MatchingId, Msat, NodeId, NodeState, Role,
    SeedKind, SeedMessage, SimTime,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Keep a JSON-lines log of every delivered message.
    pub event_log: bool,
}

#[derive(Debug, Clone)]
enum Event {
    Start(usize),
    Deliver {
        from: NodeId,
        to: NodeId,
        frame: Vec<u8>,
        audit: Option<AuditTrail>,
        ack: bool,
    },
    Confirm {
        node: NodeId,
        r: DerivedSeed,
    },
    Deadline(usize),
    Sweep,
}

#[derive(Debug)]
struct Queued {
    at: SimTime,
    seq: u64,
    event: Event,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

#[derive(Serialize)]
struct LogLine<'a> {
    t: SimTime,
    src: NodeId,
    dst: NodeId,
    frame_hex: String,
    kind: &'a str,
}

pub struct Simulation {
    seed: u64,
    payments: Vec<PaymentSpec>,
    policy_switch: Option<PolicySwitch>,
    switched: bool,
    graph: ChannelGraph,
    fees: BTreeMap<NodeId, Msat>,
    nodes: BTreeMap<NodeId, NodeState>,
    adversaries: BTreeMap<NodeId, Adversary>,
    latency: Latency,
    latency_rng: ChaCha8Rng,
    secret_rng: ChaCha8Rng,
    processing_delay: SimTime,
    sweep_interval: SimTime,
    horizon: SimTime,
    queue: BinaryHeap<Reverse<Queued>>,
    seq: u64,
    now: SimTime,
    records: Vec<PaymentRecord>,
    by_r: BTreeMap<DerivedSeed, usize>,
    by_mid: BTreeMap<MatchingId, usize>,
    pinned: BTreeMap<MatchingId, (NodeId, Msat)>,
    trails: BTreeMap<MatchingId, Vec<u64>>,
    peak_mempool: BTreeMap<NodeId, usize>,
    drops: BTreeMap<String, u64>,
    max_age_after_sweep: SimTime,
    last_traffic: Option<SimTime>,
    empty_since: Option<SimTime>,
    violations: Vec<String>,
    log: Option<String>,
    channel_count: usize,
}

/// Output of a finished run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Metrics,
    pub event_log: Option<String>,
}

impl Simulation {
    pub fn new(scenario: &Scenario, options: RunOptions) -> Result<Simulation, ScenarioError> {
        let resolved = scenario.resolve()?;
        let seed = scenario.seed;
        let mut nodes = BTreeMap::new();
        let mut fees = BTreeMap::new();
        for (&id, config) in &resolved.configs {
            let node = NodeState::new(
                id,
                resolved.graph.incident(id),
                config.clone(),
                stream_seed(seed, Stream::Node, id.0 as u64),
            )
            .map_err(|source| ScenarioError::NodeConfig { node: id, source })?;
            fees.insert(id, config.fee);
            nodes.insert(id, node);
        }
        let adversaries = scenario
            .adversaries
            .iter()
            .map(|(&id, &kind)| {
                (
                    id,
                    Adversary::new(kind, stream_seed(seed, Stream::Adversary, id.0 as u64)),
                )
            })
            .collect();

        let records = resolved
            .payments
            .iter()
            .enumerate()
            .map(|(index, p)| PaymentRecord {
                index,
                phase: match scenario.policy_switch {
                    Some(sw) if index < sw.after_payments => "warmup".into(),
                    Some(_) => "measure".into(),
                    None => "main".into(),
                },
                start: p.at,
                payer: p.payer,
                payee: p.payee,
                amount: p.amount,
                max_fee: p.max_fee,
                outcome: Outcome::Pending,
                success: false,
                offers: 0,
                discovery_latency: None,
                completed_at: None,
                matching_node: None,
                path: Vec::new(),
                path_hops: None,
                total_fee: None,
                min_offer_fee: None,
                ground_truth_fee: None,
                oracle_hops: None,
                oracle_min_fee: None,
                stretch: None,
                volume_ok: None,
                audit: None,
                messages: Default::default(),
            })
            .collect();

        let mut sim = Simulation {
            seed,
            payments: resolved.payments.clone(),
            policy_switch: scenario.policy_switch,
            switched: false,
            channel_count: resolved.graph.channels().len(),
            graph: resolved.graph,
            fees,
            nodes,
            adversaries,
            latency: scenario.latency,
            latency_rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, Stream::Latency, 0)),
            secret_rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, Stream::Secrets, 0)),
            processing_delay: scenario.processing_delay,
            sweep_interval: scenario.sweep_interval,
            horizon: scenario.horizon,
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0,
            records,
            by_r: BTreeMap::new(),
            by_mid: BTreeMap::new(),
            pinned: BTreeMap::new(),
            trails: BTreeMap::new(),
            peak_mempool: BTreeMap::new(),
            drops: BTreeMap::new(),
            max_age_after_sweep: 0,
            last_traffic: None,
            empty_since: None,
            violations: Vec::new(),
            log: options.event_log.then(String::new),
        };
        sim.peak_mempool = sim.nodes.keys().map(|&n| (n, 0)).collect();
        for i in 0..sim.payments.len() {
            let at = sim.payments[i].at;
            sim.schedule(at, Event::Start(i));
        }
        sim.schedule(sim.sweep_interval, Event::Sweep);
        Ok(sim)
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeState> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeState> {
        self.nodes.values()
    }

    pub fn graph(&self) -> &ChannelGraph {
        &self.graph
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    fn schedule(&mut self, at: SimTime, event: Event) {
        self.seq += 1;
        self.queue.push(Reverse(Queued {
            at,
            seq: self.seq,
            event,
        }));
    }

    /// Processes events until the queue drains or the horizon passes.
    pub fn run(&mut self) {
        while let Some(Reverse(q)) = self.queue.pop() {
            if q.at > self.horizon {
                self.now = self.horizon;
                self.queue.clear();
                break;
            }
            self.now = q.at;
            match q.event {
                Event::Start(i) => self.start(i),
                Event::Deliver {
                    from,
                    to,
                    frame,
                    audit,
                    ack,
                } => self.deliver(from, to, frame, audit, ack),
                Event::Confirm { node, r } => {
                    let out = self
                        .nodes
                        .get_mut(&node)
                        .expect("known node")
                        .confirm(&r, self.now);
                    self.process(node, out);
                }
                Event::Deadline(i) => {
                    if self.records[i].outcome == Outcome::Pending {
                        self.records[i].outcome = Outcome::Timeout;
                        log::debug!("payment {i} timed out");
                    }
                }
                Event::Sweep => self.sweep(),
            }
        }
        for rec in &mut self.records {
            if rec.outcome == Outcome::Pending {
                rec.outcome = Outcome::Timeout;
            }
        }
    }

    pub fn metrics(&self) -> Metrics {
        let totals = RunTotals {
            peak_mempool: self.peak_mempool.clone(),
            drops: self.drops.clone(),
            max_entry_age_after_sweep: self.max_age_after_sweep,
            last_traffic_at: self.last_traffic,
            mempools_empty_at: self.empty_since,
            end_time: self.now,
            invariant_violations: self.violations.clone(),
        };
        Metrics {
            seed: self.seed,
            nodes: self.nodes.len(),
            channels: self.channel_count,
            summary: metrics::summarize(&self.records, totals),
            payments: self.records.clone(),
        }
    }

    pub fn event_log(&self) -> Option<&str> {
        self.log.as_deref()
    }

    pub fn into_output(self) -> RunOutput {
        RunOutput {
            metrics: self.metrics(),
            event_log: self.log,
        }
    }

    fn start(&mut self, i: usize) {
        if let Some(sw) = self.policy_switch {
            if i >= sw.after_payments && !self.switched {
                self.switched = true;
                for node in self.nodes.values_mut() {
                    node.set_broadcast_policy(sw.policy);
                }
            }
        }
        let p = self.payments[i];
        let r_a: [u8; 16] = self.secret_rng.gen();
        let r_b: [u8; 16] = self.secret_rng.gen();
        self.by_r.insert(DerivedSeed::from_secrets(&r_a, &r_b), i);

        let fees = &self.fees;
        let rec = &mut self.records[i];
        rec.oracle_hops = oracle::shortest_hops(&self.graph, p.payer, p.payee, p.amount);
        rec.oracle_min_fee = oracle::cheapest_fee(&self.graph, p.payer, p.payee, p.amount, |n| {
            fees.get(&n).copied().unwrap_or(0)
        });

        let now = self.now;
        let payer = self.nodes.get_mut(&p.payer).expect("known payer");
        let ttl = payer.config().ttl;
        let out = payer.originate(Role::Payer, &r_a, &r_b, p.amount, p.max_fee, now);
        self.process(p.payer, out);
        let out = self
            .nodes
            .get_mut(&p.payee)
            .expect("known payee")
            .originate(Role::Payee, &r_a, &r_b, p.amount, p.max_fee, now);
        self.process(p.payee, out);
        self.note_mempool(p.payer);
        self.note_mempool(p.payee);
        self.schedule(now.saturating_add(ttl), Event::Deadline(i));
    }

    fn note_mempool(&mut self, id: NodeId) {
        let len = self.nodes[&id].mempool_len();
        let peak = self.peak_mempool.entry(id).or_insert(0);
        *peak = (*peak).max(len);
    }

    fn deliver(
        &mut self,
        from: NodeId,
        to: NodeId,
        frame: Vec<u8>,
        audit: Option<AuditTrail>,
        ack: bool,
    ) {
        self.last_traffic = Some(self.now);
        if let Some(log) = self.log.as_mut() {
            let kind = if ack {
                "ack"
            } else {
                SeedMessage::decode(&frame).map_or("malformed", |m| m.kind.name())
            };
            let line = LogLine {
                t: self.now,
                src: from,
                dst: to,
                frame_hex: hex::encode(&frame),
                kind,
            };
            log.push_str(&serde_json::to_string(&line).expect("log line serializes"));
            log.push('\n');
        }
        if let Some(adv) = self.adversaries.get_mut(&to) {
            if adv.drops_inbound() {
                return;
            }
        }
        let now = self.now;
        let decoded = SeedMessage::decode(&frame);
        let out = match decoded {
            Ok(msg) if ack => self
                .nodes
                .get_mut(&to)
                .expect("known node")
                .handle_ack(msg, from),
            Ok(mut msg) => {
                if let Some(adv) = self.adversaries.get_mut(&to) {
                    adv.on_inbound(&mut msg);
                }
                self.track_confirmed(from, to, &msg);
                self.nodes
                    .get_mut(&to)
                    .expect("known node")
                    .receive(msg, audit, from, now)
            }
            Err(_) => self
                .nodes
                .get_mut(&to)
                .expect("known node")
                .receive_frame(&frame, audit, from, now),
        };
        self.process(to, out);
        self.note_mempool(to);
    }

    /// Follows the confirmed seed hop by hop to reconstruct the locked path.
    fn track_confirmed(&mut self, from: NodeId, to: NodeId, msg: &SeedMessage) {
        if msg.kind != SeedKind::Confirmed {
            return;
        }
        let Some(&i) = msg.matching_id.and_then(|id| self.by_mid.get(&id)) else {
            return;
        };
        let honest = self.adversaries.is_empty();
        let amount = self.records[i].amount;
        let usable = self
            .graph
            .get(from, to)
            .is_some_and(|ch| ch.can_forward(from, amount).unwrap_or(false));
        let rec = &mut self.records[i];
        if rec.path.last() != Some(&from) {
            return;
        }
        if rec.path.contains(&to) && honest {
            self.violations
                .push(format!("payment {i}: confirmed seed revisits node {to}"));
        }
        rec.path.push(to);
        rec.volume_ok = Some(rec.volume_ok.unwrap_or(true) && usable);
    }

    fn transmit(
        &mut self,
        from: NodeId,
        to: NodeId,
        msg: SeedMessage,
        audit: Option<AuditTrail>,
        ack: bool,
    ) {
        if let Some(&i) = self.by_r.get(&msg.r) {
            let m = &mut self.records[i].messages;
            match (ack, msg.kind) {
                (true, _) => m.ack += 1,
                (false, SeedKind::Pheromone) => m.pheromone += 1,
                (false, SeedKind::Matched) => m.matched += 1,
                (false, SeedKind::Confirmed) => m.confirmed += 1,
            }
        }
        let delay = self
            .processing_delay
            .saturating_add(self.latency.draw(&mut self.latency_rng));
        let at = self.now.saturating_add(delay);
        self.schedule(
            at,
            Event::Deliver {
                from,
                to,
                frame: msg.encode(),
                audit,
                ack,
            },
        );
    }

    fn process(&mut self, at: NodeId, actions: Vec<Action>) {
        for action in actions {
            match action {
                Action::Send {
                    to,
                    mut msg,
                    mut audit,
                } => {
                    if let (Some(adv), Some(node)) =
                        (self.adversaries.get_mut(&at), self.nodes.get_mut(&at))
                    {
                        adv.on_outbound(node, &mut msg, &mut audit);
                    }
                    self.transmit(at, to, msg, audit, false);
                }
                Action::Ack { to, msg } => self.transmit(at, to, msg, None, true),
                Action::ScheduleConfirm { r, at: when } => {
                    let when = when.max(self.now);
                    self.schedule(when, Event::Confirm { node: at, r });
                }
                Action::MatchMade {
                    matching_id,
                    total_fee,
                    ..
                } => {
                    self.pinned.insert(matching_id, (at, total_fee));
                }
                Action::OfferReceived { r, .. } => {
                    if let Some(&i) = self.by_r.get(&r) {
                        let rec = &mut self.records[i];
                        rec.offers += 1;
                        if rec.discovery_latency.is_none() {
                            rec.discovery_latency = Some(self.now - rec.start);
                        }
                    }
                }
                Action::Confirmed {
                    r,
                    matching_id,
                    total_fee,
                    min_offer_fee,
                    ..
                } => {
                    if let Some(&i) = self.by_r.get(&r) {
                        self.by_mid.insert(matching_id, i);
                        let rec = &mut self.records[i];
                        rec.total_fee = Some(total_fee);
                        rec.min_offer_fee = Some(min_offer_fee);
                        rec.matching_node = self.pinned.get(&matching_id).map(|p| p.0);
                        rec.path = vec![at];
                    }
                }
                Action::DeliveredToPayee {
                    matching_id,
                    msg,
                    audit,
                    ..
                } => self.delivered(at, matching_id, msg, audit),
                Action::PathAcked {
                    matching_id,
                    total_fee,
                    ..
                } => self.path_acked(matching_id, total_fee),
                Action::Dropped(reason) => {
                    *self.drops.entry(reason.name().to_string()).or_insert(0) += 1;
                }
            }
        }
    }

    fn delivered(
        &mut self,
        payee: NodeId,
        id: MatchingId,
        msg: SeedMessage,
        audit: Option<AuditTrail>,
    ) {
        let Some(&i) = self.by_mid.get(&id) else {
            return;
        };
        if self.records[i].outcome != Outcome::Pending {
            return;
        }
        if let Some(trail) = audit {
            let expected = intermediaries_from_span(trail.counter_span.unwrap_or(0));
            if let Err(AuditError::CountMismatch { expected, actual }) =
                verify_count(&trail, expected)
            {
                let rec = &mut self.records[i];
                rec.audit = Some(AuditOutcome::CountMismatch { expected, actual });
                rec.outcome = Outcome::AuditFailed;
                rec.completed_at = Some(self.now);
                log::debug!("payment {i}: audit count mismatch");
                return;
            }
            self.trails.insert(id, trail.tokens);
        }
        let out = self
            .nodes
            .get_mut(&payee)
            .expect("known payee")
            .acknowledge(id, msg);
        self.process(payee, out);
    }

    fn path_acked(&mut self, id: MatchingId, total_fee: Msat) {
        let Some(&i) = self.by_mid.get(&id) else {
            return;
        };
        if self.records[i].outcome != Outcome::Pending {
            return;
        }
        let path = self.records[i].path.clone();
        let inner = if path.len() >= 2 {
            &path[1..path.len() - 1]
        } else {
            &[][..]
        };

        if let Some(tokens) = self.trails.remove(&id) {
            let mut rest: &[u64] = &tokens;
            let mut outcome = AuditOutcome::Passed;
            for n in inner {
                match self
                    .nodes
                    .get_mut(n)
                    .expect("path node")
                    .replay_audit(id, rest)
                {
                    Ok(r) => rest = r,
                    Err(_) => {
                        outcome = AuditOutcome::CheatDetected { node: *n };
                        break;
                    }
                }
            }
            if outcome == AuditOutcome::Passed && !rest.is_empty() {
                outcome = AuditOutcome::TrailNotConsumed { left: rest.len() };
            }
            let rec = &mut self.records[i];
            rec.audit = Some(outcome);
            if outcome.detected() {
                rec.outcome = Outcome::AuditFailed;
                rec.completed_at = Some(self.now);
                log::debug!("payment {i}: audit replay failed: {outcome:?}");
                return;
            }
        }

        let honest = self.adversaries.is_empty();
        if let Some(&(_, pinned)) = self.pinned.get(&id) {
            if pinned != total_fee {
                self.violations.push(format!(
                    "payment {i}: settled fee {total_fee} differs from fee {pinned} pinned at matching"
                ));
            }
        }
        let hop_fees: Vec<Msat> = inner.iter().map(|n| self.fees[n]).collect();
        let truth: Msat = hop_fees.iter().sum();
        let rec = &mut self.records[i];
        rec.ground_truth_fee = Some(truth);
        if honest && truth != total_fee {
            self.violations.push(format!(
                "payment {i}: total fee {total_fee} but path intermediaries charge {truth}"
            ));
        }
        if total_fee > rec.max_fee {
            self.violations.push(format!(
                "payment {i}: total fee {total_fee} exceeds ceiling {}",
                rec.max_fee
            ));
        }
        if path.len() >= 2 {
            rec.path_hops = Some(path.len() - 1);
            rec.stretch = rec
                .oracle_hops
                .filter(|&h| h > 0)
                .map(|h| (path.len() - 1) as f64 / h as f64);
        }
        rec.completed_at = Some(self.now);
        let amount = rec.amount;
        match self.graph.settle_path(&path, amount, &hop_fees) {
            Ok(_) => {
                self.records[i].outcome = Outcome::Success;
                self.records[i].success = true;
                for w in path.windows(2) {
                    let ch = *self.graph.get(w[0], w[1]).expect("settled channel");
                    for (me, other) in [(w[0], w[1]), (w[1], w[0])] {
                        if let Some(node) = self.nodes.get_mut(&me) {
                            node.update_channel(other, ch);
                        }
                    }
                }
            }
            Err(e) => {
                log::debug!("payment {i}: settlement failed: {e}");
                self.records[i].outcome = Outcome::SettlementFailed;
            }
        }
    }

    fn sweep(&mut self) {
        let now = self.now;
        let mut oldest = 0;
        let mut all_empty = true;
        let mut idle = true;
        for node in self.nodes.values_mut() {
            node.ttl_sweep(now);
            oldest = oldest.max(node.oldest_entry_age(now).unwrap_or(0));
            all_empty &= node.mempool_len() == 0;
            idle &= node.is_idle();
        }
        self.max_age_after_sweep = self.max_age_after_sweep.max(oldest);
        if all_empty {
            self.empty_since.get_or_insert(now);
        } else {
            self.empty_since = None;
        }
        if !self.queue.is_empty() || !idle {
            self.schedule(now.saturating_add(self.sweep_interval), Event::Sweep);
        }
    }
}

/// Runs a scenario to completion.
pub fn run(scenario: &Scenario, options: RunOptions) -> Result<RunOutput, ScenarioError> {
    let mut sim = Simulation::new(scenario, options)?;
    sim.run();
    Ok(sim.into_output())
}

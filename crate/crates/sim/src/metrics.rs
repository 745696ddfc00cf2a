//! Per-payment records and run summaries.

use antroute::{Msat, NodeId, SimTime};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pending,
    Success,
    Timeout,
    AuditFailed,
    SettlementFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditOutcome {
    Passed,
    CountMismatch { expected: usize, actual: usize },
    CheatDetected { node: NodeId },
    TrailNotConsumed { left: usize },
}

impl AuditOutcome {
    pub fn detected(&self) -> bool {
        !matches!(self, AuditOutcome::Passed)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageCounts {
    pub pheromone: u64,
    pub matched: u64,
    pub confirmed: u64,
    pub ack: u64,
}

impl MessageCounts {
    pub fn total(&self) -> u64 {
        self.pheromone + self.matched + self.confirmed + self.ack
    }

    pub fn add(&mut self, other: &MessageCounts) {
        self.pheromone += other.pheromone;
        self.matched += other.matched;
        self.confirmed += other.confirmed;
        self.ack += other.ack;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaymentRecord {
    pub index: usize,
    pub phase: String,
    pub start: SimTime,
    pub payer: NodeId,
    pub payee: NodeId,
    pub amount: Msat,
    pub max_fee: Msat,
    pub outcome: Outcome,
    pub success: bool,
    pub offers: usize,
    /// Time from start until the payer's first offer.
    pub discovery_latency: Option<SimTime>,
    pub completed_at: Option<SimTime>,
    pub matching_node: Option<NodeId>,
    /// Nodes the confirmed seed visited, payer first.
    pub path: Vec<NodeId>,
    pub path_hops: Option<usize>,
    pub total_fee: Option<Msat>,
    pub min_offer_fee: Option<Msat>,
    /// Sum of the configured fees of the path's intermediaries.
    pub ground_truth_fee: Option<Msat>,
    pub oracle_hops: Option<usize>,
    pub oracle_min_fee: Option<Msat>,
    pub stretch: Option<f64>,
    /// Every path channel could carry the amount when the path was locked.
    pub volume_ok: Option<bool>,
    pub audit: Option<AuditOutcome>,
    pub messages: MessageCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    pub p50: SimTime,
    pub p90: SimTime,
    pub p99: SimTime,
    pub max: SimTime,
}

impl LatencyStats {
    pub fn from_samples(mut xs: Vec<SimTime>) -> Option<LatencyStats> {
        if xs.is_empty() {
            return None;
        }
        xs.sort_unstable();
        let rank = |q: f64| {
            let i = (q * xs.len() as f64).ceil() as usize;
            xs[i.clamp(1, xs.len()) - 1]
        };
        Some(LatencyStats {
            mean: xs.iter().map(|&x| x as f64).sum::<f64>() / xs.len() as f64,
            p50: rank(0.5),
            p90: rank(0.9),
            p99: rank(0.99),
            max: *xs.last().unwrap(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub payments: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub messages: u64,
    pub messages_per_payment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub payments: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub discovered: usize,
    pub discovery_rate: f64,
    pub discovery_latency: Option<LatencyStats>,
    pub messages: MessageCounts,
    pub messages_total: u64,
    pub messages_per_payment: f64,
    pub peak_mempool: BTreeMap<NodeId, usize>,
    pub peak_mempool_max: usize,
    pub drops: BTreeMap<String, u64>,
    pub fee_anomalies: u64,
    pub route_lock_failures: u64,
    pub cheats_detected: usize,
    pub stretch_mean: Option<f64>,
    pub stretch_max: Option<f64>,
    /// Oldest routing entry seen right after any sweep.
    pub max_entry_age_after_sweep: SimTime,
    pub last_traffic_at: Option<SimTime>,
    /// First sweep from which every mempool stayed empty.
    pub mempools_empty_at: Option<SimTime>,
    pub end_time: SimTime,
    pub phases: BTreeMap<String, PhaseSummary>,
    pub invariant_violations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub seed: u64,
    pub nodes: usize,
    pub channels: usize,
    pub summary: Summary,
    pub payments: Vec<PaymentRecord>,
}

fn rate(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub(crate) fn phase_summary<'a>(records: impl Iterator<Item = &'a PaymentRecord>) -> PhaseSummary {
    let (mut payments, mut successes, mut messages) = (0, 0, 0);
    for r in records {
        payments += 1;
        successes += r.success as usize;
        messages += r.messages.total();
    }
    PhaseSummary {
        payments,
        successes,
        success_rate: rate(successes, payments),
        messages,
        messages_per_payment: if payments == 0 {
            0.0
        } else {
            messages as f64 / payments as f64
        },
    }
}

pub(crate) struct RunTotals {
    pub peak_mempool: BTreeMap<NodeId, usize>,
    pub drops: BTreeMap<String, u64>,
    pub max_entry_age_after_sweep: SimTime,
    pub last_traffic_at: Option<SimTime>,
    pub mempools_empty_at: Option<SimTime>,
    pub end_time: SimTime,
    pub invariant_violations: Vec<String>,
}

pub(crate) fn summarize(records: &[PaymentRecord], totals: RunTotals) -> Summary {
    let payments = records.len();
    let successes = records.iter().filter(|r| r.success).count();
    let discovered = records.iter().filter(|r| r.offers > 0).count();
    let mut messages = MessageCounts::default();
    for r in records {
        messages.add(&r.messages);
    }
    let stretches: Vec<f64> = records.iter().filter_map(|r| r.stretch).collect();
    let mut phases: BTreeMap<String, PhaseSummary> = BTreeMap::new();
    let names: std::collections::BTreeSet<&str> =
        records.iter().map(|r| r.phase.as_str()).collect();
    for name in names {
        phases.insert(
            name.to_string(),
            phase_summary(records.iter().filter(|r| r.phase == name)),
        );
    }
    Summary {
        payments,
        successes,
        success_rate: rate(successes, payments),
        discovered,
        discovery_rate: rate(discovered, payments),
        discovery_latency: LatencyStats::from_samples(
            records.iter().filter_map(|r| r.discovery_latency).collect(),
        ),
        messages,
        messages_total: messages.total(),
        messages_per_payment: if payments == 0 {
            0.0
        } else {
            messages.total() as f64 / payments as f64
        },
        peak_mempool_max: totals.peak_mempool.values().copied().max().unwrap_or(0),
        peak_mempool: totals.peak_mempool,
        fee_anomalies: totals.drops.get("fee_anomaly").copied().unwrap_or(0),
        route_lock_failures: totals.drops.get("route_lock").copied().unwrap_or(0),
        drops: totals.drops,
        cheats_detected: records
            .iter()
            .filter(|r| r.audit.is_some_and(|a| a.detected()))
            .count(),
        stretch_mean: (!stretches.is_empty())
            .then(|| stretches.iter().sum::<f64>() / stretches.len() as f64),
        stretch_max: stretches.iter().copied().reduce(f64::max),
        max_entry_age_after_sweep: totals.max_entry_age_after_sweep,
        last_traffic_at: totals.last_traffic_at,
        mempools_empty_at: totals.mempools_empty_at,
        end_time: totals.end_time,
        phases,
        invariant_violations: totals.invariant_violations,
    }
}

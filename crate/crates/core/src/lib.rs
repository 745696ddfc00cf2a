//! Ant-inspired decentralized route discovery for payment-channel networks.
//!
//! Payer and payee each flood a "pheromone seed" derived from a shared secret.
//! Wherever the two floods meet, the meeting node mints a matching id and sends
//! a matched seed back along the payer's trail. The payer picks one offer and
//! locks the route hop by hop with a confirmed seed. No node ever learns who the
//! endpoints are, and every node runs the same state machine.
//!
//! Module map:
//!
//! * [`seed`]: seed messages, their transformations and the canonical wire codec.
//! * [`channel`]: payment channels, neighbor statistics, broadcast policies and
//!   atomic path settlement.
//! * [`node`]: the per-node protocol state machine.
//! * [`audit`]: the token round that catches nodes under-reporting the counter.

pub mod audit;
pub mod channel;
pub mod node;
pub mod seed;

use serde::{Deserialize, Serialize};
use std::fmt;

/// Amounts and fees, in milli-satoshi.
pub type Msat = u64;

/// Virtual time in microseconds.
pub type SimTime = u64;

/// Identifier of a node in the payment-channel network.
///
/// Node ids live in node-local tables only. They never appear on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for NodeId {
    fn from(v: u32) -> Self {
        NodeId(v)
    }
}

pub use audit::{AuditError, AuditTrail};
pub use channel::{
    BroadcastPolicy, Channel, ChannelError, ChannelGraph, ChannelMode, NeighborRecord,
    NeighborStats, RelayEvent, ScoreWeights, SettleError,
};
pub use node::{Action, ConfigError, NodeConfig, NodeState, Role};
pub use seed::{DecodeError, DerivedSeed, Direction, MatchingId, SeedError, SeedKind, SeedMessage};

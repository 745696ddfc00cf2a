//! Seed messages and their canonical byte framing.
//!
//! A seed is identified by its derived seed `R = SHA-256(rA ‖ rB)` plus a
//! direction bit. Kinds nest by prefix: a matched seed is a pheromone seed with
//! one more prefix bit, a confirmed seed has one more again. On the wire the
//! prefix bits are folded into a single tag byte:
//!
//! | tag  | kind      | direction |
//! |------|-----------|-----------|
//! | 0x00 | Pheromone | A         |
//! | 0x01 | Pheromone | B         |
//! | 0x02 | Matched   | A         |
//! | 0x03 | Matched   | B         |
//! | 0x04 | Confirmed | A         |
//! | 0x05 | Confirmed | B         |
//!
//! followed by `r` (32 bytes), `counter` (u32), `amount`, `max_fee`,
//! `current_fee` (u64 each, all big-endian) and, for matched and confirmed
//! seeds only, the 8-byte matching id.

use crate::Msat;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use thiserror::Error;

/// Length of the derived seed in bytes.
pub const DERIVED_SEED_LEN: usize = 32;

/// Frame length of a pheromone seed.
pub const PHEROMONE_FRAME_LEN: usize = 1 + DERIVED_SEED_LEN + 4 + 8 + 8 + 8;

/// Frame length of a matched or confirmed seed.
pub const ROUTED_FRAME_LEN: usize = PHEROMONE_FRAME_LEN + 8;

/// The shared hash `R`, i.e. a seed with its prefix bits stripped.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DerivedSeed(pub [u8; DERIVED_SEED_LEN]);

impl DerivedSeed {
    /// Hashes the two 128-bit endpoint secrets, payer's first.
    pub fn from_secrets(r_a: &[u8; 16], r_b: &[u8; 16]) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(r_a);
        hasher.update(r_b);
        let digest = hasher.finalize();
        let mut out = [0u8; DERIVED_SEED_LEN];
        out.copy_from_slice(&digest);
        DerivedSeed(out)
    }

    pub fn as_bytes(&self) -> &[u8; DERIVED_SEED_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl Serialize for DerivedSeed {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl fmt::Debug for DerivedSeed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DerivedSeed({}..)", &self.to_hex()[..12])
    }
}

/// Which endpoint a seed was launched by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Payer side, prefix bit 0.
    A,
    /// Payee side, prefix bit 1.
    B,
}

impl Direction {
    pub fn conjugate(self) -> Self {
        match self {
            Direction::A => Direction::B,
            Direction::B => Direction::A,
        }
    }

    pub fn prefix_bit(self) -> u8 {
        match self {
            Direction::A => 0,
            Direction::B => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SeedKind {
    Pheromone,
    Matched,
    Confirmed,
}

impl SeedKind {
    /// Number of logical prefix bits in front of the derived seed.
    pub fn prefix_bits(self) -> usize {
        match self {
            SeedKind::Pheromone => 1,
            SeedKind::Matched => 2,
            SeedKind::Confirmed => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SeedKind::Pheromone => "pheromone",
            SeedKind::Matched => "matched",
            SeedKind::Confirmed => "confirmed",
        }
    }
}

/// Random identifier minted by a matching node to lock one route.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MatchingId(pub u64);

/// The protocol's only message type.
///
/// There is deliberately no field that could carry a node identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedMessage {
    pub kind: SeedKind,
    pub direction: Direction,
    pub r: DerivedSeed,
    pub counter: u32,
    pub amount: Msat,
    pub max_fee: Msat,
    pub current_fee: Msat,
    /// Present exactly when `kind` is not [`SeedKind::Pheromone`].
    pub matching_id: Option<MatchingId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SeedError {
    #[error("expected a pheromone seed, got {0:?}")]
    NotPheromone(SeedKind),
    #[error("expected a matched seed, got {0:?}")]
    NotMatched(SeedKind),
    #[error("total fee {total} exceeds maximum fee {max}")]
    FeeExceedsMax { total: Msat, max: Msat },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("frame truncated: need {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("unknown tag byte {0:#04x}")]
    UnknownTag(u8),
    #[error("matched or confirmed frame without a matching id")]
    MissingMatchingId,
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
}

/// Builds the payer's and payee's pheromone seeds from the two endpoint secrets.
///
/// Counters start at 0; the originating node applies its own counter policy
/// before sending.
pub fn make_pheromone_pair(
    r_a: &[u8; 16],
    r_b: &[u8; 16],
    amount: Msat,
    max_fee: Msat,
) -> (SeedMessage, SeedMessage) {
    let r = DerivedSeed::from_secrets(r_a, r_b);
    let seed = |direction| SeedMessage {
        kind: SeedKind::Pheromone,
        direction,
        r,
        counter: 0,
        amount,
        max_fee,
        current_fee: 0,
        matching_id: None,
    };
    (seed(Direction::A), seed(Direction::B))
}

impl SeedMessage {
    /// The same derived seed with the opposite direction bit.
    pub fn conjugate(&self) -> Result<SeedMessage, SeedError> {
        if self.kind != SeedKind::Pheromone {
            return Err(SeedError::NotPheromone(self.kind));
        }
        Ok(SeedMessage {
            direction: self.direction.conjugate(),
            ..*self
        })
    }

    /// Turns a pheromone seed into a matched seed carrying the route's total fee.
    pub fn promote_to_matched(
        &self,
        id: MatchingId,
        total_fee: Msat,
    ) -> Result<SeedMessage, SeedError> {
        if self.kind != SeedKind::Pheromone {
            return Err(SeedError::NotPheromone(self.kind));
        }
        if total_fee > self.max_fee {
            return Err(SeedError::FeeExceedsMax {
                total: total_fee,
                max: self.max_fee,
            });
        }
        Ok(SeedMessage {
            kind: SeedKind::Matched,
            current_fee: total_fee,
            matching_id: Some(id),
            ..*self
        })
    }

    pub fn promote_to_confirmed(&self) -> Result<SeedMessage, SeedError> {
        if self.kind != SeedKind::Matched {
            return Err(SeedError::NotMatched(self.kind));
        }
        Ok(SeedMessage {
            kind: SeedKind::Confirmed,
            ..*self
        })
    }

    /// Logical seed length in bits: prefix bits plus the 256-bit derived seed.
    pub fn logical_bit_len(&self) -> usize {
        self.kind.prefix_bits() + DERIVED_SEED_LEN * 8
    }

    pub fn tag(&self) -> u8 {
        let kind = match self.kind {
            SeedKind::Pheromone => 0,
            SeedKind::Matched => 2,
            SeedKind::Confirmed => 4,
        };
        kind | self.direction.prefix_bit()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(ROUTED_FRAME_LEN);
        out.push(self.tag());
        out.extend_from_slice(&self.r.0);
        out.extend_from_slice(&self.counter.to_be_bytes());
        out.extend_from_slice(&self.amount.to_be_bytes());
        out.extend_from_slice(&self.max_fee.to_be_bytes());
        out.extend_from_slice(&self.current_fee.to_be_bytes());
        if let Some(id) = self.matching_id {
            out.extend_from_slice(&id.0.to_be_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<SeedMessage, DecodeError> {
        let Some(&tag) = bytes.first() else {
            return Err(DecodeError::Truncated {
                expected: PHEROMONE_FRAME_LEN,
                actual: 0,
            });
        };
        let (kind, direction) = match tag {
            0x00 => (SeedKind::Pheromone, Direction::A),
            0x01 => (SeedKind::Pheromone, Direction::B),
            0x02 => (SeedKind::Matched, Direction::A),
            0x03 => (SeedKind::Matched, Direction::B),
            0x04 => (SeedKind::Confirmed, Direction::A),
            0x05 => (SeedKind::Confirmed, Direction::B),
            other => return Err(DecodeError::UnknownTag(other)),
        };
        if bytes.len() < PHEROMONE_FRAME_LEN {
            return Err(DecodeError::Truncated {
                expected: PHEROMONE_FRAME_LEN,
                actual: bytes.len(),
            });
        }
        let expected = if kind == SeedKind::Pheromone {
            PHEROMONE_FRAME_LEN
        } else {
            if bytes.len() == PHEROMONE_FRAME_LEN {
                return Err(DecodeError::MissingMatchingId);
            }
            ROUTED_FRAME_LEN
        };
        if bytes.len() < expected {
            return Err(DecodeError::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(DecodeError::TrailingBytes(bytes.len() - expected));
        }

        let mut r = [0u8; DERIVED_SEED_LEN];
        r.copy_from_slice(&bytes[1..33]);
        let u64_at = |at: usize| u64::from_be_bytes(bytes[at..at + 8].try_into().unwrap());
        let counter = u32::from_be_bytes(bytes[33..37].try_into().unwrap());
        let matching_id = (kind != SeedKind::Pheromone).then(|| MatchingId(u64_at(61)));
        Ok(SeedMessage {
            kind,
            direction,
            r: DerivedSeed(r),
            counter,
            amount: u64_at(37),
            max_fee: u64_at(45),
            current_fee: u64_at(53),
            matching_id,
        })
    }
}

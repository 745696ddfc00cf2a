//! Final-round check against nodes that under-report the hop counter.
//!
//! While the confirmed seed travels from payer to payee, every intermediary
//! appends a random token and keeps a copy. The payee compares the number of
//! tokens with the hop count implied by the counter. The payer then replays
//! the trail down the path: each intermediary expects its own token at the
//! head, removes it and passes the rest on. A node that deleted tokens to hide
//! a lowered counter is exposed by the first honest node whose token is gone.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditTrail {
    /// Total counter of the matched route, filled in by the matching node.
    pub counter_span: Option<u32>,
    pub tokens: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuditError {
    #[error("trail holds {actual} tokens, counter implies {expected}")]
    CountMismatch { expected: usize, actual: usize },
    #[error("token missing or out of place")]
    CheatDetected,
}

impl AuditTrail {
    pub fn new() -> Self {
        AuditTrail::default()
    }

    /// Appends a fresh token and returns it for the caller to retain.
    pub fn append_token<R: Rng + ?Sized>(&mut self, rng: &mut R) -> u64 {
        let token = rng.gen();
        self.tokens.push(token);
        token
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Intermediaries implied by a route's total counter, without concealment.
pub fn intermediaries_from_span(span: u32) -> usize {
    span.saturating_sub(1) as usize
}

/// Payee-side check.
pub fn verify_count(trail: &AuditTrail, expected: usize) -> Result<(), AuditError> {
    if trail.tokens.len() == expected {
        Ok(())
    } else {
        Err(AuditError::CountMismatch {
            expected,
            actual: trail.tokens.len(),
        })
    }
}

/// One step of the payer's replay at a node that retained `my_token`.
pub fn replay_step(trail: &[u64], my_token: u64) -> Result<&[u64], AuditError> {
    match trail.split_first() {
        Some((&head, rest)) if head == my_token => Ok(rest),
        _ => Err(AuditError::CheatDetected),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn append_grows_by_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = AuditTrail::new();
        let t1 = t.append_token(&mut rng);
        assert_eq!(t.tokens, vec![t1]);
        t.append_token(&mut rng);
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn skipping_append_leaves_deficit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = AuditTrail::new();
        t.append_token(&mut rng);
        // second node cheats and appends nothing
        t.append_token(&mut rng);
        assert_eq!(
            verify_count(&t, 3),
            Err(AuditError::CountMismatch {
                expected: 3,
                actual: 2
            })
        );
    }

    #[test]
    fn count_checks() {
        let t = AuditTrail {
            counter_span: None,
            tokens: vec![1, 2, 3],
        };
        assert_eq!(verify_count(&t, 3), Ok(()));
        let t = AuditTrail {
            counter_span: None,
            tokens: vec![1, 2],
        };
        assert_eq!(
            verify_count(&t, 3),
            Err(AuditError::CountMismatch {
                expected: 3,
                actual: 2
            })
        );
        assert_eq!(verify_count(&AuditTrail::new(), 0), Ok(()));
        assert_eq!(intermediaries_from_span(1), 0);
        assert_eq!(intermediaries_from_span(4), 3);
    }

    #[test]
    fn replay_consumes_head() {
        assert_eq!(replay_step(&[1, 2, 3], 1), Ok(&[2u64, 3][..]));
        assert_eq!(replay_step(&[2, 3], 1), Err(AuditError::CheatDetected));
        assert_eq!(replay_step(&[], 1), Err(AuditError::CheatDetected));
    }

    fn replay_all(trail: &[u64], holders: &[Option<u64>]) -> Result<usize, AuditError> {
        let mut rest = trail;
        for token in holders.iter().flatten() {
            rest = replay_step(rest, *token)?;
        }
        Ok(rest.len())
    }

    #[test]
    fn honest_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut trail = AuditTrail::new();
        let held: Vec<Option<u64>> = (0..4).map(|_| Some(trail.append_token(&mut rng))).collect();
        assert_eq!(verify_count(&trail, 4), Ok(()));
        assert_eq!(replay_all(&trail.tokens, &held), Ok(0));
    }

    #[test]
    fn deleting_upstream_token_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut trail = AuditTrail::new();
        let t1 = trail.append_token(&mut rng);
        let t2 = trail.append_token(&mut rng);
        // third node under-reported by one and removes t2 to balance the count
        trail.tokens.retain(|&t| t != t2);
        let t3 = trail.append_token(&mut rng);
        let held = [Some(t1), Some(t2), Some(t3)];
        assert_eq!(verify_count(&trail, 2), Ok(()));
        assert_eq!(
            replay_all(&trail.tokens, &held),
            Err(AuditError::CheatDetected)
        );
    }

    #[test]
    fn transparent_cheater_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut trail = AuditTrail::new();
        let t1 = trail.append_token(&mut rng);
        // the cheater neither increments nor appends
        let t3 = trail.append_token(&mut rng);
        let held = [Some(t1), None, Some(t3)];
        assert_eq!(verify_count(&trail, 2), Ok(()));
        assert_eq!(replay_all(&trail.tokens, &held), Ok(0));
    }

    proptest::proptest! {
        /// One intermediary under-reports by `k` and deletes `k` tokens,
        /// nearest upstream first and its own last.
        #[test]
        fn lone_cheater_never_passes(
            hops in 1usize..12,
            at in 0usize..12,
            k in 1usize..4,
            seed in proptest::prelude::any::<u64>(),
        ) {
            let at = at % hops;
            // A first-hop cheater can only remove its own token; with k = 1, or
            // a count already at zero, that is the transparent case.
            proptest::prop_assume!(!(at == 0 && (k == 1 || hops == 1)));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut trail = AuditTrail::new();
            let mut held = Vec::new();
            for i in 0..hops {
                let token = trail.append_token(&mut rng);
                if i != at {
                    held.push(Some(token));
                    continue;
                }
                trail.tokens.pop();
                let upstream = k.min(trail.tokens.len());
                trail.tokens.truncate(trail.tokens.len() - upstream);
                if upstream == k {
                    trail.tokens.push(token);
                    held.push(Some(token));
                } else {
                    held.push(None);
                }
            }
            let expected = hops.saturating_sub(k);
            let caught = verify_count(&trail, expected).is_err()
                || replay_all(&trail.tokens, &held) != Ok(0);
            proptest::prop_assert!(caught);
        }

        #[test]
        fn honest_trails_always_pass(hops in 0usize..20, seed in proptest::prelude::any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut trail = AuditTrail::new();
            let held: Vec<Option<u64>> = (0..hops).map(|_| Some(trail.append_token(&mut rng))).collect();
            proptest::prop_assert_eq!(verify_count(&trail, hops), Ok(()));
            proptest::prop_assert_eq!(replay_all(&trail.tokens, &held), Ok(0));
        }
    }
}

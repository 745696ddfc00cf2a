//! Misbehaving nodes.
//!
//! An adversary runs the ordinary node state machine and tampers only with
//! what crosses its boundary: messages it receives and messages it sends.

use antroute::node::MatchRole;
use antroute::{AuditTrail, MatchingId, Msat, NodeState, SeedKind, SeedMessage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AdversaryKind {
    /// Relays pheromone seeds with the counter lowered by `delta` and removes
    /// `delta` audit tokens to cover it up.
    CounterCheat { delta: u32 },
    /// Raises the fee on matched seeds it relays toward the payer.
    FeeInflate { delta: Msat },
    /// Discards each inbound message with probability `p`.
    Dropper { p: f64 },
    /// Skips its counter increment and its audit token.
    TransparentCheat,
}

impl AdversaryKind {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            AdversaryKind::CounterCheat { delta: 0 } => {
                Err("counter_cheat needs delta >= 1".into())
            }
            AdversaryKind::FeeInflate { delta: 0 } => Err("fee_inflate needs delta >= 1".into()),
            AdversaryKind::Dropper { p } if !(0.0..=1.0).contains(&p) => {
                Err("dropper needs p in [0, 1]".into())
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AdversaryKind::CounterCheat { .. } => "counter_cheat",
            AdversaryKind::FeeInflate { .. } => "fee_inflate",
            AdversaryKind::Dropper { .. } => "dropper",
            AdversaryKind::TransparentCheat => "transparent_cheat",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adversary {
    pub kind: AdversaryKind,
    rng: ChaCha8Rng,
    inflated: BTreeSet<MatchingId>,
}

impl Adversary {
    pub fn new(kind: AdversaryKind, seed: u64) -> Self {
        Adversary {
            kind,
            rng: ChaCha8Rng::seed_from_u64(seed),
            inflated: BTreeSet::new(),
        }
    }

    /// Whether the next inbound message is silently discarded.
    pub fn drops_inbound(&mut self) -> bool {
        match self.kind {
            AdversaryKind::Dropper { p } => self.rng.gen_bool(p),
            _ => false,
        }
    }

    /// Rewrites an inbound message before the node sees it.
    pub fn on_inbound(&mut self, msg: &mut SeedMessage) {
        if let AdversaryKind::FeeInflate { delta } = self.kind {
            // Present the fee the node originally pinned.
            if msg.kind == SeedKind::Confirmed
                && msg
                    .matching_id
                    .is_some_and(|id| self.inflated.contains(&id))
            {
                msg.current_fee = msg.current_fee.saturating_sub(delta);
            }
        }
    }

    /// Rewrites an outbound message after the node produced it.
    pub fn on_outbound(
        &mut self,
        node: &mut NodeState,
        msg: &mut SeedMessage,
        audit: &mut Option<AuditTrail>,
    ) {
        match (self.kind, msg.kind) {
            (AdversaryKind::CounterCheat { delta }, SeedKind::Pheromone) => {
                msg.counter = msg.counter.saturating_sub(delta);
            }
            (AdversaryKind::TransparentCheat, SeedKind::Pheromone) => {
                msg.counter = msg.counter.saturating_sub(1);
            }
            (AdversaryKind::FeeInflate { delta }, SeedKind::Matched) => {
                let Some(id) = msg.matching_id else {
                    return;
                };
                if node
                    .match_record(id)
                    .is_some_and(|r| r.role == MatchRole::Matching)
                {
                    return;
                }
                self.inflated.insert(id);
                msg.current_fee = msg.current_fee.saturating_add(delta);
            }
            (AdversaryKind::FeeInflate { delta }, SeedKind::Confirmed) => {
                if msg
                    .matching_id
                    .is_some_and(|id| self.inflated.contains(&id))
                {
                    msg.current_fee = msg.current_fee.saturating_add(delta);
                }
            }
            (AdversaryKind::CounterCheat { delta }, SeedKind::Confirmed) => {
                hide_tokens(node, msg, audit, delta as usize, false);
            }
            (AdversaryKind::TransparentCheat, SeedKind::Confirmed) => {
                hide_tokens(node, msg, audit, 1, true);
            }
            _ => {}
        }
    }
}

/// Removes `k` tokens, nearest upstream first and our own last, and lowers
/// the span if this node set it. A transparent cheater removes only its own.
fn hide_tokens(
    node: &mut NodeState,
    msg: &SeedMessage,
    audit: &mut Option<AuditTrail>,
    k: usize,
    transparent: bool,
) {
    let (Some(trail), Some(id)) = (audit.as_mut(), msg.matching_id) else {
        return;
    };
    if node
        .match_record(id)
        .is_some_and(|r| r.role == MatchRole::Matching)
    {
        if let Some(span) = trail.counter_span.as_mut() {
            *span = span.saturating_sub(k as u32);
        }
    }
    let Some(own) = trail.tokens.pop() else {
        return;
    };
    let upstream = if transparent {
        0
    } else {
        k.min(trail.tokens.len())
    };
    trail.tokens.truncate(trail.tokens.len() - upstream);
    if upstream == k {
        trail.tokens.push(own);
    } else {
        node.discard_audit_token(id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use antroute::{NodeConfig, NodeId};

    fn idle_node() -> NodeState {
        NodeState::new(NodeId(0), [], NodeConfig::default(), 0).unwrap()
    }

    fn confirmed() -> SeedMessage {
        let (a, _) = antroute::seed::make_pheromone_pair(&[1; 16], &[2; 16], 10, 10);
        a.promote_to_matched(MatchingId(5), 3)
            .unwrap()
            .promote_to_confirmed()
            .unwrap()
    }

    #[test]
    fn counter_cheat_removes_upstream_then_own() {
        let mut adv = Adversary::new(AdversaryKind::CounterCheat { delta: 2 }, 0);
        let mut node = idle_node();
        let mut msg = confirmed();
        let mut audit = Some(AuditTrail {
            counter_span: None,
            tokens: vec![1, 2, 3, 99],
        });
        adv.on_outbound(&mut node, &mut msg, &mut audit);
        assert_eq!(audit.unwrap().tokens, vec![1, 99]);

        let mut audit = Some(AuditTrail {
            counter_span: None,
            tokens: vec![99],
        });
        adv.on_outbound(&mut node, &mut msg, &mut audit);
        assert!(audit.unwrap().tokens.is_empty());
    }

    #[test]
    fn transparent_cheat_drops_only_its_own() {
        let mut adv = Adversary::new(AdversaryKind::TransparentCheat, 0);
        let mut node = idle_node();
        let mut msg = confirmed();
        let mut audit = Some(AuditTrail {
            counter_span: None,
            tokens: vec![1, 2, 99],
        });
        adv.on_outbound(&mut node, &mut msg, &mut audit);
        assert_eq!(audit.unwrap().tokens, vec![1, 2]);
    }

    #[test]
    fn fee_inflate_round_trip() {
        let mut adv = Adversary::new(AdversaryKind::FeeInflate { delta: 4 }, 0);
        let mut node = idle_node();
        let mut m = confirmed();
        m.kind = SeedKind::Matched;
        adv.on_outbound(&mut node, &mut m, &mut None);
        assert_eq!(m.current_fee, 7);
        let mut c = SeedMessage {
            kind: SeedKind::Confirmed,
            ..m
        };
        adv.on_inbound(&mut c);
        assert_eq!(c.current_fee, 3);
        adv.on_outbound(&mut node, &mut c, &mut None);
        assert_eq!(c.current_fee, 7);
    }

    #[test]
    fn dropper_extremes() {
        let mut always = Adversary::new(AdversaryKind::Dropper { p: 1.0 }, 0);
        let mut never = Adversary::new(AdversaryKind::Dropper { p: 0.0 }, 0);
        assert!((0..100).all(|_| always.drops_inbound()));
        assert!((0..100).all(|_| !never.drops_inbound()));
    }

    #[test]
    fn parameters_checked() {
        assert!(AdversaryKind::CounterCheat { delta: 0 }.validate().is_err());
        assert!(AdversaryKind::Dropper { p: 2.0 }.validate().is_err());
        assert!(AdversaryKind::TransparentCheat.validate().is_ok());
        let k: AdversaryKind = serde_json::from_str(r#"{"counter_cheat":{"delta":2}}"#).unwrap();
        assert_eq!(k, AdversaryKind::CounterCheat { delta: 2 });
        let k: AdversaryKind = serde_json::from_str(r#""transparent_cheat""#).unwrap();
        assert_eq!(k, AdversaryKind::TransparentCheat);
    }
}

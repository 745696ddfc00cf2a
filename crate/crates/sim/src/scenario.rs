//! Scenario files and their resolution into a runnable setup.

use crate::adversary::AdversaryKind;
use crate::topology::{self, CapacityModel, Topology, TopologyError, TopologyKind, TopologySpec};
use crate::{stream_seed, Stream};
use antroute::{BroadcastPolicy, ChannelGraph, ConfigError, Msat, NodeConfig, NodeId, SimTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// One simulated millisecond.
pub const MS: SimTime = 1_000;
/// One simulated second.
pub const SECOND: SimTime = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub topology: TopologySource,
    pub workload: Workload,
    #[serde(default)]
    pub node_defaults: NodeConfig,
    /// Per-node settings merged over the defaults.
    #[serde(default)]
    pub node_overrides: BTreeMap<NodeId, serde_json::Value>,
    /// Draws each node's relay fee, replacing the default fee.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fees: Option<FeeModel>,
    #[serde(default)]
    pub adversaries: BTreeMap<NodeId, AdversaryKind>,
    #[serde(default)]
    pub latency: Latency,
    #[serde(default = "default_horizon")]
    pub horizon: SimTime,
    #[serde(default = "default_sweep_interval")]
    pub sweep_interval: SimTime,
    #[serde(default)]
    pub processing_delay: SimTime,
    /// Run the token audit on every payment.
    #[serde(default)]
    pub audit: bool,
    /// Switch every node to another broadcast policy after some payments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_switch: Option<PolicySwitch>,
}

fn default_horizon() -> SimTime {
    3_600 * SECOND
}

fn default_sweep_interval() -> SimTime {
    SECOND
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologySource {
    Generate {
        kind: TopologyKind,
        #[serde(default)]
        capacity: CapacityModel,
        #[serde(default)]
        unidirectional_fraction: f64,
        /// Defaults to a stream of the scenario seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// Path to a topology JSON file, relative to the scenario file.
    File(PathBuf),
    Inline(Topology),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Workload {
    Explicit(Vec<PaymentSpec>),
    Random(RandomWorkload),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaymentSpec {
    pub at: SimTime,
    pub payer: NodeId,
    pub payee: NodeId,
    pub amount: Msat,
    pub max_fee: Msat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomWorkload {
    pub count: usize,
    #[serde(default)]
    pub start: SimTime,
    pub arrival: Arrival,
    pub amount: AmountModel,
    pub max_fee: Msat,
    /// Candidate endpoints; every honest node when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoints: Option<Vec<NodeId>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Arrival {
    Fixed { interval: SimTime },
    Poisson { mean_interval: SimTime },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AmountModel {
    Constant { amount: Msat },
    UniformRange { lo: Msat, hi: Msat },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FeeModel {
    Constant { fee: Msat },
    UniformRange { lo: Msat, hi: Msat },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Latency {
    /// Every message takes exactly `d`.
    Uniform { d: SimTime },
    /// Per-message delay drawn from `[lo, hi]`.
    UniformRange { lo: SimTime, hi: SimTime },
}

impl Default for Latency {
    fn default() -> Self {
        Latency::Uniform { d: 10 * MS }
    }
}

impl Latency {
    pub fn draw<R: Rng>(&self, rng: &mut R) -> SimTime {
        match *self {
            Latency::Uniform { d } => d,
            Latency::UniformRange { lo, hi } => rng.gen_range(lo..=hi),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySwitch {
    /// Index of the first payment that runs under `policy`.
    pub after_payments: usize,
    pub policy: BroadcastPolicy,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid scenario: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid topology: {0}")]
    Topology(#[from] TopologyError),
    #[error("invalid node config for {node}: {source}")]
    NodeConfig { node: NodeId, source: ConfigError },
    #[error("invalid override for node {node}: {source}")]
    Override {
        node: NodeId,
        source: serde_json::Error,
    },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid(msg.into())
}

/// A scenario with every random choice made.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub topology: Topology,
    pub graph: ChannelGraph,
    pub configs: BTreeMap<NodeId, NodeConfig>,
    pub payments: Vec<PaymentSpec>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a scenario and inlines any topology file it points to.
    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = read(path)?;
        let mut scenario = Scenario::from_json(&text)?;
        if let TopologySource::File(rel) = &scenario.topology {
            let full = path.parent().unwrap_or(Path::new(".")).join(rel);
            let topo: Topology = serde_json::from_str(&read(&full)?)?;
            scenario.topology = TopologySource::Inline(topo);
        }
        Ok(scenario)
    }

    pub fn resolve(&self) -> Result<Resolved, ScenarioError> {
        let topology = match &self.topology {
            TopologySource::Generate {
                kind,
                capacity,
                unidirectional_fraction,
                seed,
            } => {
                let spec = TopologySpec {
                    kind: *kind,
                    capacity: *capacity,
                    unidirectional_fraction: *unidirectional_fraction,
                };
                let seed = seed.unwrap_or_else(|| stream_seed(self.seed, Stream::Topology, 0));
                topology::generate(&spec, seed)?
            }
            TopologySource::File(path) => {
                let topo: Topology = serde_json::from_str(&read(path)?)?;
                topo
            }
            TopologySource::Inline(t) => t.clone(),
        };
        let graph = topology.validate()?;
        let known = |n: &NodeId| topology.nodes.contains(n);

        if let Latency::UniformRange { lo, hi } = self.latency {
            if lo > hi {
                return Err(invalid("latency range has lo > hi"));
            }
        }
        if self.sweep_interval == 0 {
            return Err(invalid("sweep_interval must be positive"));
        }
        for n in self.adversaries.keys() {
            if !known(n) {
                return Err(invalid(format!("adversary {n} is not in the topology")));
            }
        }
        for (n, kind) in &self.adversaries {
            kind.validate()
                .map_err(|e| invalid(format!("adversary {n}: {e}")))?;
        }

        let mut fee_rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, Stream::Fees, 0));
        let defaults = serde_json::to_value(&self.node_defaults)?;
        let mut configs = BTreeMap::new();
        for &node in &topology.nodes {
            let mut value = defaults.clone();
            if let Some(model) = self.fees {
                value["fee"] = match model {
                    FeeModel::Constant { fee } => fee,
                    FeeModel::UniformRange { lo, hi } => fee_rng.gen_range(lo..=hi),
                }
                .into();
            }
            if let Some(patch) = self.node_overrides.get(&node) {
                let Some(fields) = patch.as_object() else {
                    return Err(invalid(format!(
                        "override for node {node} must be an object"
                    )));
                };
                for (k, v) in fields {
                    value[k] = v.clone();
                }
            }
            let mut config: NodeConfig = serde_json::from_value(value)
                .map_err(|source| ScenarioError::Override { node, source })?;
            if self.audit {
                if config.counter_start_max != 0 || config.counter_step_max != 1 {
                    return Err(invalid(format!(
                        "audit needs counter_start_max 0 and counter_step_max 1 (node {node})"
                    )));
                }
                config.audit = true;
            }
            config
                .validate()
                .map_err(|source| ScenarioError::NodeConfig { node, source })?;
            configs.insert(node, config);
        }
        for n in self.node_overrides.keys() {
            if !known(n) {
                return Err(invalid(format!("override for unknown node {n}")));
            }
        }

        let payments = match &self.workload {
            Workload::Explicit(list) => list.clone(),
            Workload::Random(w) => self.random_payments(w, &topology)?,
        };
        for p in &payments {
            if !known(&p.payer) || !known(&p.payee) {
                return Err(invalid(format!(
                    "payment {} -> {} names an unknown node",
                    p.payer, p.payee
                )));
            }
            if p.payer == p.payee {
                return Err(invalid(format!("payment from {} to itself", p.payer)));
            }
        }
        Ok(Resolved {
            topology,
            graph,
            configs,
            payments,
        })
    }

    fn random_payments(
        &self,
        w: &RandomWorkload,
        topology: &Topology,
    ) -> Result<Vec<PaymentSpec>, ScenarioError> {
        let candidates: Vec<NodeId> = match &w.endpoints {
            Some(list) => list.clone(),
            None => topology
                .nodes
                .iter()
                .copied()
                .filter(|n| !self.adversaries.contains_key(n))
                .collect(),
        };
        if candidates.len() < 2 {
            return Err(invalid("random workload needs at least two endpoints"));
        }
        if let AmountModel::UniformRange { lo, hi } = w.amount {
            if lo > hi {
                return Err(invalid("amount range has lo > hi"));
            }
        }
        let exp = match w.arrival {
            Arrival::Poisson { mean_interval } if mean_interval > 0 => {
                Some(Exp::new(1.0 / mean_interval as f64).map_err(|e| invalid(e.to_string()))?)
            }
            Arrival::Poisson { .. } => return Err(invalid("mean_interval must be positive")),
            Arrival::Fixed { .. } => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, Stream::Workload, 0));
        let mut at = w.start;
        let mut out = Vec::with_capacity(w.count);
        for i in 0..w.count {
            if i > 0 {
                at += match (w.arrival, &exp) {
                    (Arrival::Fixed { interval }, _) => interval,
                    (_, Some(exp)) => exp.sample(&mut rng).round() as SimTime,
                    _ => unreachable!(),
                };
            }
            let payer = candidates[rng.gen_range(0..candidates.len())];
            let payee = loop {
                let c = candidates[rng.gen_range(0..candidates.len())];
                if c != payer {
                    break c;
                }
            };
            let amount = match w.amount {
                AmountModel::Constant { amount } => amount,
                AmountModel::UniformRange { lo, hi } => rng.gen_range(lo..=hi),
            };
            out.push(PaymentSpec {
                at,
                payer,
                payee,
                amount,
                max_fee: w.max_fee,
            });
        }
        Ok(out)
    }
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_owned(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRIANGLE: &str = r#"{
        "seed": 1,
        "topology": {"generate": {"kind": {"line": {"n": 3}}}},
        "workload": {"explicit": [{"at": 0, "payer": 0, "payee": 2, "amount": 10, "max_fee": 5}]}
    }"#;

    #[test]
    fn minimal_scenario_parses() {
        let s = Scenario::from_json(TRIANGLE).unwrap();
        let r = s.resolve().unwrap();
        assert_eq!(r.topology.nodes.len(), 3);
        assert_eq!(r.payments.len(), 1);
        assert_eq!(s.latency, Latency::Uniform { d: 10 * MS });
    }

    #[test]
    fn unknown_key_is_named() {
        let bad = TRIANGLE.replace("\"seed\": 1", "\"seed\": 1, \"sead\": 2");
        let err = Scenario::from_json(&bad).unwrap_err().to_string();
        assert!(err.contains("sead"), "{err}");
        let bad = TRIANGLE.replace("\"n\": 3", "\"n\": 3, \"m\": 1");
        assert!(Scenario::from_json(&bad).is_err());
    }

    #[test]
    fn overrides_merge_over_defaults() {
        let mut s = Scenario::from_json(TRIANGLE).unwrap();
        s.node_defaults.fee = 4;
        s.node_overrides
            .insert(NodeId(1), serde_json::json!({"fee": 9}));
        let r = s.resolve().unwrap();
        assert_eq!(r.configs[&NodeId(0)].fee, 4);
        assert_eq!(r.configs[&NodeId(1)].fee, 9);
        s.node_overrides
            .insert(NodeId(1), serde_json::json!({"feee": 9}));
        assert!(matches!(s.resolve(), Err(ScenarioError::Override { .. })));
    }

    #[test]
    fn audit_rejects_concealed_counters() {
        let mut s = Scenario::from_json(TRIANGLE).unwrap();
        s.audit = true;
        assert!(s.resolve().unwrap().configs.values().all(|c| c.audit));
        s.node_defaults.counter_step_max = 3;
        assert!(s.resolve().is_err());
    }

    #[test]
    fn random_workload_is_reproducible() {
        let mut s = Scenario::from_json(TRIANGLE).unwrap();
        s.topology = TopologySource::Generate {
            kind: TopologyKind::Grid { rows: 4, cols: 4 },
            capacity: CapacityModel::default(),
            unidirectional_fraction: 0.0,
            seed: None,
        };
        s.workload = Workload::Random(RandomWorkload {
            count: 30,
            start: 5,
            arrival: Arrival::Poisson {
                mean_interval: SECOND,
            },
            amount: AmountModel::UniformRange { lo: 1, hi: 9 },
            max_fee: 3,
            endpoints: None,
        });
        let a = s.resolve().unwrap().payments;
        let b = s.resolve().unwrap().payments;
        assert_eq!(a, b);
        assert_eq!(a[0].at, 5);
        assert!(a.windows(2).all(|w| w[0].at <= w[1].at));
        assert!(a.iter().all(|p| p.payer != p.payee));
    }

    #[test]
    fn self_payment_rejected() {
        let bad = TRIANGLE.replace("\"payee\": 2", "\"payee\": 0");
        assert!(Scenario::from_json(&bad).unwrap().resolve().is_err());
    }
}

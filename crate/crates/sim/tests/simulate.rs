use antroute::NodeId;
use antroute_sim::metrics::Outcome;
use antroute_sim::{run, RunOptions, Scenario};
use serde_json::json;

fn scenario(v: serde_json::Value) -> Scenario {
    serde_json::from_value(v).unwrap()
}

fn triangle() -> Scenario {
    scenario(json!({
        "seed": 3,
        "topology": {"generate": {"kind": {"line": {"n": 3}}}},
        "workload": {"explicit": [{"at": 0, "payer": 0, "payee": 2, "amount": 1000, "max_fee": 0}]}
    }))
}

#[test]
fn triangle_payment_settles_through_the_middle() {
    let out = run(&triangle(), RunOptions::default()).unwrap();
    let p = &out.metrics.payments[0];
    assert_eq!(p.outcome, Outcome::Success);
    assert_eq!(p.path_hops, Some(2));
    assert_eq!(p.path, vec![NodeId(0), NodeId(1), NodeId(2)]);
    assert_eq!(p.matching_node, Some(NodeId(1)));
    assert_eq!(p.oracle_hops, Some(2));
    assert_eq!(out.metrics.summary.success_rate, 1.0);
    assert!(out.metrics.summary.invariant_violations.is_empty());
}

#[test]
fn identical_scenarios_give_identical_output() {
    let s = scenario(json!({
        "seed": 11,
        "topology": {"generate": {"kind": {"erdos_renyi": {"n": 40, "p": 0.15}}}},
        "workload": {"random": {
            "count": 15,
            "arrival": {"poisson": {"mean_interval": 200000}},
            "amount": {"uniform_range": {"lo": 1, "hi": 1000}},
            "max_fee": 50
        }},
        "fees": {"uniform_range": {"lo": 0, "hi": 5}},
        "latency": {"uniform_range": {"lo": 1000, "hi": 30000}}
    }));
    let opts = RunOptions { event_log: true };
    let a = run(&s, opts).unwrap();
    let b = run(&s, opts).unwrap();
    assert_eq!(
        serde_json::to_string(&a.metrics).unwrap(),
        serde_json::to_string(&b.metrics).unwrap()
    );
    assert_eq!(a.event_log, b.event_log);
    assert!(!a.event_log.unwrap().is_empty());
}

#[test]
fn dropper_on_cut_vertex_times_out() {
    let mut s = triangle();
    s.adversaries = serde_json::from_value(json!({"1": {"dropper": {"p": 1.0}}})).unwrap();
    let out = run(&s, RunOptions::default()).unwrap();
    let p = &out.metrics.payments[0];
    assert_eq!(p.outcome, Outcome::Timeout);
    assert_eq!(p.offers, 0);
}

#[test]
fn event_log_lines_are_well_formed() {
    let out = run(&triangle(), RunOptions { event_log: true }).unwrap();
    let log = out.event_log.unwrap();
    let kinds: Vec<String> = log
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            for key in ["t", "src", "dst", "frame_hex", "kind"] {
                assert!(v.get(key).is_some(), "{key} missing in {l}");
            }
            let frame = hex::decode(v["frame_hex"].as_str().unwrap()).unwrap();
            antroute::SeedMessage::decode(&frame).unwrap();
            v["kind"].as_str().unwrap().to_string()
        })
        .collect();
    for k in ["pheromone", "matched", "confirmed", "ack"] {
        assert!(kinds.iter().any(|x| x == k), "no {k} event");
    }
}

#[test]
fn queue_drains_and_state_expires() {
    let out = run(&triangle(), RunOptions::default()).unwrap();
    let s = &out.metrics.summary;
    let last = s.last_traffic_at.unwrap();
    let empty = s.mempools_empty_at.unwrap();
    assert!(empty > last);
    assert!(empty - last <= antroute::node::DEFAULT_TTL + 1_000_000);
}

#[test]
fn unreachable_payment_never_succeeds() {
    let s = scenario(json!({
        "seed": 1,
        "topology": {"generate": {"kind": {"line": {"n": 4}}, "capacity": {"constant": {"capacity": 100}}}},
        "workload": {"explicit": [{"at": 0, "payer": 0, "payee": 3, "amount": 101, "max_fee": 0}]}
    }));
    let out = run(&s, RunOptions::default()).unwrap();
    let p = &out.metrics.payments[0];
    assert_eq!(p.oracle_hops, None);
    assert!(!p.success);
    assert_eq!(p.offers, 0);
}

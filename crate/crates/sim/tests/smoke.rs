use bodega_core::{NodeId, NodeSet, Roster};
use bodega_lincheck::check;
use bodega_sim::scenario::{uniform_rtt_ms, ClientGroup};
use bodega_sim::{Scenario, Sim, SimOptions};

fn base(n: u8, rtt: f64) -> Scenario {
    let mut s: Scenario = serde_json::from_value(serde_json::json!({
        "config": {"n": n},
        "rtt_ms": uniform_rtt_ms(n as usize, rtt),
        "duration_ms": 5000.0,
    }))
    .unwrap();
    s.initial_roster = Some(Roster::full(NodeId(0), NodeSet::all(n)));
    s.clients = (0..n).map(|i| ClientGroup { site: NodeId(i), count: 2 }).collect();
    s.workload.start_ms = 500.0;
    s
}

#[test]
fn five_nodes_settle_and_serve() {
    let mut sim = Sim::new(base(5, 40.0), 7, SimOptions { check_stable: true, ..Default::default() });
    let t = sim.run_until_pred(2_000_000, |s| s.stable_ballots().iter().all(|(_, b)| b.is_some()));
    assert!(t.is_some(), "roster never stable");
    let r = sim.run();
    assert!(r.stable_conflicts.is_empty(), "{:?}", r.stable_conflicts);
    assert!(r.metrics.reads.len() > 100 && !r.metrics.writes.is_empty());
    assert!(check(&r.history).is_ok());
}

#[test]
fn three_nodes_local_reads() {
    let r = Sim::new(base(3, 20.0), 1, SimOptions::default()).run();
    let (n, frac) = r.metrics.local_fraction(1_000_000, |_| true);
    assert!(n > 100 && frac > 0.8, "{n} reads, {frac} local");
    assert!(check(&r.history).is_ok());
}

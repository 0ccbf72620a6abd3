//! Randomized fault schedules: crashes, partitions, isolations and roster
//! changes over a five-node cluster on drifting clocks.

use bodega_core::{ClusterConfig, KeyRange, NodeId, NodeSet, RangeAssignment, Roster};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clock::{max_drift_ppm, DriftSpec};
use crate::scenario::{Action, ClientGroup, KeyDist, Scenario, ScriptEvent, Workload};

/// Timing scaled down from the defaults so that several failovers fit in a
/// few seconds of virtual time. Ratios between the timers are preserved.
pub fn fast_config(n: u8) -> ClusterConfig {
    ClusterConfig {
        n,
        guard_us: 600_000,
        lease_us: 600_000,
        delta_us: 24_000,
        hb_send_us: 40_000,
        hb_fail_us: 300_000,
        hb_fail_jitter_us: 75_000,
        ..ClusterConfig::with_n(n)
    }
}

fn random_roster(rng: &mut ChaCha8Rng, n: u8) -> Roster {
    let leader = NodeId(rng.random_range(0..n));
    let pick = |rng: &mut ChaCha8Rng| NodeSet::from_bits(rng.random_range(0..1u64 << n));
    match rng.random_range(0..4) {
        0 => Roster::leader_only(leader),
        1 => Roster::full(leader, NodeSet::all(n)),
        2 => Roster::full(leader, pick(rng)),
        _ => {
            let mid = bodega_core::Key::from("k2");
            Roster {
                leader: Some(leader),
                ranges: vec![
                    RangeAssignment { range: KeyRange::new("", Some(mid.clone())), responders: pick(rng) },
                    RangeAssignment { range: KeyRange::new(mid, None), responders: pick(rng) },
                ],
            }
        }
    }
}

/// Five nodes, two clients per site, 10% writes over a handful of keys,
/// clocks drifting at the edges of the envelope, and a random mix of up to
/// two crashes, partitions, isolations and roster changes.
pub fn random_fault_scenario(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_fa17);
    let n = 5u8;
    let duration = 4_000.0;
    let mut rtt = vec![vec![0.0; n as usize]; n as usize];
    for i in 0..n as usize {
        for j in i + 1..n as usize {
            let v = rng.random_range(10.0..60.0f64).round();
            rtt[i][j] = v;
            rtt[j][i] = v;
        }
    }
    let mut events = Vec::new();
    let mut nodes: Vec<u8> = (0..n).collect();
    nodes.shuffle(&mut rng);
    for &node in nodes.iter().take(rng.random_range(0..=2)) {
        events.push(ScriptEvent { at_ms: rng.random_range(300.0..3_000.0f64).round(), action: Action::Crash { node: NodeId(node) } });
    }
    for _ in 0..rng.random_range(0..=3) {
        let at_ms = rng.random_range(200.0..3_200.0f64).round();
        let for_ms = rng.random_range(50.0..900.0f64).round();
        let action = if rng.random_bool(0.5) {
            let a = rng.random_range(0..n);
            let b = (a + rng.random_range(1..n)) % n;
            Action::Partition { a: NodeId(a), b: NodeId(b), for_ms }
        } else {
            Action::Isolate { node: NodeId(rng.random_range(0..n)), for_ms }
        };
        events.push(ScriptEvent { at_ms, action });
    }
    for _ in 0..rng.random_range(0..=2) {
        let at_ms = rng.random_range(200.0..3_000.0f64).round();
        let roster = random_roster(&mut rng, n);
        let node = roster.leader.unwrap();
        events.push(ScriptEvent { at_ms, action: Action::RosterSet { node, roster } });
    }
    events.sort_by(|a, b| a.at_ms.total_cmp(&b.at_ms));
    let initial = random_roster(&mut rng, n);
    let config = fast_config(n);
    let bound = max_drift_ppm(&config);
    let drift = DriftSpec::Ppm { ppm: (0..n).map(|_| if rng.random_bool(0.5) { bound } else { -bound }).collect() };
    Scenario {
        name: format!("faults-{seed}"),
        config,
        rtt_ms: rtt,
        jitter_ms: rng.random_range(0.0..10.0f64).round(),
        drop_prob: if rng.random_bool(0.3) { 0.02 } else { 0.0 },
        drift,
        client_rtt_ms: 1.0,
        clients: (0..n).map(|i| ClientGroup { site: NodeId(i), count: 2 }).collect(),
        workload: Workload {
            keys: 4,
            value_size: 8,
            write_ratio: 0.1,
            distribution: KeyDist::Uniform,
            think_ms: 20.0,
            start_ms: 100.0,
        },
        initial_roster: Some(initial),
        duration_ms: duration,
        events,
        unhold_ms: None,
    }
}

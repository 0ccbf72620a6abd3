use bodega_lincheck::check;
use bodega_sim::faults::random_fault_scenario;
use bodega_sim::{Sim, SimOptions};

// The acceptance suite covers a thousand seeds; this keeps a quick sample
// with the cross-node invariant checks switched on.
#[test]
fn fault_runs_stay_linearizable() {
    let mut bad = Vec::new();
    for seed in 1000..1100 {
        let sc = random_fault_scenario(seed);
        let r = Sim::new(sc, seed, SimOptions { check_stable: true, check_invariants: true, ..Default::default() }).run();
        assert!(r.stable_conflicts.is_empty(), "seed {seed}: {:?}", r.stable_conflicts[0]);
        assert!(r.invariant_violations.is_empty(), "seed {seed}: {:?}", r.invariant_violations);
        let v = check(&r.history);
        if !v.is_ok() {
            println!("seed {seed}: {v}");
            bad.push(seed);
        }
    }
    assert!(bad.is_empty(), "non-linearizable seeds {bad:?}");
}

//! Lease state machines of three nodes on drifting clocks, driven by random
//! renew / revoke / expire schedules over a lossy, reordering network.
//!
//! After every action the grantor-side deadline of each outstanding grant,
//! mapped to real time, must be no earlier than the grantee-side one.

use std::collections::BTreeMap;

use bodega_core::lease::LeaseState;
use bodega_core::{next_ballot, Ballot, ClusterConfig, LeaseMsg, Micros, NodeId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clock::{max_drift_ppm, ClockModel};

#[derive(Debug, Clone)]
pub struct DriftViolation {
    pub step: usize,
    pub grantor: NodeId,
    pub grantee: NodeId,
    pub grantee_expiry: Micros,
    pub grantor_expiry: Option<Micros>,
}

pub struct LeaseWorld {
    pub cfg: ClusterConfig,
    pub clocks: ClockModel,
    pub nodes: Vec<LeaseState>,
    pub now: Micros,
    /// Messages in flight: (due, seq) -> (from, to, msg).
    wire: BTreeMap<(Micros, u64), (NodeId, NodeId, LeaseMsg)>,
    seq: u64,
    rng: ChaCha8Rng,
    max_delay: Micros,
    drop_prob: f64,
}

impl LeaseWorld {
    pub fn new(seed: u64) -> Self {
        let cfg = ClusterConfig::with_n(3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = max_drift_ppm(&cfg);
        // Mostly at the edges of the envelope, sometimes inside.
        let ppm = (0..3)
            .map(|_| match rng.random_range(0..4) {
                0 => bound,
                1 => -bound,
                _ => rng.random_range(-bound..=bound),
            })
            .collect();
        let max_delay = [20_000, 300_000, 2_000_000, 6_000_000][rng.random_range(0..4)];
        let drop_prob = [0.0, 0.1, 0.4][rng.random_range(0..3)];
        let nodes = (0..3).map(|i| LeaseState::new(NodeId(i), &cfg)).collect();
        let mut w = LeaseWorld {
            cfg,
            clocks: ClockModel::new(ppm),
            nodes,
            now: rng.random_range(0..10_000_000),
            wire: BTreeMap::new(),
            seq: 0,
            rng,
            max_delay,
            drop_prob,
        };
        let b = Ballot::new(1, 0);
        for i in 0..3 {
            w.nodes[i].adopt(b);
            let local = w.local(i);
            let out = w.nodes[i].initiate(local, 0);
            w.post(NodeId(i as u8), out);
        }
        w
    }

    fn local(&self, i: usize) -> Micros {
        self.clocks.local(i, self.now)
    }

    fn post(&mut self, from: NodeId, out: Vec<(NodeId, LeaseMsg)>) {
        for (to, msg) in out {
            if to.idx() >= self.nodes.len() {
                continue;
            }
            let copies = if from != to && self.rng.random_bool(0.05) { 2 } else { 1 };
            for _ in 0..copies {
                if from != to && self.rng.random_bool(self.drop_prob) {
                    continue;
                }
                let d = if from == to { 0 } else { self.rng.random_range(0..=self.max_delay) };
                self.seq += 1;
                self.wire.insert((self.now + d, self.seq), (from, to, msg.clone()));
            }
        }
    }

    fn deliver_due(&mut self) {
        while let Some((&k, _)) = self.wire.iter().next() {
            if k.0 > self.now {
                break;
            }
            let (from, to, msg) = self.wire.remove(&k).unwrap();
            let local = self.local(to.idx());
            let out = self.nodes[to.idx()].handle(local, from, &msg);
            self.post(to, out);
        }
    }

    /// One random action after advancing time.
    pub fn act(&mut self) {
        let lease = self.cfg.lease_us;
        self.now += match self.rng.random_range(0..10) {
            0 => self.rng.random_range(0..2 * lease),
            1..=3 => self.rng.random_range(0..self.cfg.hb_send_us * 3),
            _ => self.rng.random_range(0..self.cfg.hb_send_us),
        };
        self.deliver_due();
        let i = self.rng.random_range(0..3);
        let local = self.local(i);
        match self.rng.random_range(0..20) {
            0 => {
                if !self.nodes[i].is_revoking() {
                    let out = self.nodes[i].start_revoke();
                    self.post(NodeId(i as u8), out);
                }
            }
            1..=3 => {
                self.nodes[i].expire(local);
            }
            4..=6 => {
                let out = self.nodes[i].take_renew_replies(local);
                self.post(NodeId(i as u8), out);
            }
            _ => {
                let out = self.nodes[i].tick(local, 0);
                self.post(NodeId(i as u8), out);
            }
        }
        // A node whose revocation finished moves to a newer ballot, as a
        // roster change would.
        for j in 0..3 {
            let local = self.local(j);
            if self.nodes[j].is_revoking() && self.nodes[j].revoke_done(local) {
                let b = next_ballot(self.nodes.iter().map(|n| n.ballot).max().unwrap(), NodeId(j as u8));
                self.nodes[j].adopt(b);
                let out = self.nodes[j].initiate(local, 0);
                self.post(NodeId(j as u8), out);
            }
        }
    }

    /// Every lease a grantee believes it holds is still outstanding at its
    /// grantor, with a real-time expiry no earlier than the grantee's.
    pub fn check(&self, step: usize) -> Result<(), DriftViolation> {
        for (g, grantee) in self.nodes.iter().enumerate() {
            let local_g = self.local(g);
            for (&r, &dl) in &grantee.endowed {
                if dl <= local_g || r.idx() == g {
                    continue;
                }
                let grantee_expiry = self.clocks.real_at(g, dl);
                let grantor = &self.nodes[r.idx()];
                let grantor_expiry = grantor.grant_deadline(NodeId(g as u8)).map(|d| self.clocks.real_at(r.idx(), d));
                // The outstanding entry must belong to the grantee's ballot.
                let same_ballot = grantor.ballot == grantee.ballot
                    || grantor.revoking.as_ref().is_some_and(|x| x.ballot == grantee.ballot);
                let ok = same_ballot && grantor_expiry.is_some_and(|t| t >= grantee_expiry);
                if !ok {
                    return Err(DriftViolation {
                        step,
                        grantor: r,
                        grantee: NodeId(g as u8),
                        grantee_expiry,
                        grantor_expiry,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Runs one random schedule of `steps` actions.
pub fn run_sequence(seed: u64, steps: usize) -> Result<(), DriftViolation> {
    let mut w = LeaseWorld::new(seed);
    w.check(0)?;
    for s in 1..=steps {
        w.act();
        w.check(s)?;
    }
    Ok(())
}

/// Counts grants that were ever established, to show schedules exercise
/// the renew path and are not vacuous.
pub fn grants_seen(seed: u64, steps: usize) -> usize {
    let mut w = LeaseWorld::new(seed);
    let mut n = 0;
    for _ in 0..steps {
        w.act();
        n += w.nodes.iter().enumerate().map(|(i, s)| s.grant_count(w.local(i))).sum::<usize>();
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_few_schedules_hold() {
        for seed in 0..50 {
            if let Err(v) = run_sequence(seed, 200) {
                panic!("seed {seed}: {v:?}");
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn lease_sets_stay_exclusive(seed in proptest::prelude::any::<u64>()) {
            let mut w = LeaseWorld::new(seed);
            for _ in 0..200 {
                w.act();
                for s in &w.nodes {
                    proptest::prop_assert!(s.guarding.keys().all(|p| !s.endowing.contains_key(p)));
                    proptest::prop_assert!(s.guarded.keys().all(|p| !s.endowed.contains_key(p)));
                }
            }
        }

        #[test]
        fn grantor_never_earlier(seed in proptest::prelude::any::<u64>()) {
            let r = run_sequence(seed, 200);
            proptest::prop_assert!(r.is_ok(), "{:?}", r);
        }
    }

    #[test]
    fn schedules_establish_grants() {
        let total: usize = (0..20).map(|s| grants_seen(s, 200)).sum();
        assert!(total > 0);
    }
}

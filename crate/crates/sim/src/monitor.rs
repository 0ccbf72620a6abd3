//! Cross-node safety checks evaluated after every protocol step.

use std::collections::BTreeMap;

use bodega_core::{Ballot, Command, Micros, Node, NodeId};

const MAX_REPORTED: usize = 16;

pub struct Monitor {
    /// First batch seen committed at each slot, and who reported it.
    chosen: BTreeMap<u64, (NodeId, Vec<Command>)>,
    /// Per node: committed prefix already compared.
    checked: Vec<u64>,
    ballots: Vec<Ballot>,
    pub violations: Vec<String>,
}

impl Monitor {
    pub fn new(n: usize) -> Self {
        Monitor { chosen: BTreeMap::new(), checked: vec![0; n], ballots: vec![Ballot::ZERO; n], violations: Vec::new() }
    }

    fn report(&mut self, now: Micros, what: String) {
        if self.violations.len() < MAX_REPORTED {
            self.violations.push(format!("t={now}: {what}"));
        }
    }

    pub fn observe(&mut self, now: Micros, id: NodeId, node: &Node) {
        let i = id.idx();
        let b = node.ballot();
        if b < self.ballots[i] {
            self.report(now, format!("{id} moved back from ballot {:?} to {b:?}", self.ballots[i]));
        }
        self.ballots[i] = b;

        let log = node.log();
        if log.executed() > log.committed_prefix() {
            self.report(now, format!("{id} executed {} past its committed prefix {}", log.executed(), log.committed_prefix()));
        }
        let upto = log.committed_prefix();
        for s in self.checked[i] + 1..=upto {
            // Slots folded into a snapshot can no longer be compared.
            let Some(slot) = log.slot(s) else { continue };
            match self.chosen.get(&s) {
                None => {
                    self.chosen.insert(s, (id, slot.batch.clone()));
                }
                Some((first, batch)) if *batch != slot.batch => {
                    let first = *first;
                    self.report(now, format!("slot {s} committed differently at {first} and {id}"));
                }
                Some(_) => {}
            }
        }
        self.checked[i] = self.checked[i].max(upto);

        let lease = node.lease();
        if let Some(p) = lease.guarding.keys().find(|p| lease.endowing.contains_key(p)) {
            self.report(now, format!("{id} is both guarding and endowing {p}"));
        }
        if let Some(p) = lease.guarded.keys().find(|p| lease.endowed.contains_key(p)) {
            self.report(now, format!("{id} is both guarded and endowed by {p}"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bodega_core::ClusterConfig;

    #[test]
    fn fresh_node_is_clean() {
        let node = Node::new(NodeId(1), ClusterConfig::with_n(3), 0);
        let mut m = Monitor::new(3);
        m.observe(0, NodeId(1), &node);
        assert!(m.violations.is_empty());
    }
}

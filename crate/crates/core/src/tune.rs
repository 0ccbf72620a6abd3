//! Smart roster coverage: derive responder sets from observed per-key
//! read/write counts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{Key, KeyRange, NodeId, NodeSet, RangeAssignment, Roster};
use crate::msg::SiteCounts;

/// A key becomes eligible for responders when reads exceed this percentage.
pub const READ_PERCENT: u64 = 95;
/// Sites whose percentage of a key's reads exceeds this become responders.
pub const SITE_PERCENT: u64 = 20;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyStats {
    pub reads: BTreeMap<Key, SiteCounts>,
    pub writes: BTreeMap<Key, u64>,
}

impl KeyStats {
    pub fn record_read(&mut self, key: &Key, site: NodeId) {
        *self.reads.entry(key.clone()).or_default().entry(site).or_insert(0) += 1;
    }

    pub fn record_write(&mut self, key: &Key) {
        *self.writes.entry(key.clone()).or_insert(0) += 1;
    }

    pub fn merge_reads(&mut self, other: &BTreeMap<Key, SiteCounts>) {
        for (k, sites) in other {
            let e = self.reads.entry(k.clone()).or_default();
            for (s, c) in sites {
                *e.entry(*s).or_insert(0) += c;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.reads.is_empty() && self.writes.is_empty()
    }

    pub fn clear(&mut self) {
        self.reads.clear();
        self.writes.clear();
    }
}

/// Responders for one key under the strict thresholds.
pub fn responders_for(sites: &SiteCounts, writes: u64) -> NodeSet {
    let reads: u64 = sites.values().sum();
    let total = reads + writes;
    if total == 0 || reads * 100 <= READ_PERCENT * total {
        return NodeSet::empty();
    }
    sites
        .iter()
        .filter(|(_, &c)| c * 100 > SITE_PERCENT * reads)
        .map(|(&s, _)| s)
        .collect()
}

/// Builds the roster the tuner would like, keeping `leader`. Adjacent keys
/// with identical responder sets are coalesced into one range. Returns
/// `None` when the window saw no traffic.
pub fn tune_roster(stats: &KeyStats, leader: NodeId) -> Option<Roster> {
    if stats.is_empty() {
        return None;
    }
    let empty = SiteCounts::new();
    let mut keys: Vec<&Key> = stats.reads.keys().chain(stats.writes.keys()).collect();
    keys.sort();
    keys.dedup();
    let mut ranges: Vec<RangeAssignment> = Vec::new();
    for key in keys {
        let sites = stats.reads.get(key).unwrap_or(&empty);
        let writes = stats.writes.get(key).copied().unwrap_or(0);
        let mut set = responders_for(sites, writes);
        set.remove(leader);
        if set.is_empty() {
            continue;
        }
        match ranges.last_mut() {
            Some(last)
                if last.responders == set && last.range.hi.as_ref() == Some(key) =>
            {
                last.range.hi = Some(key.successor());
            }
            _ => ranges.push(RangeAssignment { range: KeyRange::single(key), responders: set }),
        }
    }
    Some(Roster { leader: Some(leader), ranges })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Bytes;

    fn sites(pairs: &[(u8, u64)]) -> SiteCounts {
        pairs.iter().map(|&(s, c)| (NodeId(s), c)).collect()
    }

    #[test]
    fn strict_thresholds() {
        // 96 reads and 4 writes; the third site sits just under 20%.
        let s = sites(&[(0, 48), (1, 29), (2, 19)]);
        assert_eq!(s.values().sum::<u64>(), 96);
        let got = responders_for(&s, 4);
        assert!(got.contains(NodeId(0)) && got.contains(NodeId(1)));
        assert!(!got.contains(NodeId(2)));

        let even = sites(&[(0, 50), (1, 30), (2, 20)]);
        let got = responders_for(&even, 0);
        assert_eq!(got, [NodeId(0), NodeId(1)].into_iter().collect());

        assert!(responders_for(&sites(&[(0, 90)]), 10).is_empty());
        assert!(responders_for(&SiteCounts::new(), 0).is_empty());
    }

    #[test]
    fn empty_window_proposes_nothing() {
        assert_eq!(tune_roster(&KeyStats::default(), NodeId(0)), None);
    }

    #[test]
    fn coalesces_adjacent_keys() {
        let mut st = KeyStats::default();
        for k in ["a", "a\0", "b"] {
            for _ in 0..100 {
                st.record_read(&k.into(), NodeId(2));
            }
        }
        let r = tune_roster(&st, NodeId(0)).unwrap();
        assert_eq!(r.ranges.len(), 2);
        assert_eq!(r.ranges[0].range, KeyRange::new("a", Some(Bytes::from("a\0").successor())));
        assert!(r.validate(3).is_ok());
    }
}

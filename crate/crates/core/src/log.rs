//! Replica log: consensus slots, in-order execution against the key-value
//! map, the per-key write index used by local reads, and snapshots.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::model::{Ballot, Command, CommandOp, Key, NodeId, NodeSet, RequestId, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotStatus {
    Accepted,
    Committed,
    Executed,
}

/// A read parked on a slot until that slot's fate is known.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingRead {
    pub client: u64,
    pub request_id: RequestId,
    pub key: Key,
    pub hints: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogSlot {
    pub ballot: Ballot,
    pub batch: Vec<Command>,
    pub status: SlotStatus,
    pub pending_reads: Vec<PendingRead>,
}

impl LogSlot {
    pub fn is_committed(&self) -> bool {
        self.status >= SlotStatus::Committed
    }

    /// Keys written by the batch.
    pub fn write_keys(&self) -> impl Iterator<Item = &Key> {
        self.batch.iter().filter_map(|c| c.write_key())
    }

    /// Value the batch leaves for `key`, if it writes it.
    pub fn value_for(&self, key: &Key) -> Option<&Value> {
        self.batch.iter().rev().find_map(|c| match &c.op {
            CommandOp::Put { key: k, value } if k == key => Some(value),
            _ => None,
        })
    }
}

/// Materialized state up to and including slot `upto`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub upto: u64,
    pub kv: BTreeMap<Key, Value>,
}

/// Entry exchanged during step-up and catch-up.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotEntry {
    pub slot: u64,
    pub ballot: Ballot,
    pub batch: Vec<Command>,
    pub committed: bool,
}

/// Result of executing one command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Executed {
    pub slot: u64,
    pub command: Command,
    /// For reads proposed through the log: the value observed.
    pub read: Option<Option<Value>>,
}

/// Commit rule: at least `m` replies, and every responder of every written
/// key among them.
pub fn commit_condition(replies: NodeSet, m: usize, responders: NodeSet) -> bool {
    replies.len() >= m && replies.is_superset(responders)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReplicaLog {
    slots: BTreeMap<u64, LogSlot>,
    /// Early accept notifications: slot -> (ballot, senders).
    notes: BTreeMap<u64, (Ballot, NodeSet)>,
    /// Slots up to here are folded into `kv` and dropped from `slots`.
    truncated: u64,
    executed: u64,
    committed_prefix: u64,
    highest_accepted: u64,
    kv: BTreeMap<Key, Value>,
    writes_by_key: BTreeMap<Key, BTreeSet<u64>>,
    snapshot: Option<Snapshot>,
}

impl ReplicaLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn slot(&self, s: u64) -> Option<&LogSlot> {
        self.slots.get(&s)
    }

    pub fn slot_mut(&mut self, s: u64) -> Option<&mut LogSlot> {
        self.slots.get_mut(&s)
    }

    pub fn slots(&self) -> impl Iterator<Item = (u64, &LogSlot)> {
        self.slots.iter().map(|(k, v)| (*k, v))
    }

    pub fn truncated(&self) -> u64 {
        self.truncated
    }

    pub fn executed(&self) -> u64 {
        self.executed
    }

    pub fn committed_prefix(&self) -> u64 {
        self.committed_prefix
    }

    pub fn highest_accepted(&self) -> u64 {
        self.highest_accepted
    }

    pub fn last_slot(&self) -> u64 {
        self.slots.keys().next_back().copied().unwrap_or(0).max(self.truncated)
    }

    pub fn kv(&self) -> &BTreeMap<Key, Value> {
        &self.kv
    }

    pub fn latest_snapshot(&self) -> Option<&Snapshot> {
        self.snapshot.as_ref()
    }

    pub fn is_committed(&self, s: u64) -> bool {
        s <= self.truncated || self.slots.get(&s).is_some_and(|x| x.is_committed())
    }

    /// Records `batch` as accepted at `slot` under `ballot`. Returns false if
    /// the slot is already decided.
    pub fn accept(&mut self, slot: u64, ballot: Ballot, batch: Vec<Command>) -> bool {
        if self.is_committed(slot) {
            return false;
        }
        if let Some(old) = self.slots.remove(&slot) {
            self.unindex(slot, &old);
            let fresh = LogSlot {
                ballot,
                batch,
                status: SlotStatus::Accepted,
                pending_reads: old.pending_reads,
            };
            self.index(slot, &fresh);
            self.slots.insert(slot, fresh);
        } else {
            let fresh = LogSlot {
                ballot,
                batch,
                status: SlotStatus::Accepted,
                pending_reads: Vec::new(),
            };
            self.index(slot, &fresh);
            self.slots.insert(slot, fresh);
        }
        self.highest_accepted = self.highest_accepted.max(slot);
        true
    }

    fn index(&mut self, slot: u64, s: &LogSlot) {
        for k in s.write_keys() {
            self.writes_by_key.entry(k.clone()).or_default().insert(slot);
        }
    }

    fn unindex(&mut self, slot: u64, s: &LogSlot) {
        for k in s.write_keys() {
            if let Some(set) = self.writes_by_key.get_mut(k) {
                set.remove(&slot);
                if set.is_empty() {
                    self.writes_by_key.remove(k);
                }
            }
        }
    }

    /// Installs a decided value, replacing whatever was accepted there.
    pub fn learn_committed(&mut self, slot: u64, ballot: Ballot, batch: Vec<Command>) {
        if self.is_committed(slot) {
            return;
        }
        self.accept(slot, ballot, batch);
        self.mark_committed(slot);
    }

    /// Marks an accepted slot committed. Returns false if unknown.
    pub fn mark_committed(&mut self, slot: u64) -> bool {
        match self.slots.get_mut(&slot) {
            Some(s) => {
                if s.status == SlotStatus::Accepted {
                    s.status = SlotStatus::Committed;
                }
                while self.is_committed(self.committed_prefix + 1) {
                    self.committed_prefix += 1;
                }
                true
            }
            None => slot <= self.truncated,
        }
    }

    /// Executes the committed prefix in order.
    pub fn execute(&mut self) -> Vec<Executed> {
        let mut out = Vec::new();
        while self.executed < self.committed_prefix {
            let s = self.executed + 1;
            let Some(slot) = self.slots.get_mut(&s) else { break };
            slot.status = SlotStatus::Executed;
            for cmd in &slot.batch {
                let read = match &cmd.op {
                    CommandOp::Put { key, value } => {
                        self.kv.insert(key.clone(), value.clone());
                        None
                    }
                    CommandOp::Get { key } => Some(self.kv.get(key).cloned()),
                    CommandOp::Noop => None,
                };
                out.push(Executed { slot: s, command: cmd.clone(), read });
            }
            self.executed = s;
        }
        out
    }

    /// Highest slot holding a write to `key` that is still in the log.
    pub fn highest_write(&self, key: &Key) -> Option<u64> {
        self.writes_by_key.get(key).and_then(|s| s.iter().next_back().copied())
    }

    /// Value of `key` in the executed state (snapshot plus applied slots).
    pub fn executed_value(&self, key: &Key) -> Option<&Value> {
        self.kv.get(key)
    }

    /// Buffers an AcceptNote; notes for a higher ballot replace lower ones.
    pub fn add_note(&mut self, slot: u64, ballot: Ballot, from: NodeId) {
        if slot <= self.truncated {
            return;
        }
        let e = self.notes.entry(slot).or_insert((ballot, NodeSet::empty()));
        if ballot > e.0 {
            *e = (ballot, NodeSet::empty());
        }
        if ballot == e.0 {
            e.1.insert(from);
        }
    }

    pub fn notes(&self, slot: u64, ballot: Ballot) -> NodeSet {
        match self.notes.get(&slot) {
            Some((b, set)) if *b == ballot => *set,
            _ => NodeSet::empty(),
        }
    }

    pub fn take_pending(&mut self, slot: u64) -> Vec<PendingRead> {
        self.slots.get_mut(&slot).map(|s| std::mem::take(&mut s.pending_reads)).unwrap_or_default()
    }

    pub fn take_all_pending(&mut self) -> Vec<PendingRead> {
        let mut out = Vec::new();
        for s in self.slots.values_mut() {
            out.append(&mut s.pending_reads);
        }
        out
    }

    pub fn pending_count(&self) -> usize {
        self.slots.values().map(|s| s.pending_reads.len()).sum()
    }

    /// Slot entries from `from` onward, for step-up replies.
    pub fn entries_from(&self, from: u64) -> Vec<SlotEntry> {
        self.slots
            .range(from..)
            .map(|(&slot, s)| SlotEntry {
                slot,
                ballot: s.ballot,
                batch: s.batch.clone(),
                committed: s.is_committed(),
            })
            .collect()
    }

    /// Committed entries in `[from, from + limit)`, for catch-up replies.
    pub fn committed_from(&self, from: u64, limit: u64) -> Vec<SlotEntry> {
        let end = from.saturating_add(limit);
        self.slots
            .range(from..end)
            .filter(|(_, s)| s.is_committed())
            .map(|(&slot, s)| SlotEntry { slot, ballot: s.ballot, batch: s.batch.clone(), committed: true })
            .collect()
    }

    /// Materializes the executed prefix and truncates the log below it.
    pub fn take_snapshot(&mut self) -> &Snapshot {
        let upto = self.executed;
        let snap = Snapshot { upto, kv: self.kv.clone() };
        let keep = self.slots.split_off(&(upto + 1));
        let dropped = std::mem::replace(&mut self.slots, keep);
        for (s, slot) in &dropped {
            self.unindex(*s, slot);
        }
        self.notes = self.notes.split_off(&(upto + 1));
        self.truncated = self.truncated.max(upto);
        self.snapshot = Some(snap);
        self.snapshot.as_ref().unwrap()
    }

    /// Snapshot to ship to a peer that needs slots at or below `from`.
    pub fn snapshot_for(&mut self, from: u64) -> Option<Snapshot> {
        if from > self.truncated {
            return None;
        }
        if self.snapshot.as_ref().is_none_or(|s| s.upto < self.truncated) {
            self.take_snapshot();
        }
        self.snapshot.clone()
    }

    /// Installs a snapshot that is ahead of the executed prefix. Returns the
    /// reads that were parked on discarded slots.
    pub fn install_snapshot(&mut self, snap: Snapshot) -> Vec<PendingRead> {
        if snap.upto <= self.executed {
            return Vec::new();
        }
        let keep = self.slots.split_off(&(snap.upto + 1));
        let dropped = std::mem::replace(&mut self.slots, keep);
        let mut parked = Vec::new();
        for (s, mut slot) in dropped {
            self.unindex(s, &slot);
            parked.append(&mut slot.pending_reads);
        }
        self.notes = self.notes.split_off(&(snap.upto + 1));
        self.kv = snap.kv.clone();
        self.truncated = snap.upto;
        self.executed = snap.upto;
        self.committed_prefix = self.committed_prefix.max(snap.upto);
        while self.is_committed(self.committed_prefix + 1) {
            self.committed_prefix += 1;
        }
        self.highest_accepted = self.highest_accepted.max(snap.upto);
        self.snapshot = Some(snap);
        parked
    }
}

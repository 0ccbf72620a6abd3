//! Read path: local reads under the stable roster, optimistic holding on
//! the interfering slot, release by commit or accept notifications, and the
//! fallbacks for nodes that cannot answer locally.

use crate::log::{PendingRead, SlotStatus};
use crate::model::{Key, NodeId, RequestId, Value};
use crate::msg::ReplyBody;
use crate::node::Node;

/// Outcome of a local read attempt at a responder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReadDecision {
    ServeNow(Option<Value>),
    Hold(u64),
    Redirect(Option<NodeId>),
    FallbackAsWrite,
}

impl Node {
    /// Chooses how to answer a read of `key` right now.
    pub fn decide_read(&self, key: &Key, hints: &[NodeId]) -> ReadDecision {
        let responders = self.roster.responders_of(key);
        if self.is_stable(self.now) && responders.contains(self.id) {
            return self.responder_read(key);
        }
        if self.target.is_none() && self.leader.as_ref().is_some_and(|l| l.ready()) {
            return ReadDecision::FallbackAsWrite;
        }
        let (_, newest) = self.newest();
        let newest_responders = newest.responders_of(key);
        let to = hints
            .iter()
            .copied()
            .find(|h| *h != self.id && newest_responders.contains(*h) && !self.suspected().contains(*h))
            .or(newest.leader.filter(|l| *l != self.id));
        ReadDecision::Redirect(to)
    }

    /// Local read at a responder holding the stable roster.
    pub fn responder_read(&self, key: &Key) -> ReadDecision {
        let Some(s) = self.log.highest_write(key) else {
            return ReadDecision::ServeNow(self.log.executed_value(key).cloned());
        };
        let slot = self.log.slot(s).expect("indexed slot present");
        if slot.is_committed() || self.notes_qualify(s, key) {
            ReadDecision::ServeNow(slot.value_for(key).cloned())
        } else {
            ReadDecision::Hold(s)
        }
    }

    /// Early release: the slot was accepted under the current ballot by a
    /// majority that includes every responder of `key`.
    fn notes_qualify(&self, s: u64, key: &Key) -> bool {
        if !self.cfg.early_notes {
            return false;
        }
        let Some(slot) = self.log.slot(s) else { return false };
        if slot.status != SlotStatus::Accepted || slot.ballot != self.ballot || self.target.is_some() {
            return false;
        }
        let notes = self.log.notes(s, self.ballot);
        notes.len() >= self.cfg.m() && notes.is_superset(self.roster.responders_of(key))
    }

    pub(crate) fn dispatch_read(&mut self, client: u64, rid: RequestId, key: Key, hints: Vec<NodeId>) {
        match self.decide_read(&key, &hints) {
            ReadDecision::ServeNow(value) => {
                self.counters.local_reads += 1;
                self.reply(client, rid, ReplyBody::Value { value, local: true });
            }
            ReadDecision::Hold(s) => {
                self.counters.held_reads += 1;
                let slot = self.log.slot_mut(s).expect("held slot present");
                slot.pending_reads.push(PendingRead { client, request_id: rid, key, hints });
            }
            ReadDecision::FallbackAsWrite => self.fallback_read(client, rid, key),
            ReadDecision::Redirect(to) => {
                self.counters.redirects += 1;
                let body = match to {
                    Some(_) => ReplyBody::Redirect { to, ballot: self.newest().0 },
                    None => ReplyBody::Unavailable,
                };
                self.reply(client, rid, body);
            }
        }
    }

    /// Re-runs every read parked on `s`; they are answered from the newest
    /// state for their key, or parked again on a newer interfering slot.
    pub(crate) fn release_slot(&mut self, s: u64) {
        for pr in self.log.take_pending(s) {
            self.redispatch(pr);
        }
    }

    fn redispatch(&mut self, pr: PendingRead) {
        match self.decide_read(&pr.key, &pr.hints) {
            ReadDecision::ServeNow(value) => {
                self.reply(pr.client, pr.request_id, ReplyBody::Value { value, local: true });
            }
            ReadDecision::Hold(s) => {
                self.log.slot_mut(s).expect("held slot present").pending_reads.push(pr);
            }
            _ => self.dispatch_read(pr.client, pr.request_id, pr.key, pr.hints),
        }
    }

    pub(crate) fn release_by_notes(&mut self, s: u64) {
        let Some(slot) = self.log.slot(s) else { return };
        if slot.pending_reads.is_empty() {
            return;
        }
        let ready: Vec<bool> = slot.pending_reads.iter().map(|p| self.notes_qualify(s, &p.key)).collect();
        if !ready.iter().any(|r| *r) {
            return;
        }
        let all = self.log.take_pending(s);
        let mut keep = Vec::new();
        let mut go = Vec::new();
        for (pr, r) in all.into_iter().zip(ready) {
            if r {
                go.push(pr);
            } else {
                keep.push(pr);
            }
        }
        self.log.slot_mut(s).unwrap().pending_reads = keep;
        for pr in go {
            self.redispatch(pr);
        }
    }
}

//! Write path: leader step-up, batching, accept/commit with the
//! responder-covering commit rule, accept notifications, catch-up and
//! in-order execution.

use std::collections::BTreeMap;

use crate::log::{commit_condition, SlotEntry, Snapshot};
use crate::model::{Ballot, Command, Key, Micros, Mutation, NodeId, NodeSet, RequestId, Value};
use crate::msg::{PeerMsg, ReplyBody, TimerKind};
use crate::node::{Node, Waiter};

#[derive(Debug, Clone)]
pub(crate) struct Inflight {
    pub batch: Vec<Command>,
    pub replies: NodeSet,
    pub sent_at: Micros,
}

#[derive(Debug, Clone)]
pub(crate) struct Prepare {
    pub from_slot: u64,
    pub replies: BTreeMap<NodeId, (Vec<SlotEntry>, Option<Snapshot>)>,
    pub sent_at: Micros,
}

#[derive(Debug, Clone)]
pub(crate) struct LeaderState {
    pub ballot: Ballot,
    pub prepare: Option<Prepare>,
    pub next_slot: u64,
    pub queue: Vec<Command>,
    pub batch_armed: bool,
    pub inflight: BTreeMap<u64, Inflight>,
}

impl LeaderState {
    pub fn ready(&self) -> bool {
        self.prepare.is_none()
    }
}

impl Node {
    /// Takes over as leader of the freshly adopted roster: prepare every
    /// slot past the committed prefix under the new ballot.
    pub(crate) fn step_up(&mut self) {
        let from_slot = self.log.committed_prefix() + 1;
        self.leader = Some(LeaderState {
            ballot: self.ballot,
            prepare: Some(Prepare { from_slot, replies: BTreeMap::new(), sent_at: self.now }),
            next_slot: 0,
            queue: Vec::new(),
            batch_armed: false,
            inflight: BTreeMap::new(),
        });
        let ballot = self.ballot;
        let all: Vec<NodeId> = self.all().collect();
        for p in all {
            self.send(p, PeerMsg::Prepare { ballot, from_slot });
        }
    }

    /// Leadership lost to a newer roster: unproposed writes are bounced so
    /// their clients retry at the new leader.
    pub(crate) fn abandon_leadership(&mut self, ls: LeaderState) {
        let to = self.newest().1.leader;
        let ballot = self.newest().0;
        for cmd in ls.queue {
            if let Some(w) = self.waiting.remove(&cmd.request_id) {
                self.reply(w.client, cmd.request_id, ReplyBody::Redirect { to, ballot });
            }
        }
    }

    pub(crate) fn on_prepare(&mut self, from: NodeId, ballot: Ballot, from_slot: u64) {
        let entries = self.log.entries_from(from_slot);
        let snapshot = self.log.snapshot_for(from_slot);
        self.send(from, PeerMsg::PrepareReply { ballot, entries, snapshot });
    }

    pub(crate) fn on_prepare_reply(
        &mut self,
        from: NodeId,
        ballot: Ballot,
        entries: Vec<SlotEntry>,
        snapshot: Option<Snapshot>,
    ) {
        let m = self.cfg.m();
        let Some(ls) = self.leader.as_mut() else { return };
        if ls.ballot != ballot {
            return;
        }
        let Some(prep) = ls.prepare.as_mut() else { return };
        prep.replies.insert(from, (entries, snapshot));
        if prep.replies.len() >= m {
            let prep = ls.prepare.take().unwrap();
            self.finish_prepare(prep);
        }
    }

    fn finish_prepare(&mut self, prep: Prepare) {
        let mut best_snap: Option<Snapshot> = None;
        let mut merged: BTreeMap<u64, SlotEntry> = BTreeMap::new();
        for (_, (entries, snap)) in prep.replies {
            if let Some(s) = snap {
                if best_snap.as_ref().is_none_or(|b| s.upto > b.upto) {
                    best_snap = Some(s);
                }
            }
            for e in entries {
                match merged.get(&e.slot) {
                    Some(cur) if cur.committed || (!e.committed && cur.ballot >= e.ballot) => {}
                    _ => {
                        merged.insert(e.slot, e);
                    }
                }
            }
        }
        if let Some(s) = best_snap {
            if s.upto > self.log.executed() {
                let parked = self.log.install_snapshot(s);
                for pr in parked {
                    self.dispatch_read(pr.client, pr.request_id, pr.key, pr.hints);
                }
            }
        }
        let last = merged.keys().next_back().copied().unwrap_or(0).max(self.log.last_slot());
        let start = self.log.committed_prefix() + 1;
        for s in start..=last {
            if self.log.is_committed(s) {
                continue;
            }
            let batch = match merged.remove(&s) {
                Some(e) => e.batch,
                None => vec![Command::noop()],
            };
            self.propose(s, batch);
        }
        let ls = self.leader.as_mut().expect("leader during prepare");
        ls.next_slot = last.max(start - 1) + 1;
        if !ls.queue.is_empty() {
            self.seal_batch();
        }
        self.execute_committed();
    }

    fn propose(&mut self, slot: u64, batch: Vec<Command>) {
        let now = self.now;
        let ls = self.leader.as_mut().expect("proposing without leadership");
        let ballot = ls.ballot;
        ls.inflight.insert(slot, Inflight { batch: batch.clone(), replies: NodeSet::empty(), sent_at: now });
        let all: Vec<NodeId> = self.all().collect();
        for p in all {
            self.send(p, PeerMsg::Accept { ballot, slot, batch: batch.clone() });
        }
    }

    pub(crate) fn client_write(&mut self, client: u64, rid: RequestId, key: Key, value: Value) {
        let leading = self.target.is_none() && self.leader.is_some();
        if !leading {
            let (ballot, newest) = self.newest();
            let body = match newest.leader {
                Some(l) if l != self.id => ReplyBody::Redirect { to: Some(l), ballot },
                _ => ReplyBody::Unavailable,
            };
            self.counters.redirects += 1;
            self.reply(client, rid, body);
            return;
        }
        if self.waiting.contains_key(&rid) {
            return;
        }
        self.tune_stats.record_write(&key);
        self.waiting.insert(rid, Waiter { client, since: self.now });
        self.enqueue(Command::put(rid, key, value));
    }

    /// Reads that cannot be served locally at the leader go through the log.
    pub(crate) fn fallback_read(&mut self, client: u64, rid: RequestId, key: Key) {
        self.counters.fallback_reads += 1;
        if self.waiting.contains_key(&rid) {
            return;
        }
        self.waiting.insert(rid, Waiter { client, since: self.now });
        self.enqueue(Command::get(rid, key));
    }

    fn enqueue(&mut self, cmd: Command) {
        let at = self.now + self.cfg.batch_interval_us;
        let ls = self.leader.as_mut().expect("enqueue at leader");
        ls.queue.push(cmd);
        if ls.ready() && !ls.batch_armed {
            ls.batch_armed = true;
            self.arm(TimerKind::Batch, at);
        }
    }

    pub(crate) fn seal_batch(&mut self) {
        let Some(ls) = self.leader.as_mut() else { return };
        ls.batch_armed = false;
        if !ls.ready() || ls.queue.is_empty() {
            return;
        }
        let batch = std::mem::take(&mut ls.queue);
        let slot = ls.next_slot;
        ls.next_slot += 1;
        self.propose(slot, batch);
    }

    pub(crate) fn on_accept(&mut self, from: NodeId, ballot: Ballot, slot: u64, batch: Vec<Command>) {
        let mut written: Vec<Key> = batch.iter().filter_map(|c| c.write_key().cloned()).collect();
        written.sort();
        written.dedup();
        self.log.accept(slot, ballot, batch);
        self.send(from, PeerMsg::AcceptReply { ballot, slot, ok: true });
        self.log.add_note(slot, ballot, self.id);
        if self.cfg.early_notes {
            let mut targets = NodeSet::empty();
            for k in &written {
                targets = targets.union(self.roster.responders_of(k));
            }
            targets.remove(self.id);
            if let Some(l) = self.roster.leader {
                targets.remove(l);
            }
            for p in targets.iter() {
                self.send(p, PeerMsg::AcceptNote { ballot, slot });
            }
        }
        self.release_by_notes(slot);
    }

    pub(crate) fn on_accept_reply(&mut self, from: NodeId, ballot: Ballot, slot: u64) {
        let m = self.cfg.m();
        let ignore_responders = self.cfg.mutation == Some(Mutation::CommitIgnoresResponders);
        let Some(ls) = self.leader.as_mut() else { return };
        if ls.ballot != ballot {
            return;
        }
        let Some(inf) = ls.inflight.get_mut(&slot) else { return };
        inf.replies.insert(from);
        let replies = inf.replies;
        let mut responders = NodeSet::empty();
        if !ignore_responders {
            for k in inf.batch.iter().filter_map(|c| c.write_key()) {
                responders = responders.union(self.roster.responders_of(k));
            }
        }
        if commit_condition(replies, m, responders) {
            let inf = self.leader.as_mut().unwrap().inflight.remove(&slot).unwrap();
            self.log.learn_committed(slot, ballot, inf.batch);
            self.log.mark_committed(slot);
            let others: Vec<NodeId> = self.others().collect();
            for p in others {
                self.send(p, PeerMsg::Commit { ballot, slots: vec![slot] });
            }
            self.release_slot(slot);
            self.execute_committed();
        }
    }

    pub(crate) fn on_commit(&mut self, from: NodeId, ballot: Ballot, slots: Vec<u64>) {
        let mut missing = false;
        for s in slots {
            if self.log.is_committed(s) {
                continue;
            }
            match self.log.slot(s) {
                Some(sl) if sl.ballot == ballot => {
                    self.log.mark_committed(s);
                    self.release_slot(s);
                }
                _ => missing = true,
            }
        }
        if missing {
            self.request_catchup(from);
        }
        self.execute_committed();
    }

    pub(crate) fn on_catchup(&mut self, entries: Vec<SlotEntry>, snapshot: Option<Snapshot>) {
        if let Some(s) = snapshot {
            let parked = self.log.install_snapshot(s);
            for pr in parked {
                self.dispatch_read(pr.client, pr.request_id, pr.key, pr.hints);
            }
        }
        for e in entries {
            if self.log.is_committed(e.slot) {
                continue;
            }
            self.log.learn_committed(e.slot, e.ballot, e.batch);
            self.release_slot(e.slot);
        }
        self.execute_committed();
    }

    pub(crate) fn execute_committed(&mut self) {
        for ex in self.log.execute() {
            let rid = ex.command.request_id;
            if let Some(w) = self.waiting.remove(&rid) {
                let body = match ex.read {
                    Some(value) => ReplyBody::Value { value, local: false },
                    None => ReplyBody::WriteOk,
                };
                self.reply(w.client, rid, body);
            }
        }
        let every = self.cfg.snapshot_every;
        if every > 0 && self.log.executed() >= self.log.truncated() + every {
            self.log.take_snapshot();
        }
    }

    /// Resends unanswered Prepare and Accept messages.
    pub(crate) fn leader_retransmit(&mut self) {
        let now = self.now;
        let hb = self.cfg.hb_send_us;
        let n = self.cfg.n;
        let Some(ls) = self.leader.as_mut() else { return };
        let ballot = ls.ballot;
        let mut sends = Vec::new();
        if let Some(prep) = &mut ls.prepare {
            if prep.sent_at + hb <= now {
                prep.sent_at = now;
                for p in (0..n).map(NodeId).filter(|p| !prep.replies.contains_key(p)) {
                    sends.push((p, PeerMsg::Prepare { ballot, from_slot: prep.from_slot }));
                }
            }
        }
        for (&slot, inf) in ls.inflight.iter_mut() {
            if inf.sent_at + hb > now {
                continue;
            }
            inf.sent_at = now;
            for p in (0..n).map(NodeId).filter(|p| !inf.replies.contains(*p)) {
                sends.push((p, PeerMsg::Accept { ballot, slot, batch: inf.batch.clone() }));
            }
        }
        for (p, m) in sends {
            self.send(p, m);
        }
    }
}

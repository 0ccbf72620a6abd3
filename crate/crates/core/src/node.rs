//! The protocol core of one replica: a deterministic state machine driven by
//! `step(now, input)`. It never reads a clock or touches the network; hosts
//! (the simulator and the daemon) deliver inputs and carry out outputs.
//!
//! This file holds the node state, dispatch, heartbeats, failure detection
//! and roster changes. The write path lives in `consensus.rs`, the read path
//! in `read.rs`.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::lease::{LeaseMsg, LeaseState};
use crate::log::ReplicaLog;
use crate::model::{next_ballot, Ballot, ClusterConfig, Key, Micros, NodeId, NodeSet, RequestId, Roster};
use crate::msg::{
    ClientOp, ClientReply, ClientRequest, Input, NodeStats, Output, PeerMsg, ReplyBody, SiteCounts,
    TimerKind,
};
use crate::tune::{tune_roster, KeyStats};

/// Stashed messages for ballots not yet adopted.
const MAX_STASH: usize = 4096;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub local_reads: u64,
    pub held_reads: u64,
    pub fallback_reads: u64,
    pub redirects: u64,
}

/// A client request waiting for its command to execute.
#[derive(Debug, Clone, Copy, Serialize)]
pub(crate) struct Waiter {
    pub client: u64,
    pub since: Micros,
}

pub struct Node {
    pub(crate) id: NodeId,
    pub(crate) cfg: ClusterConfig,
    pub(crate) now: Micros,
    pub(crate) ballot: Ballot,
    pub(crate) roster: Roster,
    /// Roster waiting for our revocation of the current ballot to finish.
    pub(crate) target: Option<(Ballot, Roster)>,
    pub(crate) max_seen: Ballot,
    pub(crate) lease: LeaseState,
    pub(crate) log: ReplicaLog,
    pub(crate) leader: Option<crate::consensus::LeaderState>,
    pub(crate) waiting: BTreeMap<RequestId, Waiter>,
    peer_ballot: BTreeMap<NodeId, Ballot>,
    last_heard: BTreeMap<NodeId, Micros>,
    fail_after: BTreeMap<NodeId, Micros>,
    suspected: NodeSet,
    future: VecDeque<(NodeId, PeerMsg)>,
    last_catchup: Option<Micros>,
    read_deltas: BTreeMap<Key, SiteCounts>,
    pub(crate) tune_stats: KeyStats,
    armed: BTreeMap<TimerKind, Micros>,
    pub(crate) counters: Counters,
    pub(crate) out: Vec<Output>,
}

impl Node {
    pub fn new(id: NodeId, cfg: ClusterConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((id.0 as u64) << 56));
        let mut fail_after = BTreeMap::new();
        for p in 0..cfg.n {
            let j = cfg.hb_fail_jitter_us;
            let t = cfg.hb_fail_us - j + if j > 0 { rng.random_range(0..=2 * j) } else { 0 };
            fail_after.insert(NodeId(p), t);
        }
        Node {
            id,
            lease: LeaseState::new(id, &cfg),
            cfg,
            now: 0,
            ballot: Ballot::ZERO,
            roster: Roster::empty(),
            target: None,
            max_seen: Ballot::ZERO,
            log: ReplicaLog::new(),
            leader: None,
            waiting: BTreeMap::new(),
            peer_ballot: BTreeMap::new(),
            last_heard: BTreeMap::new(),
            fail_after,
            suspected: NodeSet::empty(),
            future: VecDeque::new(),
            last_catchup: None,
            read_deltas: BTreeMap::new(),
            tune_stats: KeyStats::default(),
            armed: BTreeMap::new(),
            counters: Counters::default(),
            out: Vec::new(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn ballot(&self) -> Ballot {
        self.ballot
    }

    pub fn roster(&self) -> &Roster {
        &self.roster
    }

    /// Newest roster this node knows of, adopted or not.
    pub fn newest(&self) -> (Ballot, &Roster) {
        match &self.target {
            Some((b, r)) => (*b, r),
            None => (self.ballot, &self.roster),
        }
    }

    pub fn log(&self) -> &ReplicaLog {
        &self.log
    }

    pub fn lease(&self) -> &LeaseState {
        &self.lease
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn is_leader(&self) -> bool {
        self.leader.is_some()
    }

    pub fn is_stable(&self, now: Micros) -> bool {
        self.target.is_none() && self.lease.is_stable(now, self.log.committed_prefix())
    }

    /// The ballot of the roster this node holds as stable, if any.
    pub fn stable_ballot(&self, now: Micros) -> Option<Ballot> {
        self.is_stable(now).then_some(self.ballot)
    }

    pub fn suspected(&self) -> NodeSet {
        self.suspected
    }

    /// Arms the periodic timers. Call once before the first `step`.
    pub fn start(&mut self, now: Micros) -> Vec<Output> {
        self.now = now;
        self.arm(TimerKind::Heartbeat, now);
        for p in self.others() {
            self.last_heard.insert(p, now);
            let at = now + self.fail_after[&p];
            self.arm(TimerKind::PeerFail(p), at);
        }
        if self.cfg.auto_tune {
            self.arm(TimerKind::AutoTune, now + self.cfg.tune_window_us);
        }
        std::mem::take(&mut self.out)
    }

    pub fn step(&mut self, now: Micros, input: Input) -> Vec<Output> {
        self.now = now.max(self.now);
        match input {
            Input::Peer { from, msg } => {
                if from.0 >= self.cfg.n {
                    return Vec::new();
                }
                self.heard(from);
                self.on_peer(from, msg);
            }
            Input::Client { client, req } => self.on_client(client, req),
            Input::Timer { kind } => {
                self.armed.remove(&kind);
                self.on_timer(kind);
            }
        }
        self.after_step();
        std::mem::take(&mut self.out)
    }

    fn after_step(&mut self) {
        self.lease.expire(self.now);
        self.try_adopt();
        if let Some(dl) = self.lease.next_deadline() {
            if self.armed.get(&TimerKind::LeaseWake) != Some(&dl) {
                self.arm(TimerKind::LeaseWake, dl);
            }
        }
    }

    pub(crate) fn others(&self) -> impl Iterator<Item = NodeId> {
        let me = self.id;
        (0..self.cfg.n).map(NodeId).filter(move |p| *p != me)
    }

    pub(crate) fn all(&self) -> impl Iterator<Item = NodeId> {
        (0..self.cfg.n).map(NodeId)
    }

    pub(crate) fn send(&mut self, to: NodeId, msg: PeerMsg) {
        self.out.push(Output::Send { to, msg });
    }

    pub(crate) fn reply(&mut self, client: u64, request_id: RequestId, body: ReplyBody) {
        self.out.push(Output::Reply { client, reply: ClientReply { request_id, body } });
    }

    pub(crate) fn arm(&mut self, kind: TimerKind, at: Micros) {
        self.armed.insert(kind, at);
        self.out.push(Output::SetTimer { kind, at });
    }

    fn send_leases(&mut self, msgs: Vec<(NodeId, LeaseMsg)>) {
        for (to, m) in msgs {
            self.send(to, PeerMsg::Lease(m));
        }
    }

    fn heard(&mut self, from: NodeId) {
        if from == self.id {
            return;
        }
        self.last_heard.insert(from, self.now);
        self.suspected.remove(from);
    }

    fn on_peer(&mut self, from: NodeId, msg: PeerMsg) {
        match msg {
            PeerMsg::Heartbeat { ballot, roster, commit_upto, leases, read_stats } => {
                self.peer_ballot.insert(from, ballot);
                self.max_seen = self.max_seen.max(ballot);
                let known = roster.as_ref().map(|(b, _)| *b);
                if let Some((b, r)) = roster {
                    self.observe_roster(b, r);
                }
                if ballot > self.newest().0 && known.is_none_or(|b| b < ballot) {
                    self.send(from, PeerMsg::FullRosterRequest);
                }
                for l in leases {
                    self.on_lease(from, l);
                }
                if commit_upto > self.log.committed_prefix() {
                    self.request_catchup(from);
                }
                if self.leader.is_some() {
                    self.tune_stats.merge_reads(&read_stats);
                }
            }
            PeerMsg::FullRosterRequest => {
                let hb = self.heartbeat_for(from, true, Vec::new());
                self.send(from, hb);
            }
            PeerMsg::Lease(l) => self.on_lease(from, l),
            PeerMsg::Prepare { ballot, from_slot } => {
                if self.gate(from, ballot, &PeerMsg::Prepare { ballot, from_slot }) {
                    self.on_prepare(from, ballot, from_slot);
                }
            }
            PeerMsg::PrepareReply { ballot, entries, snapshot } => {
                self.on_prepare_reply(from, ballot, entries, snapshot)
            }
            PeerMsg::Accept { ballot, slot, batch } => {
                if ballot < self.ballot {
                    self.send(from, PeerMsg::AcceptReply { ballot: self.ballot, slot, ok: false });
                } else if self.gate(from, ballot, &PeerMsg::Accept { ballot, slot, batch: batch.clone() }) {
                    self.on_accept(from, ballot, slot, batch);
                }
            }
            PeerMsg::AcceptReply { ballot, slot, ok } => {
                if ok {
                    self.on_accept_reply(from, ballot, slot);
                } else {
                    self.max_seen = self.max_seen.max(ballot);
                }
            }
            PeerMsg::AcceptNote { ballot, slot } => {
                self.log.add_note(slot, ballot, from);
                self.release_by_notes(slot);
            }
            PeerMsg::Commit { ballot, slots } => self.on_commit(from, ballot, slots),
            PeerMsg::CatchUpRequest { from_slot } => {
                let entries = self.log.committed_from(from_slot, self.cfg.catchup_chunk);
                let snapshot = self.log.snapshot_for(from_slot);
                self.send(from, PeerMsg::CatchUpReply { entries, snapshot });
            }
            PeerMsg::CatchUpReply { entries, snapshot } => self.on_catchup(entries, snapshot),
        }
    }

    /// Decides whether a ballot-scoped message is for the adopted ballot.
    /// Messages for a newer ballot are stashed until it is adopted.
    fn gate(&mut self, from: NodeId, ballot: Ballot, msg: &PeerMsg) -> bool {
        if ballot == self.ballot && self.target.is_none() {
            return true;
        }
        if ballot > self.ballot {
            if ballot > self.newest().0 {
                self.send(from, PeerMsg::FullRosterRequest);
            }
            if self.future.len() >= MAX_STASH {
                self.future.pop_front();
            }
            self.future.push_back((from, msg.clone()));
        }
        false
    }

    fn on_lease(&mut self, from: NodeId, l: LeaseMsg) {
        let future = matches!(l, LeaseMsg::Guard { .. } | LeaseMsg::Renew { .. }) && l.ballot() > self.ballot;
        if future {
            let b = l.ballot();
            self.gate(from, b, &PeerMsg::Lease(l));
            return;
        }
        let out = self.lease.handle(self.now, from, &l);
        self.send_leases(out);
    }

    fn on_client(&mut self, client: u64, req: ClientRequest) {
        let rid = req.request_id;
        match req.op {
            ClientOp::Put { key, value } => self.client_write(client, rid, key, value),
            ClientOp::Get { key } => {
                let site = req.hints.first().copied().unwrap_or(self.id);
                if self.leader.is_some() {
                    self.tune_stats.record_read(&key, site);
                } else if self.roster.leader.is_some() {
                    *self.read_deltas.entry(key.clone()).or_default().entry(site).or_insert(0) += 1;
                }
                self.dispatch_read(client, rid, key, req.hints);
            }
            ClientOp::RosterGet => {
                let body = ReplyBody::Roster {
                    ballot: self.ballot,
                    roster: self.roster.clone(),
                    stable: self.is_stable(self.now),
                };
                self.reply(client, rid, body);
            }
            ClientOp::RosterSet { roster } => match roster.validate(self.cfg.n) {
                Ok(()) => {
                    let b = self.announce(roster);
                    self.reply(client, rid, ReplyBody::RosterSet { ballot: b });
                }
                Err(e) => self.reply(client, rid, ReplyBody::Rejected { reason: e.to_string() }),
            },
            ClientOp::Stats => {
                let stats = self.stats();
                self.reply(client, rid, ReplyBody::Stats(Box::new(stats)));
            }
        }
    }

    pub fn stats(&self) -> NodeStats {
        NodeStats {
            ballot: self.ballot,
            stable: self.is_stable(self.now),
            grants: self.lease.grant_count(self.now),
            committed: self.log.committed_prefix(),
            executed: self.log.executed(),
            local_reads: self.counters.local_reads,
            held_reads: self.counters.held_reads,
            fallback_reads: self.counters.fallback_reads,
            redirects: self.counters.redirects,
            key_reads: self.tune_stats.reads.clone(),
            key_writes: self.tune_stats.writes.clone(),
        }
    }

    fn on_timer(&mut self, kind: TimerKind) {
        match kind {
            TimerKind::Heartbeat => self.heartbeat_tick(),
            TimerKind::Batch => self.seal_batch(),
            TimerKind::PeerFail(p) => self.check_peer(p),
            TimerKind::LeaseWake => {}
            TimerKind::AutoTune => self.auto_tune_tick(),
        }
    }

    fn heartbeat_for(&self, to: NodeId, full: bool, leases: Vec<LeaseMsg>) -> PeerMsg {
        let (nb, nr) = self.newest();
        let include = full || self.peer_ballot.get(&to).is_none_or(|pb| *pb < nb);
        let read_stats = if Some(to) == self.roster.leader && self.leader.is_none() {
            self.read_deltas.clone()
        } else {
            BTreeMap::new()
        };
        PeerMsg::Heartbeat {
            ballot: self.ballot,
            roster: (include && !nb.is_zero()).then(|| (nb, nr.clone())),
            commit_upto: self.log.committed_prefix(),
            leases,
            read_stats,
        }
    }

    fn heartbeat_tick(&mut self) {
        let now = self.now;
        let mut per_peer: BTreeMap<NodeId, Vec<LeaseMsg>> = BTreeMap::new();
        let mut standalone = Vec::new();
        let ticked = self.lease.tick(now, self.log.highest_accepted());
        let replies = self.lease.take_renew_replies(now);
        for (to, m) in ticked.into_iter().chain(replies) {
            let piggyback = matches!(m, LeaseMsg::Renew { .. } | LeaseMsg::RenewReply { .. });
            if piggyback && to != self.id {
                per_peer.entry(to).or_default().push(m);
            } else {
                standalone.push((to, m));
            }
        }
        let peers: Vec<NodeId> = self.others().collect();
        for p in peers {
            let leases = per_peer.remove(&p).unwrap_or_default();
            let hb = self.heartbeat_for(p, false, leases);
            self.send(p, hb);
        }
        self.read_deltas.clear();
        self.send_leases(standalone);
        self.leader_retransmit();
        self.maybe_reconfigure();
        let horizon = 4 * self.cfg.lease_us;
        self.waiting.retain(|_, w| w.since + horizon > now);
        self.arm(TimerKind::Heartbeat, now + self.cfg.hb_send_us);
    }

    fn check_peer(&mut self, p: NodeId) {
        let deadline = self.last_heard.get(&p).copied().unwrap_or(0) + self.fail_after[&p];
        if self.now < deadline {
            self.arm(TimerKind::PeerFail(p), deadline);
            return;
        }
        self.suspected.insert(p);
        self.maybe_reconfigure();
        let again = self.now + self.fail_after[&p];
        self.arm(TimerKind::PeerFail(p), again);
    }

    /// Drops suspected nodes from the roster. Only one node acts: the leader
    /// if it is healthy, otherwise the lowest-id healthy node, which also
    /// takes over leadership.
    fn maybe_reconfigure(&mut self) {
        if self.suspected.is_empty() {
            return;
        }
        let (_, newest) = self.newest();
        let Some(leader) = newest.leader else { return };
        let leader_down = self.suspected.contains(leader);
        let drop_roles = self
            .suspected
            .iter()
            .filter(|p| newest.ranges.iter().any(|a| a.responders.contains(*p)))
            .count();
        if drop_roles == 0 && !leader_down {
            return;
        }
        let healthy = self.cfg.all_nodes().difference(self.suspected);
        let Some(lowest) = healthy.iter().next() else { return };
        let announcer = if leader_down { lowest } else { leader };
        if announcer != self.id {
            return;
        }
        let mut next = newest.clone();
        for p in self.suspected.iter() {
            next = next.without_responder(p);
        }
        if leader_down {
            next.leader = Some(self.id);
        }
        self.announce(next);
    }

    /// Proposes `roster` under a fresh ballot and starts adopting it locally.
    pub(crate) fn announce(&mut self, roster: Roster) -> Ballot {
        let base = self.max_seen.max(self.newest().0);
        let b = next_ballot(base, self.id);
        self.max_seen = b;
        let peers: Vec<NodeId> = self.others().collect();
        for p in peers {
            self.send(
                p,
                PeerMsg::Heartbeat {
                    ballot: self.ballot,
                    roster: Some((b, roster.clone())),
                    commit_upto: self.log.committed_prefix(),
                    leases: Vec::new(),
                    read_stats: BTreeMap::new(),
                },
            );
        }
        self.observe_roster(b, roster);
        b
    }

    /// Learns of a roster under `b`; revokes the current ballot's leases and
    /// adopts once revocation completes.
    fn observe_roster(&mut self, b: Ballot, r: Roster) {
        self.max_seen = self.max_seen.max(b);
        if b <= self.newest().0 || r.validate(self.cfg.n).is_err() {
            return;
        }
        self.target = Some((b, r));
        if let Some(ls) = self.leader.take() {
            self.abandon_leadership(ls);
        }
        if !self.lease.is_revoking() {
            let out = self.lease.start_revoke();
            self.send_leases(out);
        }
        self.try_adopt();
    }

    fn try_adopt(&mut self) {
        if self.target.is_none() || !self.lease.revoke_done(self.now) {
            return;
        }
        let (b, r) = self.target.take().unwrap();
        self.ballot = b;
        self.roster = r;
        self.lease.adopt(b);
        let guards = self.lease.initiate(self.now, self.log.highest_accepted());
        self.send_leases(guards);

        for pr in self.log.take_all_pending() {
            self.dispatch_read(pr.client, pr.request_id, pr.key, pr.hints);
        }
        let stash = std::mem::take(&mut self.future);
        for (from, msg) in stash {
            match stash_ballot(&msg) {
                Some(mb) if mb == b => self.on_peer(from, msg),
                Some(mb) if mb > b => self.future.push_back((from, msg)),
                _ => {}
            }
        }
        if self.roster.leader == Some(self.id) {
            self.step_up();
        }
        self.maybe_reconfigure();
    }

    pub(crate) fn request_catchup(&mut self, from: NodeId) {
        if from == self.id {
            return;
        }
        if let Some(t) = self.last_catchup {
            if self.now < t + self.cfg.hb_send_us {
                return;
            }
        }
        self.last_catchup = Some(self.now);
        self.send(from, PeerMsg::CatchUpRequest { from_slot: self.log.committed_prefix() + 1 });
    }

    fn auto_tune_tick(&mut self) {
        if self.leader.is_some() && self.target.is_none() {
            if let Some(mut proposal) = tune_roster(&self.tune_stats, self.id) {
                for p in self.suspected.iter() {
                    proposal = proposal.without_responder(p);
                }
                proposal.ranges.retain(|a| !a.responders.is_empty());
                if proposal != self.roster {
                    self.announce(proposal);
                }
            }
        }
        self.tune_stats.clear();
        self.arm(TimerKind::AutoTune, self.now + self.cfg.tune_window_us);
    }

    /// Hash of the replicated and lease state, for parity checks.
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct View<'a> {
            id: NodeId,
            ballot: Ballot,
            roster: &'a Roster,
            target: &'a Option<(Ballot, Roster)>,
            lease: &'a LeaseState,
            committed: u64,
            executed: u64,
            highest_accepted: u64,
            kv: &'a BTreeMap<Key, crate::model::Value>,
            pending: usize,
            suspected: NodeSet,
            counters: &'a Counters,
        }
        let v = View {
            id: self.id,
            ballot: self.ballot,
            roster: &self.roster,
            target: &self.target,
            lease: &self.lease,
            committed: self.log.committed_prefix(),
            executed: self.log.executed(),
            highest_accepted: self.log.highest_accepted(),
            kv: self.log.kv(),
            pending: self.log.pending_count(),
            suspected: self.suspected,
            counters: &self.counters,
        };
        let bytes = serde_json::to_vec(&v).expect("state serializes");
        hex::encode(Sha256::digest(&bytes))
    }

}

fn stash_ballot(msg: &PeerMsg) -> Option<Ballot> {
    match msg {
        PeerMsg::Prepare { ballot, .. } | PeerMsg::Accept { ballot, .. } => Some(*ballot),
        PeerMsg::Lease(l) => Some(l.ballot()),
        _ => None,
    }
}

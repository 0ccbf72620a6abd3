//! All-to-all roster leases.
//!
//! Every node is at once a grantor (guarding/endowing sets) and a grantee
//! (guarded/endowed sets). Deadlines are absolute instants on the owning
//! node's clock. Grantee deadlines are anchored at the send time of a reply
//! the grantor has confirmed receiving, so the grantor-side deadline is never
//! earlier than the grantee-side one regardless of message delay.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::model::{Ballot, ClusterConfig, Micros, Mutation, NodeId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "lease", rename_all = "snake_case")]
pub enum LeaseMsg {
    Guard { ballot: Ballot, thresh: u64 },
    GuardReply { ballot: Ballot, seq: u64 },
    /// `ack` names the newest grantee reply the grantor has received.
    Renew { ballot: Ballot, ack: u64 },
    RenewReply { ballot: Ballot, seq: u64 },
    Revoke { ballot: Ballot },
    RevokeReply { ballot: Ballot },
}

impl LeaseMsg {
    pub fn ballot(&self) -> Ballot {
        match *self {
            LeaseMsg::Guard { ballot, .. }
            | LeaseMsg::GuardReply { ballot, .. }
            | LeaseMsg::Renew { ballot, .. }
            | LeaseMsg::RenewReply { ballot, .. }
            | LeaseMsg::Revoke { ballot }
            | LeaseMsg::RevokeReply { ballot } => ballot,
        }
    }
}

/// Which of the four lease sets a timer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intent {
    Guarding,
    Endowing,
    Guarded,
    Endowed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endowing {
    pub deadline: Micros,
    /// Newest reply sequence received from the grantee.
    pub ack: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Revoking {
    pub ballot: Ballot,
    /// Peers still to confirm, with the instant their grant expires anyway.
    pub waiting: BTreeMap<NodeId, Micros>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LeaseTiming {
    pub guard: Micros,
    pub lease: Micros,
    pub delta: Micros,
}

impl From<&ClusterConfig> for LeaseTiming {
    fn from(c: &ClusterConfig) -> Self {
        LeaseTiming { guard: c.guard_us, lease: c.lease_us, delta: c.delta_us }
    }
}

pub type Outbox = Vec<(NodeId, LeaseMsg)>;

/// Stable condition over the safety thresholds of the currently endowed
/// grantors: at least `m` grants and the m-th smallest threshold is already
/// committed locally.
pub fn stable_condition(threshes: &[u64], m: usize, committed_prefix: u64) -> bool {
    if threshes.len() < m || m == 0 {
        return false;
    }
    let mut sorted = threshes.to_vec();
    sorted.sort_unstable();
    sorted[m - 1] <= committed_prefix
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeaseState {
    me: NodeId,
    n: u8,
    m: usize,
    #[serde(skip, default = "default_timing")]
    timing: LeaseTiming,
    #[serde(skip)]
    mutation: Option<Mutation>,
    pub ballot: Ballot,
    /// Guards have been issued for `ballot`.
    pub active: bool,
    pub guarding: BTreeMap<NodeId, Micros>,
    pub endowing: BTreeMap<NodeId, Endowing>,
    pub guarded: BTreeMap<NodeId, Micros>,
    pub endowed: BTreeMap<NodeId, Micros>,
    pub thresh: BTreeMap<NodeId, u64>,
    pub revoking: Option<Revoking>,
    /// Grantee side: send instants of our replies, per grantor.
    reply_sent: BTreeMap<NodeId, BTreeMap<u64, Micros>>,
    next_reply_seq: u64,
    unreplied: BTreeSet<NodeId>,
    /// Grantee side: highest ballot each grantor has revoked. Guards and
    /// renewals delayed past the revocation must not revive the grant.
    revoked: BTreeMap<NodeId, Ballot>,
}

fn default_timing() -> LeaseTiming {
    LeaseTiming::from(&ClusterConfig::default())
}

impl LeaseState {
    pub fn new(me: NodeId, cfg: &ClusterConfig) -> Self {
        LeaseState {
            me,
            n: cfg.n,
            m: cfg.m(),
            timing: LeaseTiming::from(cfg),
            mutation: cfg.mutation,
            ballot: Ballot::ZERO,
            active: false,
            guarding: BTreeMap::new(),
            endowing: BTreeMap::new(),
            guarded: BTreeMap::new(),
            endowed: BTreeMap::new(),
            thresh: BTreeMap::new(),
            revoking: None,
            reply_sent: BTreeMap::new(),
            next_reply_seq: 1,
            revoked: BTreeMap::new(),
            unreplied: BTreeSet::new(),
        }
    }

    fn peers(&self) -> impl Iterator<Item = NodeId> {
        (0..self.n).map(NodeId)
    }

    /// Switches to `ballot`, dropping every grant held or given under the
    /// previous one. Callers revoke first.
    pub fn adopt(&mut self, ballot: Ballot) {
        self.ballot = ballot;
        self.active = false;
        self.guarding.clear();
        self.endowing.clear();
        self.guarded.clear();
        self.endowed.clear();
        self.thresh.clear();
        self.reply_sent.clear();
        self.unreplied.clear();
        self.revoked.retain(|_, b| *b >= ballot);
    }

    fn was_revoked(&self, from: NodeId, ballot: Ballot) -> bool {
        self.revoked.get(&from).is_some_and(|b| *b >= ballot)
    }

    /// Sends Guards for the current ballot to every node, self included.
    pub fn initiate(&mut self, now: Micros, highest_accepted: u64) -> Outbox {
        self.active = true;
        let peers: Vec<NodeId> = self.peers().collect();
        peers.into_iter().map(|p| self.guard_peer(now, p, highest_accepted)).collect()
    }

    fn guard_peer(&mut self, now: Micros, p: NodeId, thresh: u64) -> (NodeId, LeaseMsg) {
        let t = self.timing;
        self.guarding.entry(p).or_insert(now + t.guard + t.delta);
        (p, LeaseMsg::Guard { ballot: self.ballot, thresh })
    }

    pub fn handle(&mut self, now: Micros, from: NodeId, msg: &LeaseMsg) -> Outbox {
        match *msg {
            LeaseMsg::Guard { ballot, thresh } => self.handle_guard(now, from, ballot, thresh),
            LeaseMsg::GuardReply { ballot, seq } => self.handle_guard_reply(now, from, ballot, seq),
            LeaseMsg::Renew { ballot, ack } => self.handle_renew(now, from, ballot, ack),
            LeaseMsg::RenewReply { ballot, seq } => {
                self.handle_renew_reply(now, from, ballot, seq);
                Vec::new()
            }
            LeaseMsg::Revoke { ballot } => self.handle_revoke(from, ballot),
            LeaseMsg::RevokeReply { ballot } => {
                self.handle_revoke_reply(from, ballot);
                Vec::new()
            }
        }
    }

    fn send_reply_seq(&mut self, now: Micros, to: NodeId) -> u64 {
        let seq = self.next_reply_seq;
        self.next_reply_seq += 1;
        self.reply_sent.entry(to).or_default().insert(seq, now);
        seq
    }

    pub fn handle_guard(&mut self, now: Micros, from: NodeId, ballot: Ballot, thresh: u64) -> Outbox {
        if ballot != self.ballot || self.was_revoked(from, ballot) {
            return Vec::new();
        }
        match self.endowed.get(&from) {
            Some(dl) if *dl > now => return Vec::new(),
            Some(_) => {
                self.endowed.remove(&from);
                self.unreplied.remove(&from);
            }
            None => {}
        }
        // A retransmitted Guard while still guarded gets a fresh reply but
        // keeps the original guard timer.
        self.thresh.insert(from, thresh);
        let t = self.timing;
        self.guarded.entry(from).or_insert(now + t.guard - t.delta);
        let seq = self.send_reply_seq(now, from);
        vec![(from, LeaseMsg::GuardReply { ballot, seq })]
    }

    pub fn handle_guard_reply(&mut self, now: Micros, from: NodeId, ballot: Ballot, seq: u64) -> Outbox {
        if ballot != self.ballot || self.guarding.remove(&from).is_none() {
            return Vec::new();
        }
        let t = self.timing;
        self.endowing
            .insert(from, Endowing { deadline: now + t.guard + t.lease + t.delta, ack: seq });
        vec![(from, LeaseMsg::Renew { ballot, ack: seq })]
    }

    pub fn handle_renew(&mut self, now: Micros, from: NodeId, ballot: Ballot, ack: u64) -> Outbox {
        if ballot != self.ballot || self.was_revoked(from, ballot) {
            return Vec::new();
        }
        let anchor = self.reply_sent.get(&from).and_then(|m| m.get(&ack)).copied();
        let lease_end = anchor.map(|a| a + self.timing.lease - self.timing.delta);
        if let Some(sent) = self.reply_sent.get_mut(&from) {
            sent.retain(|&s, _| s >= ack);
        }
        if self.guarded.contains_key(&from) {
            match lease_end {
                Some(end) if end > now => {
                    self.guarded.remove(&from);
                    self.endowed.insert(from, end);
                    let seq = self.send_reply_seq(now, from);
                    vec![(from, LeaseMsg::RenewReply { ballot, seq })]
                }
                _ => Vec::new(),
            }
        } else if let Some(dl) = self.endowed.get_mut(&from) {
            if let Some(end) = lease_end {
                *dl = (*dl).max(end);
            }
            self.unreplied.insert(from);
            Vec::new()
        } else {
            Vec::new()
        }
    }

    pub fn handle_renew_reply(&mut self, now: Micros, from: NodeId, ballot: Ballot, seq: u64) {
        if ballot != self.ballot {
            return;
        }
        let t = self.timing;
        if let Some(e) = self.endowing.get_mut(&from) {
            e.deadline = e.deadline.max(now + t.lease + t.delta);
            e.ack = e.ack.max(seq);
        }
    }

    pub fn handle_revoke(&mut self, from: NodeId, ballot: Ballot) -> Outbox {
        if ballot >= self.ballot {
            self.guarded.remove(&from);
            self.endowed.remove(&from);
            self.unreplied.remove(&from);
        }
        let r = self.revoked.entry(from).or_insert(ballot);
        *r = (*r).max(ballot);
        vec![(from, LeaseMsg::RevokeReply { ballot })]
    }

    pub fn handle_revoke_reply(&mut self, from: NodeId, ballot: Ballot) {
        if let Some(r) = &mut self.revoking {
            if r.ballot == ballot {
                r.waiting.remove(&from);
            }
        }
    }

    /// Begins revoking every grant given under the current ballot.
    pub fn start_revoke(&mut self) -> Outbox {
        self.guarding.clear();
        self.active = false;
        let waiting: BTreeMap<NodeId, Micros> =
            std::mem::take(&mut self.endowing).into_iter().map(|(p, e)| (p, e.deadline)).collect();
        let ballot = self.ballot;
        let out = self.peers().map(|p| (p, LeaseMsg::Revoke { ballot })).collect();
        self.revoking = Some(Revoking { ballot, waiting });
        out
    }

    pub fn is_revoking(&self) -> bool {
        self.revoking.is_some()
    }

    /// Whether the pending revocation has finished; clears it if so.
    pub fn revoke_done(&mut self, now: Micros) -> bool {
        match &mut self.revoking {
            None => true,
            Some(r) => {
                r.waiting.retain(|_, dl| *dl > now);
                if r.waiting.is_empty() {
                    self.revoking = None;
                    true
                } else {
                    false
                }
            }
        }
    }

    /// Drops every entry whose deadline has passed.
    pub fn expire(&mut self, now: Micros) -> Vec<(Intent, NodeId)> {
        let mut gone = Vec::new();
        let mut sweep = |map: &mut BTreeMap<NodeId, Micros>, intent| {
            map.retain(|p, dl| {
                let keep = *dl > now;
                if !keep {
                    gone.push((intent, *p));
                }
                keep
            });
        };
        sweep(&mut self.guarding, Intent::Guarding);
        sweep(&mut self.guarded, Intent::Guarded);
        sweep(&mut self.endowed, Intent::Endowed);
        self.endowing.retain(|p, e| {
            let keep = e.deadline > now;
            if !keep {
                gone.push((Intent::Endowing, *p));
            }
            keep
        });
        if let Some(r) = &mut self.revoking {
            r.waiting.retain(|_, dl| *dl > now);
        }
        for (intent, p) in &gone {
            if *intent == Intent::Endowed {
                self.unreplied.remove(p);
            }
        }
        gone
    }

    /// Periodic grantor duties: Renew to every endowed peer, retransmit or
    /// retry Guards, retransmit pending Revokes.
    pub fn tick(&mut self, now: Micros, highest_accepted: u64) -> Outbox {
        let mut out = Vec::new();
        if let Some(r) = &self.revoking {
            out.extend(r.waiting.keys().map(|&p| (p, LeaseMsg::Revoke { ballot: r.ballot })));
        }
        if !self.active {
            return out;
        }
        let ballot = self.ballot;
        for (&p, e) in &self.endowing {
            out.push((p, LeaseMsg::Renew { ballot, ack: e.ack }));
        }
        let retry: Vec<NodeId> =
            self.peers().filter(|p| !self.endowing.contains_key(p)).collect();
        for p in retry {
            out.push(self.guard_peer(now, p, highest_accepted));
        }
        out
    }

    /// RenewReplies owed to grantors, to be piggybacked on heartbeats.
    pub fn take_renew_replies(&mut self, now: Micros) -> Outbox {
        let owed: Vec<NodeId> = std::mem::take(&mut self.unreplied)
            .into_iter()
            .filter(|p| self.endowed.contains_key(p))
            .collect();
        let ballot = self.ballot;
        owed.into_iter()
            .map(|p| {
                let seq = self.send_reply_seq(now, p);
                (p, LeaseMsg::RenewReply { ballot, seq })
            })
            .collect()
    }

    /// Earliest pending deadline, for arming a wake-up timer.
    pub fn next_deadline(&self) -> Option<Micros> {
        let a = self.guarding.values().copied();
        let b = self.endowing.values().map(|e| e.deadline);
        let c = self.guarded.values().copied();
        let d = self.endowed.values().copied();
        let e = self.revoking.iter().flat_map(|r| r.waiting.values().copied());
        a.chain(b).chain(c).chain(d).chain(e).min()
    }

    /// Grantors whose lease this node currently holds.
    pub fn live_endowed(&self, now: Micros) -> impl Iterator<Item = NodeId> + '_ {
        self.endowed.iter().filter(move |(_, dl)| **dl > now).map(|(p, _)| *p)
    }

    pub fn grant_count(&self, now: Micros) -> usize {
        self.live_endowed(now).count()
    }

    /// Whether this node holds the stable roster at `now`.
    pub fn is_stable(&self, now: Micros, committed_prefix: u64) -> bool {
        if self.revoking.is_some() || self.ballot.is_zero() {
            return false;
        }
        let threshes: Vec<u64> = self
            .live_endowed(now)
            .map(|p| self.thresh.get(&p).copied().unwrap_or(u64::MAX))
            .collect();
        if self.mutation == Some(Mutation::StableIgnoresThresholds) {
            return threshes.len() >= self.m;
        }
        stable_condition(&threshes, self.m, committed_prefix)
    }

    /// Whether this node is granting `peer` a lease under the current ballot.
    pub fn is_granting(&self, peer: NodeId, now: Micros) -> bool {
        self.endowing.get(&peer).is_some_and(|e| e.deadline > now)
            || self
                .revoking
                .as_ref()
                .is_some_and(|r| r.waiting.get(&peer).is_some_and(|dl| *dl > now))
    }

    /// Grantor-side deadline for `peer`, while a grant may be outstanding.
    pub fn grant_deadline(&self, peer: NodeId) -> Option<Micros> {
        self.endowing
            .get(&peer)
            .map(|e| e.deadline)
            .or_else(|| self.revoking.as_ref().and_then(|r| r.waiting.get(&peer).copied()))
    }

    pub fn me(&self) -> NodeId {
        self.me
    }
}

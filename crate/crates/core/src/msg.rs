//! Inputs and outputs of the protocol core.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::lease::LeaseMsg;
use crate::log::{SlotEntry, Snapshot};
use crate::model::{Ballot, Command, Key, Micros, NodeId, RequestId, Roster, Value};

/// Per-site read counts for one key, keyed by the client's preferred node.
pub type SiteCounts = BTreeMap<NodeId, u64>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum PeerMsg {
    Heartbeat {
        ballot: Ballot,
        /// Newest known roster, sent while the receiver may not know it.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        roster: Option<(Ballot, Roster)>,
        commit_upto: u64,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        leases: Vec<LeaseMsg>,
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        read_stats: BTreeMap<Key, SiteCounts>,
    },
    FullRosterRequest,
    Lease(LeaseMsg),
    Prepare {
        ballot: Ballot,
        from_slot: u64,
    },
    PrepareReply {
        ballot: Ballot,
        entries: Vec<SlotEntry>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        snapshot: Option<Snapshot>,
    },
    Accept {
        ballot: Ballot,
        slot: u64,
        batch: Vec<Command>,
    },
    AcceptReply {
        ballot: Ballot,
        slot: u64,
        ok: bool,
    },
    AcceptNote {
        ballot: Ballot,
        slot: u64,
    },
    Commit {
        ballot: Ballot,
        slots: Vec<u64>,
    },
    CatchUpRequest {
        from_slot: u64,
    },
    CatchUpReply {
        entries: Vec<SlotEntry>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        snapshot: Option<Snapshot>,
    },
}

impl PeerMsg {
    pub fn kind(&self) -> &'static str {
        match self {
            PeerMsg::Heartbeat { .. } => "heartbeat",
            PeerMsg::FullRosterRequest => "full_roster_request",
            PeerMsg::Lease(_) => "lease",
            PeerMsg::Prepare { .. } => "prepare",
            PeerMsg::PrepareReply { .. } => "prepare_reply",
            PeerMsg::Accept { .. } => "accept",
            PeerMsg::AcceptReply { .. } => "accept_reply",
            PeerMsg::AcceptNote { .. } => "accept_note",
            PeerMsg::Commit { .. } => "commit",
            PeerMsg::CatchUpRequest { .. } => "catch_up_request",
            PeerMsg::CatchUpReply { .. } => "catch_up_reply",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ClientOp {
    Put { key: Key, value: Value },
    Get { key: Key },
    RosterGet,
    RosterSet { roster: Roster },
    Stats,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientRequest {
    pub request_id: RequestId,
    #[serde(flatten)]
    pub op: ClientOp,
    /// Preferred nodes, nearest first. The first entry is the client's site.
    #[serde(default)]
    pub hints: Vec<NodeId>,
}

impl ClientRequest {
    pub fn new(request_id: RequestId, op: ClientOp) -> Self {
        ClientRequest { request_id, op, hints: Vec::new() }
    }

    pub fn with_hints(mut self, hints: Vec<NodeId>) -> Self {
        self.hints = hints;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeStats {
    pub ballot: Ballot,
    pub stable: bool,
    pub grants: usize,
    pub committed: u64,
    pub executed: u64,
    pub local_reads: u64,
    pub held_reads: u64,
    pub fallback_reads: u64,
    pub redirects: u64,
    /// Auto-tuner counters for the current window (leader only).
    pub key_reads: BTreeMap<Key, SiteCounts>,
    pub key_writes: BTreeMap<Key, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ReplyBody {
    /// `local` is set when the answer came from this node's own state
    /// without a round through the log.
    Value { value: Option<Value>, local: bool },
    WriteOk,
    Redirect { to: Option<NodeId>, ballot: Ballot },
    Unavailable,
    Roster { ballot: Ballot, roster: Roster, stable: bool },
    RosterSet { ballot: Ballot },
    Rejected { reason: String },
    Stats(Box<NodeStats>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientReply {
    pub request_id: RequestId,
    #[serde(flatten)]
    pub body: ReplyBody,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "timer", content = "peer", rename_all = "snake_case")]
pub enum TimerKind {
    Heartbeat,
    Batch,
    PeerFail(NodeId),
    LeaseWake,
    AutoTune,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "input", rename_all = "snake_case")]
pub enum Input {
    Peer { from: NodeId, msg: PeerMsg },
    /// `client` identifies the reply channel; it is opaque to the core.
    Client { client: u64, req: ClientRequest },
    Timer { kind: TimerKind },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "output", rename_all = "snake_case")]
pub enum Output {
    Send { to: NodeId, msg: PeerMsg },
    Reply { client: u64, reply: ClientReply },
    /// Arms (or re-arms) the timer of this kind at a local-clock instant.
    SetTimer { kind: TimerKind, at: Micros },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peer_msg_json_shape() {
        let m = PeerMsg::AcceptNote { ballot: Ballot::new(2, 1), slot: 8 };
        let j = serde_json::to_value(&m).unwrap();
        assert_eq!(j["kind"], "accept_note");
        assert_eq!(j["payload"]["slot"], 8);
        let back: PeerMsg = serde_json::from_value(j).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn input_roundtrip() {
        let i = Input::Client {
            client: 3,
            req: ClientRequest::new(RequestId::new(3, 1), ClientOp::Get { key: "k".into() })
                .with_hints(vec![NodeId(2)]),
        };
        let s = serde_json::to_string(&i).unwrap();
        assert_eq!(serde_json::from_str::<Input>(&s).unwrap(), i);
        let t = Input::Timer { kind: TimerKind::PeerFail(NodeId(4)) };
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<Input>(&s).unwrap(), t);
    }

    #[test]
    fn node_keyed_maps_survive_tagged_input() {
        let mut counts = SiteCounts::new();
        counts.insert(NodeId(2), 7);
        let msg = PeerMsg::Heartbeat {
            ballot: Ballot::new(1, 0),
            roster: None,
            commit_upto: 4,
            leases: Vec::new(),
            read_stats: BTreeMap::from([(Key::from("x"), counts)]),
        };
        let i = Input::Peer { from: NodeId(1), msg };
        let s = serde_json::to_string(&i).unwrap();
        assert_eq!(serde_json::from_str::<Input>(&s).unwrap(), i);
    }
}

//! Foundational domain types: node ids, ballots, rosters, commands and the
//! cluster timing parameters.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Local-clock instant or duration, in microseconds.
pub type Micros = u64;

/// Identifier of a replica, `0 <= id < n`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct NodeId(pub u8);

// Map keys arrive as strings once serde has buffered the enclosing value
// (internally tagged enums, flatten), so both forms are accepted.
impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = NodeId;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a node id")
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> Result<NodeId, E> {
                u8::try_from(v).map(NodeId).map_err(|_| E::custom(format!("node id {v} out of range")))
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> Result<NodeId, E> {
                u64::try_from(v).map_err(|_| E::custom("negative node id")).and_then(|v| self.visit_u64(v))
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<NodeId, E> {
                v.parse::<u64>().map_err(|_| E::custom(format!("bad node id {v:?}"))).and_then(|v| self.visit_u64(v))
            }
        }
        d.deserialize_any(V)
    }
}

impl NodeId {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}", self.0)
    }
}

/// Maximum cluster size supported by [`NodeSet`].
pub const MAX_NODES: usize = 64;

/// Compact set of node ids.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeSet(u64);

impl NodeSet {
    pub const fn empty() -> Self {
        NodeSet(0)
    }

    /// All nodes `0..n`.
    pub fn all(n: u8) -> Self {
        if n as usize >= MAX_NODES {
            NodeSet(u64::MAX)
        } else {
            NodeSet((1u64 << n) - 1)
        }
    }

    pub fn from_bits(bits: u64) -> Self {
        NodeSet(bits)
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn insert(&mut self, id: NodeId) -> bool {
        let had = self.contains(id);
        self.0 |= 1 << id.0;
        !had
    }

    pub fn remove(&mut self, id: NodeId) -> bool {
        let had = self.contains(id);
        self.0 &= !(1 << id.0);
        had
    }

    pub fn contains(self, id: NodeId) -> bool {
        (id.idx() < MAX_NODES) && self.0 & (1 << id.0) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn union(self, other: NodeSet) -> NodeSet {
        NodeSet(self.0 | other.0)
    }

    pub fn difference(self, other: NodeSet) -> NodeSet {
        NodeSet(self.0 & !other.0)
    }

    pub fn is_superset(self, other: NodeSet) -> bool {
        other.0 & !self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = NodeId> {
        (0..MAX_NODES as u8).filter(move |i| self.0 & (1 << i) != 0).map(NodeId)
    }

    pub fn max_id(self) -> Option<NodeId> {
        if self.0 == 0 {
            None
        } else {
            Some(NodeId(63 - self.0.leading_zeros() as u8))
        }
    }
}

impl FromIterator<NodeId> for NodeSet {
    fn from_iter<T: IntoIterator<Item = NodeId>>(iter: T) -> Self {
        let mut s = NodeSet::empty();
        for id in iter {
            s.insert(id);
        }
        s
    }
}

impl Serialize for NodeSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for NodeSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let ids = Vec::<u8>::deserialize(d)?;
        let mut set = NodeSet::empty();
        for id in ids {
            if id as usize >= MAX_NODES {
                return Err(serde::de::Error::custom(format!("node id {id} too large")));
            }
            set.insert(NodeId(id));
        }
        Ok(set)
    }
}

/// Unique ordering token of a roster epoch: a round number concatenated with
/// the proposing node's id. Ordered lexicographically by `(round, node)`.
#[derive(
    Debug,
    Clone,
    Copy,
    Default,
    PartialEq,
    Eq,
    PartialOrd,
    Ord,
    Hash,
    Serialize,
    Deserialize,
)]
pub struct Ballot {
    pub round: u64,
    pub node: NodeId,
}

impl Ballot {
    /// Ballot of the initial empty-roster epoch.
    pub const ZERO: Ballot = Ballot { round: 0, node: NodeId(0) };

    pub const fn new(round: u64, node: u8) -> Self {
        Ballot { round, node: NodeId(node) }
    }

    pub fn is_zero(self) -> bool {
        self == Ballot::ZERO
    }
}

impl fmt::Display for Ballot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.round, self.node.0)
    }
}

/// Composes the next higher ballot owned by `proposer`.
pub fn next_ballot(current: Ballot, proposer: NodeId) -> Ballot {
    Ballot { round: current.round + 1, node: proposer }
}

/// Opaque byte string used for keys and values; ordered bytewise.
///
/// Serialized as a JSON string when it is valid UTF-8, otherwise as an array
/// of byte values.
#[derive(Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Bytes(pub Vec<u8>);

pub type Key = Bytes;
pub type Value = Bytes;

impl Bytes {
    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Smallest byte string strictly greater than `self`.
    pub fn successor(&self) -> Bytes {
        let mut v = self.0.clone();
        v.push(0);
        Bytes(v)
    }
}

impl fmt::Debug for Bytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match std::str::from_utf8(&self.0) {
            Ok(s) => write!(f, "{s:?}"),
            Err(_) => write!(f, "0x{}", hex::encode(&self.0)),
        }
    }
}

impl fmt::Display for Bytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", String::from_utf8_lossy(&self.0))
    }
}

impl From<&str> for Bytes {
    fn from(s: &str) -> Self {
        Bytes(s.as_bytes().to_vec())
    }
}

impl From<String> for Bytes {
    fn from(s: String) -> Self {
        Bytes(s.into_bytes())
    }
}

impl From<Vec<u8>> for Bytes {
    fn from(v: Vec<u8>) -> Self {
        Bytes(v)
    }
}

impl Serialize for Bytes {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match std::str::from_utf8(&self.0) {
            Ok(text) => s.serialize_str(text),
            Err(_) => s.collect_seq(self.0.iter()),
        }
    }
}

impl<'de> Deserialize<'de> for Bytes {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Text(String),
            Raw(Vec<u8>),
        }
        Ok(match Repr::deserialize(d)? {
            Repr::Text(s) => Bytes(s.into_bytes()),
            Repr::Raw(v) => Bytes(v),
        })
    }
}

/// Half-open key range `[lo, hi)`; `hi = None` means unbounded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyRange {
    pub lo: Key,
    #[serde(default)]
    pub hi: Option<Key>,
}

impl KeyRange {
    /// The whole keyspace.
    pub fn all() -> Self {
        KeyRange { lo: Bytes::default(), hi: None }
    }

    pub fn new(lo: impl Into<Key>, hi: Option<Key>) -> Self {
        KeyRange { lo: lo.into(), hi }
    }

    /// Range covering exactly one key.
    pub fn single(key: &Key) -> Self {
        KeyRange { lo: key.clone(), hi: Some(key.successor()) }
    }

    pub fn contains(&self, key: &Key) -> bool {
        *key >= self.lo && self.hi.as_ref().is_none_or(|hi| key < hi)
    }
}

/// One entry of a roster's responder map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RangeAssignment {
    #[serde(flatten)]
    pub range: KeyRange,
    pub responders: NodeSet,
}

/// Cluster metadata: the leader plus per-key-range responder sets.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roster {
    pub leader: Option<NodeId>,
    #[serde(default)]
    pub ranges: Vec<RangeAssignment>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RosterError {
    #[error("empty key range starting at {0:?}")]
    EmptyRange(Key),
    #[error("ranges overlap or are unsorted at {0:?}")]
    Overlap(Key),
    #[error("node id {0} out of range for cluster of {1}")]
    IdOutOfRange(u8, u8),
}

impl Roster {
    /// The initial roster: no leader, no responders.
    pub fn empty() -> Self {
        Roster::default()
    }

    /// Leader-only roster (classic leader leases).
    pub fn leader_only(leader: NodeId) -> Self {
        Roster { leader: Some(leader), ranges: Vec::new() }
    }

    /// Leader plus one responder set for the entire keyspace.
    pub fn full(leader: NodeId, responders: NodeSet) -> Self {
        Roster {
            leader: Some(leader),
            ranges: vec![RangeAssignment { range: KeyRange::all(), responders }],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.leader.is_none() && self.ranges.is_empty()
    }

    /// Responders for `key`: the matching range's set plus the leader.
    pub fn responders_of(&self, key: &Key) -> NodeSet {
        let mut set = NodeSet::empty();
        if let Some(leader) = self.leader {
            set.insert(leader);
        }
        let idx = self.ranges.partition_point(|a| a.range.lo <= *key);
        if idx > 0 {
            let a = &self.ranges[idx - 1];
            if a.range.contains(key) {
                set = set.union(a.responders);
            }
        }
        set
    }

    /// Whether `node` is the leader or appears in any responder set.
    pub fn has_role(&self, node: NodeId) -> bool {
        self.leader == Some(node) || self.ranges.iter().any(|a| a.responders.contains(node))
    }

    /// Copy of this roster with `node` removed from every responder set.
    pub fn without_responder(&self, node: NodeId) -> Roster {
        let mut r = self.clone();
        for a in &mut r.ranges {
            a.responders.remove(node);
        }
        r
    }

    /// Checks the structural invariants for a cluster of `n` nodes.
    pub fn validate(&self, n: u8) -> Result<(), RosterError> {
        if let Some(l) = self.leader {
            if l.0 >= n {
                return Err(RosterError::IdOutOfRange(l.0, n));
            }
        }
        let mut prev_hi: Option<Option<&Key>> = None;
        for a in &self.ranges {
            if let Some(hi) = &a.range.hi {
                if *hi <= a.range.lo {
                    return Err(RosterError::EmptyRange(a.range.lo.clone()));
                }
            }
            match prev_hi {
                None => {}
                Some(None) => return Err(RosterError::Overlap(a.range.lo.clone())),
                Some(Some(hi)) => {
                    if a.range.lo < *hi {
                        return Err(RosterError::Overlap(a.range.lo.clone()));
                    }
                }
            }
            prev_hi = Some(a.range.hi.as_ref());
            if let Some(bad) = a.responders.max_id().filter(|id| id.0 >= n) {
                return Err(RosterError::IdOutOfRange(bad.0, n));
            }
        }
        Ok(())
    }
}

/// Client-assigned request token; unique per logical request.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct RequestId {
    pub client: u64,
    pub seq: u64,
}

impl RequestId {
    pub const fn new(client: u64, seq: u64) -> Self {
        RequestId { client, seq }
    }
}

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.client, self.seq)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum CommandOp {
    Put { key: Key, value: Value },
    Get { key: Key },
    /// Gap filler proposed during leader step-up.
    Noop,
}

/// A state-machine command carried in a log slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Command {
    pub request_id: RequestId,
    #[serde(flatten)]
    pub op: CommandOp,
}

impl Command {
    pub fn put(request_id: RequestId, key: impl Into<Key>, value: impl Into<Value>) -> Self {
        Command { request_id, op: CommandOp::Put { key: key.into(), value: value.into() } }
    }

    pub fn get(request_id: RequestId, key: impl Into<Key>) -> Self {
        Command { request_id, op: CommandOp::Get { key: key.into() } }
    }

    pub fn noop() -> Self {
        Command { request_id: RequestId::new(u64::MAX, 0), op: CommandOp::Noop }
    }

    /// Key written by this command, if it is a write.
    pub fn write_key(&self) -> Option<&Key> {
        match &self.op {
            CommandOp::Put { key, .. } => Some(key),
            _ => None,
        }
    }
}

/// Seeded protocol bugs used to demonstrate that the checkers catch them.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    /// Commit on a bare majority, ignoring responder coverage.
    CommitIgnoresResponders,
    /// Stable check counts grants only, ignoring safety thresholds.
    StableIgnoresThresholds,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("cluster size must be odd and in 3..={MAX_NODES}, got {0}")]
    BadSize(u8),
    #[error("timeouts must satisfy hb_send < hb_fail < guard = lease: {0}")]
    BadTimeouts(String),
    #[error("batch interval must be positive")]
    BadBatchInterval,
}

/// Cluster-wide protocol parameters. All durations are in microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub n: u8,
    pub guard_us: Micros,
    pub lease_us: Micros,
    /// Bound on relative clock drift over one lease window.
    pub delta_us: Micros,
    pub hb_send_us: Micros,
    pub hb_fail_us: Micros,
    /// Failure timeouts are drawn uniformly from `hb_fail ± hb_fail_jitter`.
    pub hb_fail_jitter_us: Micros,
    pub batch_interval_us: Micros,
    /// Send `AcceptNote`s to responders on accept.
    pub early_notes: bool,
    pub auto_tune: bool,
    pub tune_window_us: Micros,
    /// Take a snapshot every this many executed slots; 0 disables.
    pub snapshot_every: u64,
    /// Slots carried by one catch-up reply.
    pub catchup_chunk: u64,
    #[doc(hidden)]
    pub mutation: Option<Mutation>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            n: 5,
            guard_us: 2_500_000,
            lease_us: 2_500_000,
            delta_us: 100_000,
            hb_send_us: 120_000,
            hb_fail_us: 1_200_000,
            hb_fail_jitter_us: 300_000,
            batch_interval_us: 1_000,
            early_notes: true,
            auto_tune: false,
            tune_window_us: 5_000_000,
            snapshot_every: 0,
            catchup_chunk: 256,
            mutation: None,
        }
    }
}

impl ClusterConfig {
    pub fn with_n(n: u8) -> Self {
        ClusterConfig { n, ..Default::default() }
    }

    /// Majority quorum size.
    pub fn m(&self) -> usize {
        (self.n as usize + 1) / 2
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n < 3 || self.n % 2 == 0 || self.n as usize > MAX_NODES {
            return Err(ConfigError::BadSize(self.n));
        }
        let fail_max = self.hb_fail_us + self.hb_fail_jitter_us;
        let fail_min = self.hb_fail_us.saturating_sub(self.hb_fail_jitter_us);
        if !(self.hb_send_us < fail_min && fail_max < self.guard_us && self.guard_us == self.lease_us)
        {
            return Err(ConfigError::BadTimeouts(format!(
                "hb_send={} hb_fail={}±{} guard={} lease={}",
                self.hb_send_us, self.hb_fail_us, self.hb_fail_jitter_us, self.guard_us, self.lease_us
            )));
        }
        if self.delta_us >= self.lease_us {
            return Err(ConfigError::BadTimeouts("delta must be below lease".into()));
        }
        if self.batch_interval_us == 0 {
            return Err(ConfigError::BadBatchInterval);
        }
        Ok(())
    }

    pub fn all_nodes(&self) -> NodeSet {
        NodeSet::all(self.n)
    }
}

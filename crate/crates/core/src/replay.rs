//! Recorded event logs and their replay through a fresh core.

use serde::{Deserialize, Serialize};

use crate::model::{ClusterConfig, Micros, NodeId};
use crate::msg::Input;
use crate::node::Node;

/// Header line of a recorded event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordHeader {
    pub node: NodeId,
    pub seed: u64,
    pub start: Micros,
    pub config: ClusterConfig,
}

/// One input delivered to the core, with the digest observed after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub now: Micros,
    pub input: Input,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
}

/// Replays `events` through a new core and returns the digest after each.
pub fn replay(header: &RecordHeader, events: &[EventRecord]) -> Vec<String> {
    let mut node = Node::new(header.node, header.config.clone(), header.seed);
    node.start(header.start);
    events
        .iter()
        .map(|e| {
            node.step(e.now, e.input.clone());
            node.digest()
        })
        .collect()
}

/// Index of the first event whose recorded digest differs from replay.
pub fn first_divergence(header: &RecordHeader, events: &[EventRecord]) -> Option<usize> {
    replay(header, events)
        .iter()
        .zip(events)
        .position(|(d, e)| e.digest.as_ref().is_some_and(|rec| rec != d))
}

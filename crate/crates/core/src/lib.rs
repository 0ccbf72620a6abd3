//! Protocol core for a replicated key-value store with local linearizable
//! reads at any responder, granted through all-to-all roster leases.
//!
//! The core is a pure, deterministic state machine ([`Node`]) that consumes
//! [`Input`]s stamped with the local clock and produces [`Output`]s. The
//! simulator and the network daemon host the same core.

pub mod consensus;
pub mod lease;
pub mod log;
pub mod model;
pub mod msg;
pub mod node;
pub mod read;
pub mod replay;
pub mod tune;

pub use lease::{stable_condition, LeaseMsg, LeaseState};
pub use log::{commit_condition, ReplicaLog};
pub use model::*;
pub use msg::*;
pub use node::Node;
pub use read::ReadDecision;

//! Networked deployment of the replicated store: wire protocol, daemon,
//! client library, workload driver and configuration.

pub mod bench;
pub mod client;
pub mod config;
pub mod server;
pub mod wire;

pub use client::KvClient;
pub use config::{NodeConfig, PeerAddr};
pub use server::{Running, Server};

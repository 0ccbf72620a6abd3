//! Deterministic discrete-event simulation of a cluster of protocol cores.

pub mod client;
pub mod clock;
pub mod drift;
pub mod engine;
pub mod expect;
pub mod explore;
pub mod faults;
pub mod metrics;
pub mod monitor;
pub mod network;
pub mod scenario;

pub use engine::{Sim, SimEvent, SimOptions, SimResult};
pub use scenario::{Action, Scenario};

/// Runs a scenario to completion.
pub fn run_scenario(scenario: Scenario, seed: u64, trace: bool) -> SimResult {
    Sim::new(scenario, seed, SimOptions { trace, ..Default::default() }).run()
}

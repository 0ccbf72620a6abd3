//! Scenario files: topology, timing, clients, workload and a fault script.

use bodega_core::{ClusterConfig, NodeId, Roster};
use serde::{Deserialize, Serialize};

use crate::clock::DriftSpec;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("invalid scenario field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("scenario parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid { field: field.into(), reason: reason.into() }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub config: ClusterConfig,
    /// Round-trip times between nodes in milliseconds.
    pub rtt_ms: Vec<Vec<f64>>,
    #[serde(default)]
    pub jitter_ms: f64,
    #[serde(default)]
    pub drop_prob: f64,
    #[serde(default)]
    pub drift: DriftSpec,
    /// Round trip between a client and the server at its own site.
    #[serde(default = "default_client_rtt")]
    pub client_rtt_ms: f64,
    #[serde(default)]
    pub clients: Vec<ClientGroup>,
    #[serde(default)]
    pub workload: Workload,
    /// Announced by its leader (or node 0) at time zero.
    #[serde(default)]
    pub initial_roster: Option<Roster>,
    pub duration_ms: f64,
    #[serde(default)]
    pub events: Vec<ScriptEvent>,
    /// Overrides the client unhold timeout.
    #[serde(default)]
    pub unhold_ms: Option<f64>,
}

fn default_client_rtt() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientGroup {
    pub site: NodeId,
    pub count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KeyDist {
    Uniform,
    Zipf { theta: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Workload {
    pub keys: u32,
    pub value_size: usize,
    pub write_ratio: f64,
    pub distribution: KeyDist,
    pub think_ms: f64,
    /// Clients start issuing at this instant.
    pub start_ms: f64,
}

impl Default for Workload {
    fn default() -> Self {
        Workload {
            keys: 16,
            value_size: 8,
            write_ratio: 0.1,
            distribution: KeyDist::Uniform,
            think_ms: 0.0,
            start_ms: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptEvent {
    pub at_ms: f64,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Crash { node: NodeId },
    /// Cuts both directions between `a` and `b` for `for_ms`.
    Partition { a: NodeId, b: NodeId, for_ms: f64 },
    /// Cuts every link of `node` for `for_ms`.
    Isolate { node: NodeId, for_ms: f64 },
    RosterSet { node: NodeId, roster: Roster },
    /// One-off client operations issued from a client at `site`.
    Put { site: NodeId, key: String, value: String },
    Get { site: NodeId, key: String },
}

impl Scenario {
    pub fn from_json(s: &str) -> Result<Self, ScenarioError> {
        let sc: Scenario = serde_json::from_str(s)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn n(&self) -> usize {
        self.config.n as usize
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.config.validate().map_err(|e| invalid("config", e.to_string()))?;
        let n = self.n();
        if self.rtt_ms.len() != n {
            return Err(invalid("rtt_ms", format!("{} rows for {} nodes", self.rtt_ms.len(), n)));
        }
        for (i, row) in self.rtt_ms.iter().enumerate() {
            if row.len() != n {
                return Err(invalid(format!("rtt_ms[{i}]"), format!("{} columns for {} nodes", row.len(), n)));
            }
            if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(invalid(format!("rtt_ms[{i}]"), format!("delay {v} is negative")));
            }
        }
        if !(self.jitter_ms >= 0.0) {
            return Err(invalid("jitter_ms", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(invalid("drop_prob", "must be within [0, 1]"));
        }
        if !(self.client_rtt_ms >= 0.0) {
            return Err(invalid("client_rtt_ms", "must be non-negative"));
        }
        if !(self.duration_ms > 0.0) {
            return Err(invalid("duration_ms", "must be positive"));
        }
        if let DriftSpec::Ppm { ppm } = &self.drift {
            let bound = crate::clock::max_drift_ppm(&self.config);
            if ppm.len() != n {
                return Err(invalid("drift.ppm", format!("{} rates for {} nodes", ppm.len(), n)));
            }
            if ppm.iter().any(|p| p.abs() > bound) {
                return Err(invalid("drift.ppm", format!("rates must be within +-{bound}")));
            }
        }
        for (i, c) in self.clients.iter().enumerate() {
            if c.site.idx() >= n {
                return Err(invalid(format!("clients[{i}].site"), "no such node"));
            }
        }
        let w = &self.workload;
        if !(0.0..=1.0).contains(&w.write_ratio) {
            return Err(invalid("workload.write_ratio", "must be within [0, 1]"));
        }
        if w.keys == 0 {
            return Err(invalid("workload.keys", "must be positive"));
        }
        if let KeyDist::Zipf { theta } = w.distribution {
            if !(theta > 0.0) {
                return Err(invalid("workload.distribution.theta", "must be positive"));
            }
        }
        if let Some(r) = &self.initial_roster {
            r.validate(self.config.n).map_err(|e| invalid("initial_roster", e.to_string()))?;
        }
        for (i, e) in self.events.iter().enumerate() {
            let node_ok = |p: NodeId| p.idx() < n;
            let bad = match &e.action {
                Action::Crash { node } | Action::Isolate { node, .. } => !node_ok(*node),
                Action::Partition { a, b, .. } => !node_ok(*a) || !node_ok(*b),
                Action::RosterSet { node, roster } => {
                    if let Err(err) = roster.validate(self.config.n) {
                        return Err(invalid(format!("events[{i}].roster"), err.to_string()));
                    }
                    !node_ok(*node)
                }
                Action::Put { site, .. } | Action::Get { site, .. } => !node_ok(*site),
            };
            if bad {
                return Err(invalid(format!("events[{i}]"), "refers to a node outside the cluster"));
            }
            if !(e.at_ms >= 0.0) {
                return Err(invalid(format!("events[{i}].at_ms"), "must be non-negative"));
            }
        }
        Ok(())
    }
}

/// A five-site wide-area topology (round trips in ms). Site 0 sits in the
/// middle; site 4 is far from everything.
pub fn geo_rtt_ms() -> Vec<Vec<f64>> {
    vec![
        vec![0.0, 66.0, 98.0, 118.0, 158.0],
        vec![66.0, 0.0, 136.0, 176.0, 90.0],
        vec![98.0, 136.0, 0.0, 196.0, 222.0],
        vec![118.0, 176.0, 196.0, 0.0, 256.0],
        vec![158.0, 90.0, 222.0, 256.0, 0.0],
    ]
}

/// Every pair at the same round trip.
pub fn uniform_rtt_ms(n: usize, rtt: f64) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { 0.0 } else { rtt }).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> String {
        r#"{"config":{"n":3},"rtt_ms":[[0,10,10],[10,0,10],[10,10,0]],"duration_ms":100}"#.into()
    }

    #[test]
    fn minimal_parses() {
        let s = Scenario::from_json(&base()).unwrap();
        assert_eq!(s.n(), 3);
        assert_eq!(s.client_rtt_ms, 1.0);
    }

    #[test]
    fn errors_name_the_field() {
        let bad = base().replace("[10,0,10]", "[10,0]");
        let e = Scenario::from_json(&bad).unwrap_err().to_string();
        assert!(e.contains("rtt_ms[1]"), "{e}");

        let bad = base().replace(r#""duration_ms":100"#, r#""duration_ms":100,"workload":{"write_ratio":2}"#);
        let e = Scenario::from_json(&bad).unwrap_err().to_string();
        assert!(e.contains("workload.write_ratio"), "{e}");

        let bad = base().replace(
            r#""duration_ms":100"#,
            r#""duration_ms":100,"events":[{"at_ms":5,"action":"crash","node":7}]"#,
        );
        let e = Scenario::from_json(&bad).unwrap_err().to_string();
        assert!(e.contains("events[0]"), "{e}");
    }

    #[test]
    fn geo_is_symmetric() {
        let g = geo_rtt_ms();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(g[i][j], g[j][i]);
            }
        }
    }
}

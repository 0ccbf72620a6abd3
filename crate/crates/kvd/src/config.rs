use std::net::SocketAddr;
use std::path::PathBuf;

use bodega_core::{ClusterConfig, NodeId, Roster};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Addresses of one cluster member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerAddr {
    pub id: NodeId,
    pub peer_addr: SocketAddr,
    pub client_addr: SocketAddr,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub id: NodeId,
    /// Every member, this node included, in id order.
    pub peers: Vec<PeerAddr>,
    /// Defaults to this node's entry in `peers`.
    #[serde(default)]
    pub peer_listen: Option<SocketAddr>,
    #[serde(default)]
    pub client_listen: Option<SocketAddr>,
    #[serde(default)]
    pub cluster: ClusterConfig,
    /// Announced by its leader once the daemon is up.
    #[serde(default)]
    pub initial_roster: Option<Roster>,
    #[serde(default)]
    pub seed: u64,
    /// Write every core input to this JSONL file for replay.
    #[serde(default)]
    pub record: Option<PathBuf>,
}

impl NodeConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let cfg: NodeConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.cluster.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let n = self.cluster.n as usize;
        if self.peers.len() != n {
            return Err(ConfigError::Invalid(format!("{} peers listed for a cluster of {n}", self.peers.len())));
        }
        if let Some(p) = self.peers.iter().enumerate().find(|(i, p)| p.id.idx() != *i) {
            return Err(ConfigError::Invalid(format!("peer {} listed at position {}", p.1.id, p.0)));
        }
        if self.id.idx() >= n {
            return Err(ConfigError::Invalid(format!("node id {} outside the cluster", self.id)));
        }
        if let Some(r) = &self.initial_roster {
            r.validate(self.cluster.n).map_err(|e| ConfigError::Invalid(format!("initial_roster: {e}")))?;
        }
        Ok(())
    }

    pub fn me(&self) -> &PeerAddr {
        &self.peers[self.id.idx()]
    }

    pub fn peer_listen(&self) -> SocketAddr {
        self.peer_listen.unwrap_or(self.me().peer_addr)
    }

    pub fn client_listen(&self) -> SocketAddr {
        self.client_listen.unwrap_or(self.me().client_addr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn peers(n: u8) -> Vec<PeerAddr> {
        (0..n)
            .map(|i| PeerAddr {
                id: NodeId(i),
                peer_addr: format!("127.0.0.1:{}", 7000 + i as u16).parse().unwrap(),
                client_addr: format!("127.0.0.1:{}", 8000 + i as u16).parse().unwrap(),
            })
            .collect()
    }

    #[test]
    fn peer_count_must_match() {
        let cfg = NodeConfig {
            id: NodeId(0),
            peers: peers(3),
            peer_listen: None,
            client_listen: None,
            cluster: ClusterConfig::with_n(5),
            initial_roster: None,
            seed: 0,
            record: None,
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("3 peers"));
        let ok = NodeConfig { cluster: ClusterConfig::with_n(3), ..cfg };
        ok.validate().unwrap();
        assert_eq!(ok.client_listen().port(), 8000);
    }

    #[test]
    fn timing_rule_enforced() {
        let mut cluster = ClusterConfig::with_n(3);
        cluster.hb_fail_us = cluster.lease_us;
        let cfg = NodeConfig {
            id: NodeId(0),
            peers: peers(3),
            peer_listen: None,
            client_listen: None,
            cluster,
            initial_roster: None,
            seed: 0,
            record: None,
        };
        assert!(cfg.validate().is_err());
    }
}

//! Analytic latency symbols for a topology: client-to-leader round trip `l`,
//! client-to-nearest `c`, and the times for the leader to hear back from a
//! majority (`m`), a super majority (`M`) and every node (`N`).

use bodega_core::{Micros, NodeId};
use serde::Serialize;

use crate::network::NetworkModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LatencyExpectation {
    pub l: Micros,
    pub c: Micros,
    pub m_t: Micros,
    pub super_t: Micros,
    pub n_t: Micros,
}

/// Round trip from `from` until the `k`-th fastest node (itself included at
/// zero) has answered.
pub fn quorum_time(net: &NetworkModel, from: NodeId, k: usize) -> Micros {
    let mut rtts: Vec<Micros> = (0..net.n()).map(|j| net.rtt(from, NodeId(j as u8))).collect();
    rtts.sort_unstable();
    rtts[k - 1]
}

impl LatencyExpectation {
    /// For a client co-located with `site` whose round trip to its own server
    /// is `client_rtt`.
    pub fn compute(net: &NetworkModel, leader: NodeId, site: NodeId, client_rtt: Micros) -> Self {
        let n = net.n();
        let m = n.div_ceil(2);
        let sup = (3 * n).div_ceil(4);
        LatencyExpectation {
            l: net.rtt(site, leader) + client_rtt,
            c: client_rtt,
            m_t: quorum_time(net, leader, m),
            super_t: quorum_time(net, leader, sup),
            n_t: quorum_time(net, leader, n),
        }
    }

    /// Local read at a responder: one round trip to the co-located server.
    pub fn responder_read(&self) -> Micros {
        self.c
    }

    /// Write through the leader waiting for every responder.
    pub fn all_responder_write(&self) -> Micros {
        self.l + self.n_t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::geo_rtt_ms;

    #[test]
    fn ordering_holds_on_geo() {
        let net = NetworkModel::from_rtt_ms(&geo_rtt_ms(), 0.0, 0.0);
        for s in 0..5 {
            let e = LatencyExpectation::compute(&net, NodeId(0), NodeId(s), 1000);
            assert!(e.c <= e.l);
            assert!(e.m_t <= e.super_t && e.super_t <= e.n_t);
        }
        let e = LatencyExpectation::compute(&net, NodeId(0), NodeId(2), 1000);
        assert_eq!(e.m_t, 98_000);
        assert_eq!(e.super_t, 118_000);
        assert_eq!(e.n_t, 158_000);
        assert_eq!(e.l, 99_000);
    }
}

//! Message delays, loss and partitions between nodes.

use std::collections::BTreeMap;

use bodega_core::{Micros, NodeId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct NetworkModel {
    /// One-way base delay per ordered pair, in microseconds.
    base: Vec<Vec<Micros>>,
    jitter: Micros,
    drop_prob: f64,
    /// Blocked ordered pairs and when they heal.
    blocked: BTreeMap<(NodeId, NodeId), Micros>,
}

impl NetworkModel {
    /// `rtt_ms[i][j]` is the round trip between nodes `i` and `j`.
    pub fn from_rtt_ms(rtt_ms: &[Vec<f64>], jitter_ms: f64, drop_prob: f64) -> Self {
        let base = rtt_ms
            .iter()
            .map(|row| row.iter().map(|r| (r * 500.0).round() as Micros).collect())
            .collect();
        NetworkModel { base, jitter: (jitter_ms * 1000.0).round() as Micros, drop_prob, blocked: BTreeMap::new() }
    }

    pub fn n(&self) -> usize {
        self.base.len()
    }

    pub fn one_way(&self, from: NodeId, to: NodeId) -> Micros {
        self.base[from.idx()][to.idx()]
    }

    pub fn rtt(&self, a: NodeId, b: NodeId) -> Micros {
        self.one_way(a, b) + self.one_way(b, a)
    }

    pub fn block(&mut self, from: NodeId, to: NodeId, until: Micros) {
        let e = self.blocked.entry((from, to)).or_insert(0);
        *e = (*e).max(until);
    }

    pub fn heal_all(&mut self) {
        self.blocked.clear();
    }

    pub fn is_blocked(&self, from: NodeId, to: NodeId, now: Micros) -> bool {
        self.blocked.get(&(from, to)).is_some_and(|until| *until > now)
    }

    /// Delay for one message sent now, or `None` if it is lost.
    pub fn sample(&self, from: NodeId, to: NodeId, now: Micros, rng: &mut ChaCha8Rng) -> Option<Micros> {
        if from == to {
            return Some(0);
        }
        if self.is_blocked(from, to, now) {
            return None;
        }
        if self.drop_prob > 0.0 && rng.random_bool(self.drop_prob) {
            return None;
        }
        let j = if self.jitter > 0 { rng.random_range(0..=self.jitter) } else { 0 };
        Some(self.one_way(from, to) + j)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn partition_blocks_until_heal() {
        let mut net = NetworkModel::from_rtt_ms(&[vec![0.0, 40.0], vec![40.0, 0.0]], 0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(net.sample(NodeId(0), NodeId(1), 0, &mut rng), Some(20_000));
        net.block(NodeId(0), NodeId(1), 500);
        assert_eq!(net.sample(NodeId(0), NodeId(1), 499, &mut rng), None);
        assert_eq!(net.sample(NodeId(1), NodeId(0), 499, &mut rng), Some(20_000));
        assert_eq!(net.sample(NodeId(0), NodeId(1), 500, &mut rng), Some(20_000));
    }

    #[test]
    fn jitter_bounded() {
        let net = NetworkModel::from_rtt_ms(&[vec![0.0, 10.0], vec![10.0, 0.0]], 2.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let d = net.sample(NodeId(1), NodeId(0), 0, &mut rng).unwrap();
            assert!((5_000..=7_000).contains(&d));
        }
    }
}

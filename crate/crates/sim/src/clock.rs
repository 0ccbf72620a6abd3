//! Per-node virtual clocks with a constant drift rate.
//!
//! Local time is `t + t * ppm / 1e6` for real time `t`. Two clocks at the
//! opposite ends of the envelope `[-rho, +rho]` diverge by `2 * rho * L`
//! over a window of length `L`, so `rho = delta / (2 * lease)` keeps the
//! divergence within `delta`.

use bodega_core::{ClusterConfig, Micros};
use serde::{Deserialize, Serialize};

const MILLION: i128 = 1_000_000;

/// How drift rates are assigned to nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DriftSpec {
    #[default]
    None,
    /// Nodes alternate between the two ends of the envelope.
    Extreme,
    /// Uniform in the envelope, drawn from the run seed.
    Random,
    /// Explicit rates in parts per million.
    Ppm { ppm: Vec<i64> },
}

/// Largest drift rate in ppm the lease timing tolerates.
pub fn max_drift_ppm(cfg: &ClusterConfig) -> i64 {
    (cfg.delta_us as i128 * MILLION / (2 * cfg.lease_us as i128)) as i64
}

#[derive(Debug, Clone)]
pub struct ClockModel {
    ppm: Vec<i64>,
}

impl ClockModel {
    pub fn new(ppm: Vec<i64>) -> Self {
        assert!(ppm.iter().all(|p| *p > -(MILLION as i64)), "clock must run forward");
        ClockModel { ppm }
    }

    pub fn ideal(n: usize) -> Self {
        ClockModel { ppm: vec![0; n] }
    }

    pub fn ppm(&self, node: usize) -> i64 {
        self.ppm[node]
    }

    pub fn local(&self, node: usize, real: Micros) -> Micros {
        let r = real as i128;
        (r + (r * self.ppm[node] as i128).div_euclid(MILLION)) as Micros
    }

    /// Earliest real instant at which the node's clock reads at least `local`.
    pub fn real_at(&self, node: usize, local: Micros) -> Micros {
        let rate = MILLION + self.ppm[node] as i128;
        let mut t = ((local as i128 * MILLION) / rate).max(0) as Micros;
        while t > 0 && self.local(node, t - 1) >= local {
            t -= 1;
        }
        while self.local(node, t) < local {
            t += 1;
        }
        t
    }
}

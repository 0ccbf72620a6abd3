use std::collections::BTreeMap;

use bodega_core::{Micros, NodeId};
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct ReadSample {
    pub client: u64,
    pub site: NodeId,
    pub invoke: Micros,
    pub latency: Micros,
    /// Answered by the site's own server from local state, with no protocol
    /// messages sent on its behalf.
    pub local: bool,
    pub answered_by: NodeId,
}

#[derive(Debug, Clone, Serialize)]
pub struct WriteSample {
    pub client: u64,
    pub site: NodeId,
    pub invoke: Micros,
    pub latency: Micros,
}

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub reads: Vec<ReadSample>,
    pub writes: Vec<WriteSample>,
    /// Per node: how many reads it was involved in.
    pub touched: Vec<u64>,
    /// Protocol messages between distinct nodes.
    pub messages: u64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Dist {
    pub count: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
}

impl Dist {
    pub fn of(mut xs: Vec<Micros>) -> Dist {
        if xs.is_empty() {
            return Dist::default();
        }
        xs.sort_unstable();
        let pick = |q: f64| xs[((xs.len() as f64 - 1.0) * q).round() as usize] as f64 / 1000.0;
        Dist {
            count: xs.len(),
            mean_ms: xs.iter().sum::<u64>() as f64 / xs.len() as f64 / 1000.0,
            p50_ms: pick(0.5),
            p99_ms: pick(0.99),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SiteSummary {
    pub reads: Dist,
    pub writes: Dist,
    pub local_read_fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub reads: Dist,
    pub writes: Dist,
    pub per_site: BTreeMap<NodeId, SiteSummary>,
    pub touched: Vec<u64>,
    pub messages: u64,
}

impl Metrics {
    pub fn new(n: usize) -> Self {
        Metrics { reads: Vec::new(), writes: Vec::new(), touched: vec![0; n], messages: 0 }
    }

    /// Fraction of reads invoked at or after `from` from sites in `sites`
    /// that were served locally.
    pub fn local_fraction(&self, from: Micros, sites: impl Fn(NodeId) -> bool) -> (usize, f64) {
        let sel: Vec<&ReadSample> = self.reads.iter().filter(|r| r.invoke >= from && sites(r.site)).collect();
        if sel.is_empty() {
            return (0, 0.0);
        }
        let local = sel.iter().filter(|r| r.local).count();
        (sel.len(), local as f64 / sel.len() as f64)
    }

    pub fn summary(&self) -> Summary {
        let mut per_site = BTreeMap::new();
        let sites: std::collections::BTreeSet<NodeId> =
            self.reads.iter().map(|r| r.site).chain(self.writes.iter().map(|w| w.site)).collect();
        for s in sites {
            let reads: Vec<&ReadSample> = self.reads.iter().filter(|r| r.site == s).collect();
            let local = reads.iter().filter(|r| r.local).count();
            per_site.insert(
                s,
                SiteSummary {
                    reads: Dist::of(reads.iter().map(|r| r.latency).collect()),
                    writes: Dist::of(self.writes.iter().filter(|w| w.site == s).map(|w| w.latency).collect()),
                    local_read_fraction: if reads.is_empty() { 0.0 } else { local as f64 / reads.len() as f64 },
                },
            );
        }
        Summary {
            reads: Dist::of(self.reads.iter().map(|r| r.latency).collect()),
            writes: Dist::of(self.writes.iter().map(|w| w.latency).collect()),
            per_site,
            touched: self.touched.clone(),
            messages: self.messages,
        }
    }
}

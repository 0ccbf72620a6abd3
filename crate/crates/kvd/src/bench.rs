//! Workload driver for a running cluster.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use bodega_core::{Key, NodeId, Value};
use bodega_lincheck::{History, OpKind, Outcome, Record};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Zipf};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use crate::client::KvClient;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KeyDistribution {
    Uniform,
    Zipfian {
        #[serde(default = "default_theta")]
        theta: f64,
    },
}

fn default_theta() -> f64 {
    0.99
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mode {
    ClosedLoop,
    /// Each client starts `rate` operations per second regardless of
    /// completions.
    OpenLoop { rate: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Placement {
    pub site: NodeId,
    pub count: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub keys: u32,
    pub value_size: usize,
    pub write_ratio: f64,
    #[serde(default = "uniform")]
    pub distribution: KeyDistribution,
    pub clients: Vec<Placement>,
    #[serde(default = "closed")]
    pub mode: Mode,
    pub duration_ms: u64,
    #[serde(default)]
    pub seed: u64,
}

fn uniform() -> KeyDistribution {
    KeyDistribution::Uniform
}

fn closed() -> Mode {
    Mode::ClosedLoop
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.write_ratio) {
            return Err("write_ratio must be within [0, 1]".into());
        }
        if self.keys == 0 {
            return Err("keys must be positive".into());
        }
        if let KeyDistribution::Zipfian { theta } = self.distribution {
            if !(theta > 0.0) {
                return Err("zipfian theta must be positive".into());
            }
        }
        if let Mode::OpenLoop { rate } = self.mode {
            if !(rate > 0.0) {
                return Err("open-loop rate must be positive".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Sample {
    pub client: u64,
    pub site: NodeId,
    pub op: &'static str,
    pub key: String,
    pub start_us: u64,
    pub latency_us: u64,
    pub ok: bool,
    pub local: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct LatencySummary {
    pub count: usize,
    pub mean_ms: f64,
    pub p99_ms: f64,
}

impl LatencySummary {
    fn of(mut v: Vec<u64>) -> Self {
        if v.is_empty() {
            return LatencySummary::default();
        }
        v.sort_unstable();
        let p99 = v[((v.len() - 1) as f64 * 0.99).round() as usize];
        LatencySummary {
            count: v.len(),
            mean_ms: v.iter().sum::<u64>() as f64 / v.len() as f64 / 1000.0,
            p99_ms: p99 as f64 / 1000.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SiteBreakdown {
    pub reads: LatencySummary,
    pub writes: LatencySummary,
    pub local_read_fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchSummary {
    pub duration_s: f64,
    pub throughput: f64,
    pub errors: usize,
    pub reads: LatencySummary,
    pub writes: LatencySummary,
    pub per_site: BTreeMap<NodeId, SiteBreakdown>,
}

pub struct BenchResult {
    pub samples: Vec<Sample>,
    pub history: History,
    pub summary: BenchSummary,
}

struct Shared {
    samples: Vec<Sample>,
    records: Vec<Record>,
}

struct Gen {
    rng: ChaCha8Rng,
    zipf: Option<Zipf<f64>>,
}

impl Gen {
    fn next(&mut self, spec: &WorkloadSpec, client: u64, seq: u64) -> (Key, Option<Value>) {
        let idx = match &self.zipf {
            Some(z) => z.sample(&mut self.rng) as u64 - 1,
            None => self.rng.random_range(0..spec.keys as u64),
        };
        let key = Key::from(format!("k{idx}"));
        if self.rng.random_bool(spec.write_ratio) {
            let mut v = format!("c{client}-{seq}");
            while v.len() < spec.value_size {
                v.push('.');
            }
            (key, Some(Value::from(v)))
        } else {
            (key, None)
        }
    }
}

async fn one_op(
    c: &mut KvClient,
    key: Key,
    value: Option<Value>,
    epoch: Instant,
    shared: &Mutex<Shared>,
) {
    let rid = c.next_request_id();
    let start = epoch.elapsed().as_micros() as u64;
    let (op, res) = match &value {
        Some(v) => (OpKind::Put, c.put_with(rid, key.clone(), v.clone()).await.map(|_| None)),
        None => (OpKind::Get, c.get_with(rid, key.clone()).await.map(Some)),
    };
    let end = epoch.elapsed().as_micros() as u64;
    let ok = res.is_ok();
    let (read_value, local) = match &res {
        Ok(Some((v, a))) => (v.clone(), a.local && a.by == c.site),
        _ => (None, false),
    };
    let mut s = shared.lock().await;
    s.samples.push(Sample {
        client: c.id(),
        site: c.site,
        op: if value.is_some() { "put" } else { "get" },
        key: key.to_string(),
        start_us: start,
        latency_us: end - start,
        ok,
        local,
    });
    // Failed writes may still take effect; failed reads carry no information.
    if ok || op == OpKind::Put {
        s.records.push(Record {
            client: c.id(),
            request_id: rid.seq,
            op,
            key: key.to_string(),
            value: match op {
                OpKind::Put => value.map(|v| v.to_string()),
                OpKind::Get => read_value.map(|v| v.to_string()),
            },
            invoke: start,
            response: ok.then_some(end),
            outcome: if ok { Outcome::Ok } else { Outcome::Timeout },
        });
    }
}

/// Drives `spec` against the nodes at `addrs` (client addresses by id).
pub async fn run(spec: &WorkloadSpec, addrs: Vec<SocketAddr>) -> anyhow::Result<BenchResult> {
    spec.validate().map_err(anyhow::Error::msg)?;
    let shared = Arc::new(Mutex::new(Shared { samples: Vec::new(), records: Vec::new() }));
    let epoch = Instant::now();
    let deadline = Duration::from_millis(spec.duration_ms);
    let mut tasks = tokio::task::JoinSet::new();
    let mut seeder = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut next_id = 1u64;
    for p in &spec.clients {
        for _ in 0..p.count {
            let id = (spec.seed << 20) | next_id;
            next_id += 1;
            let zipf = match spec.distribution {
                KeyDistribution::Zipfian { theta } => Some(Zipf::new(spec.keys as f64, theta)?),
                KeyDistribution::Uniform => None,
            };
            let mut gen = Gen { rng: ChaCha8Rng::seed_from_u64(seeder.random()), zipf };
            let spec = spec.clone();
            let shared = shared.clone();
            let addrs = addrs.clone();
            let site = p.site;
            tasks.spawn(async move {
                match spec.mode {
                    Mode::ClosedLoop => {
                        let mut c = KvClient::new(addrs, site, id);
                        let mut seq = 0;
                        while epoch.elapsed() < deadline {
                            seq += 1;
                            let (key, value) = gen.next(&spec, id, seq);
                            one_op(&mut c, key, value, epoch, &shared).await;
                        }
                    }
                    Mode::OpenLoop { rate } => {
                        // One connection per outstanding op; ids stay unique
                        // because each op gets a sub-client id.
                        let period = Duration::from_secs_f64(1.0 / rate);
                        let mut ticker = tokio::time::interval(period);
                        let mut inner = tokio::task::JoinSet::new();
                        let mut seq = 0u64;
                        while epoch.elapsed() < deadline {
                            ticker.tick().await;
                            seq += 1;
                            let (key, value) = gen.next(&spec, id, seq);
                            let shared = shared.clone();
                            let addrs = addrs.clone();
                            inner.spawn(async move {
                                let mut c = KvClient::new(addrs, site, (id << 20) | seq);
                                one_op(&mut c, key, value, epoch, &shared).await;
                            });
                        }
                        while inner.join_next().await.is_some() {}
                    }
                }
            });
        }
    }
    while let Some(r) = tasks.join_next().await {
        r?;
    }
    let elapsed = epoch.elapsed().as_secs_f64();
    let shared = Arc::try_unwrap(shared).ok().expect("all tasks joined").into_inner();
    let summary = summarize(&shared.samples, elapsed);
    let history = History::new(shared.records)?;
    Ok(BenchResult { samples: shared.samples, history, summary })
}

pub fn summarize(samples: &[Sample], elapsed_s: f64) -> BenchSummary {
    let lat = |f: &dyn Fn(&Sample) -> bool| {
        LatencySummary::of(samples.iter().filter(|s| s.ok && f(s)).map(|s| s.latency_us).collect())
    };
    let mut per_site = BTreeMap::new();
    let sites: std::collections::BTreeSet<NodeId> = samples.iter().map(|s| s.site).collect();
    for site in sites {
        let reads: Vec<&Sample> = samples.iter().filter(|s| s.site == site && s.op == "get" && s.ok).collect();
        let local = reads.iter().filter(|s| s.local).count();
        per_site.insert(
            site,
            SiteBreakdown {
                reads: lat(&|s| s.site == site && s.op == "get"),
                writes: lat(&|s| s.site == site && s.op == "put"),
                local_read_fraction: if reads.is_empty() { 0.0 } else { local as f64 / reads.len() as f64 },
            },
        );
    }
    let done = samples.iter().filter(|s| s.ok).count();
    BenchSummary {
        duration_s: elapsed_s,
        throughput: if elapsed_s > 0.0 { done as f64 / elapsed_s } else { 0.0 },
        errors: samples.len() - done,
        reads: lat(&|s| s.op == "get"),
        writes: lat(&|s| s.op == "put"),
        per_site,
    }
}

/// Writes `samples.csv`, `summary.json` and `history.jsonl` into `dir`.
pub fn write_outputs(result: &BenchResult, dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("samples.csv"))?;
    for s in &result.samples {
        w.serialize(s)?;
    }
    w.flush()?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&result.summary)?)?;
    std::fs::write(dir.join("history.jsonl"), result.history.to_jsonl())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn workload_defaults() {
        let w: WorkloadSpec = serde_json::from_str(
            r#"{"keys":1000,"value_size":128,"write_ratio":0.1,"clients":[{"site":0,"count":2}],"duration_ms":100,
                "distribution":{"kind":"zipfian"}}"#,
        )
        .unwrap();
        assert_eq!(w.distribution, KeyDistribution::Zipfian { theta: 0.99 });
        assert_eq!(w.mode, Mode::ClosedLoop);
        w.validate().unwrap();
        let bad = WorkloadSpec { write_ratio: 1.5, ..w };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn summary_without_reads() {
        let s = vec![Sample {
            client: 1,
            site: NodeId(0),
            op: "put",
            key: "k".into(),
            start_us: 0,
            latency_us: 2000,
            ok: true,
            local: false,
        }];
        let sum = summarize(&s, 1.0);
        assert_eq!(sum.reads.count, 0);
        assert_eq!(sum.writes.count, 1);
    }
}

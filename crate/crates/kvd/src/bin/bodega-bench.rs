use std::path::PathBuf;

use anyhow::{Context, Result};
use bodega_kvd::bench::{self, WorkloadSpec};
use bodega_kvd::PeerAddr;
use clap::Parser;

#[derive(Parser)]
#[command(name = "bodega-bench", about = "Drive a workload against a running cluster")]
struct Args {
    #[arg(long)]
    workload: PathBuf,
    /// JSON list of cluster members with their client addresses.
    #[arg(long)]
    cluster: PathBuf,
    /// Directory for samples.csv, summary.json and history.jsonl.
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
}

#[tokio::main]
async fn main() -> Result<()> {
    let args = Args::parse();
    let spec: WorkloadSpec = serde_json::from_str(
        &std::fs::read_to_string(&args.workload).with_context(|| format!("reading {}", args.workload.display()))?,
    )?;
    let peers: Vec<PeerAddr> = serde_json::from_str(
        &std::fs::read_to_string(&args.cluster).with_context(|| format!("reading {}", args.cluster.display()))?,
    )?;
    let addrs = peers.iter().map(|p| p.client_addr).collect();
    let result = bench::run(&spec, addrs).await?;
    bench::write_outputs(&result, &args.out)?;
    println!("{}", serde_json::to_string_pretty(&result.summary)?);
    Ok(())
}

use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::{Context, Result};
use bodega_core::{NodeId, Roster};
use bodega_kvd::KvClient;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bodega-ctl", about = "Operator commands")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    Roster {
        #[command(subcommand)]
        verb: Verb,
        /// Client address of the node to talk to.
        #[arg(long, global = true)]
        node: Option<SocketAddr>,
    },
}

#[derive(Subcommand)]
enum Verb {
    /// Print the node's ballot and roster.
    Get,
    /// Announce a new roster from a JSON file.
    Set { file: PathBuf },
    /// Dump the node's counters, including auto-tuner statistics.
    Stats,
}

#[tokio::main]
async fn main() -> Result<()> {
    let Cmd::Roster { verb, node } = Args::parse().cmd;
    let addr = node.context("--node is required")?;
    let mut c = KvClient::new(vec![addr], NodeId(0), std::process::id() as u64);
    let target = NodeId(0);
    match verb {
        Verb::Get => {
            let (ballot, roster, stable) = c.roster_get(target).await?;
            println!("{}", serde_json::to_string_pretty(&serde_json::json!({
                "ballot": ballot, "roster": roster, "stable": stable,
            }))?);
        }
        Verb::Set { file } => {
            let roster: Roster = serde_json::from_str(
                &std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?,
            )?;
            let ballot = c.roster_set(target, roster).await?;
            println!("{}", serde_json::to_string(&serde_json::json!({ "ballot": ballot }))?);
        }
        Verb::Stats => {
            let s = c.stats(target).await?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
    }
    Ok(())
}

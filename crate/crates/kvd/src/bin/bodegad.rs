use std::path::PathBuf;

use anyhow::Result;
use bodega_kvd::{NodeConfig, Server};
use clap::Parser;

#[derive(Parser)]
#[command(name = "bodegad", about = "Replicated key-value store daemon")]
struct Args {
    #[arg(long)]
    config: PathBuf,
    /// Record every core input to this file for replay.
    #[arg(long)]
    record: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let args = Args::parse();
    let mut cfg = NodeConfig::load(&args.config)?;
    if args.record.is_some() {
        cfg.record = args.record;
    }
    let server = Server::bind(cfg).await?;
    server
        .run(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use bodega_core::replay::{first_divergence, EventRecord, RecordHeader};
use bodega_core::Mutation;
use bodega_lincheck::check;
use bodega_sim::explore::{explore, ExploreOptions};
use bodega_sim::faults::random_fault_scenario;
use bodega_sim::{Scenario, Sim, SimOptions};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "sim", about = "Deterministic cluster simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mutant {
    /// Commit on a bare majority.
    Commit,
    /// Stable check without safety thresholds.
    Stable,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario file.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the event trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the metrics summary as JSON.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Write the client history as JSON lines.
        #[arg(long)]
        history: Option<PathBuf>,
        /// Check the history for linearizability; exit 1 on a violation.
        #[arg(long)]
        check: bool,
    },
    /// Enumerate message fates on a small scripted cluster.
    Explore {
        #[arg(long, default_value_t = 3)]
        nodes: u8,
        #[arg(long, default_value_t = 3)]
        ballots: usize,
        /// Messages whose fate is chosen per run.
        #[arg(long, default_value_t = 8)]
        depth: usize,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        no_crashes: bool,
        #[arg(long, value_enum)]
        mutant: Option<Mutant>,
        /// Write the counterexample trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Randomized fault runs checked for linearizability.
    Faults {
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        first: u64,
    },
    /// Replay a daemon record file through a fresh core and compare digests.
    Replay { record: PathBuf },
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Run { scenario, seed, trace, metrics, history, check: do_check } => {
            let text = fs::read_to_string(&scenario).with_context(|| format!("reading {}", scenario.display()))?;
            let sc = Scenario::from_json(&text)?;
            let r = Sim::new(sc, seed, SimOptions { trace: trace.is_some(), check_stable: true, check_invariants: true, tape: None }).run();
            if let Some(p) = trace {
                let mut f = fs::File::create(&p)?;
                for l in &r.trace {
                    writeln!(f, "{l}")?;
                }
            }
            if let Some(p) = history {
                fs::write(&p, r.history.to_jsonl())?;
            }
            let summary = serde_json::to_string_pretty(&r.metrics.summary())?;
            match metrics {
                Some(p) => fs::write(&p, summary)?,
                None => println!("{summary}"),
            }
            if !r.stable_conflicts.is_empty() {
                eprintln!("stable roster conflicts: {:?}", r.stable_conflicts);
            }
            for v in &r.invariant_violations {
                eprintln!("invariant violated: {v}");
            }
            if do_check {
                let v = check(&r.history);
                println!("{v}");
                if !v.is_ok() {
                    std::process::exit(1);
                }
            }
        }
        Cmd::Explore { nodes, ballots, depth, budget, no_crashes, mutant, trace } => {
            if nodes < 3 || nodes % 2 == 0 {
                bail!("--nodes must be odd and at least 3");
            }
            let opts = ExploreOptions {
                nodes,
                ballots,
                max_points: depth,
                budget: budget.unwrap_or(usize::MAX),
                crashes: !no_crashes,
                mutation: mutant.map(|m| match m {
                    Mutant::Commit => Mutation::CommitIgnoresResponders,
                    Mutant::Stable => Mutation::StableIgnoresThresholds,
                }),
            };
            let r = explore(&opts);
            println!("runs: {} complete: {} deepest: {}", r.runs, r.complete, r.deepest);
            match r.violation {
                None => println!("no violation"),
                Some(cx) => {
                    println!("violation on key {:?}, crash {:?}, choices {:?}", cx.key, cx.crash, cx.choices);
                    for rec in &cx.witness {
                        println!("  {}", serde_json::to_string(rec)?);
                    }
                    if let Some(p) = trace {
                        fs::write(&p, cx.trace.join("\n") + "\n")?;
                    }
                    std::process::exit(1);
                }
            }
        }
        Cmd::Faults { seeds, first } => {
            let mut bad = 0;
            for seed in first..first + seeds {
                let opts = SimOptions { check_stable: true, check_invariants: true, ..Default::default() };
                let r = Sim::new(random_fault_scenario(seed), seed, opts).run();
                let v = check(&r.history);
                if !v.is_ok() || !r.invariant_violations.is_empty() || !r.stable_conflicts.is_empty() {
                    bad += 1;
                    println!("seed {seed}: {v} {:?} {:?}", r.invariant_violations, r.stable_conflicts);
                }
            }
            println!("{seeds} runs, {bad} violations");
            if bad > 0 {
                std::process::exit(1);
            }
        }
        Cmd::Replay { record } => {
            let f = fs::File::open(&record).with_context(|| format!("opening {}", record.display()))?;
            let mut lines = BufReader::new(f).lines();
            let Some(first) = lines.next() else { bail!("{} is empty", record.display()) };
            let header: RecordHeader = serde_json::from_str(&first?).context("record header")?;
            let mut events = Vec::new();
            for (i, l) in lines.enumerate() {
                let l = l?;
                events.push(serde_json::from_str::<EventRecord>(&l).with_context(|| format!("event {i}"))?);
            }
            match first_divergence(&header, &events) {
                None => println!("node {}: {} events replayed, no divergence", header.node.0, events.len()),
                Some(i) => {
                    println!("node {}: diverged at event {i} (t={})", header.node.0, events[i].now);
                    std::process::exit(1);
                }
            }
        }
    }
    Ok(())
}

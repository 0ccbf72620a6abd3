//! Bounded schedule exploration on a small cluster.
//!
//! A fixed script (roster changes under a handful of ballots, two writes
//! and two reads of one key) runs on a deterministic network. The first
//! `max_points` log-related messages each get one of three fates: fast,
//! slow or lost. Every combination is enumerated depth first, once with no
//! crash and once per (node, instant) crash option, and each run's history
//! goes through the linearizability checker.

use bodega_core::{Micros, Mutation, NodeId, NodeSet, PeerMsg, Roster};
use bodega_lincheck::{check, Record, Verdict};
use serde::Serialize;

use crate::engine::{Sim, SimOptions, Tape};
use crate::faults::fast_config;
use crate::scenario::{uniform_rtt_ms, Action, Scenario, ScriptEvent, Workload};

/// Fates for a chosen message: delivered after 1 ms, after 40 ms, or never.
pub const BUCKETS: [Option<Micros>; 3] = [Some(1_000), Some(40_000), None];

/// Instants at which a crash may be injected.
pub const CRASH_AT_MS: [f64; 2] = [160.0, 300.0];

#[derive(Debug, Clone)]
pub struct ExploreOptions {
    pub nodes: u8,
    /// Number of roster ballots announced over the run.
    pub ballots: usize,
    pub max_points: usize,
    /// Stop after this many runs.
    pub budget: usize,
    pub crashes: bool,
    pub mutation: Option<Mutation>,
}

impl Default for ExploreOptions {
    fn default() -> Self {
        ExploreOptions { nodes: 3, ballots: 3, max_points: 8, budget: usize::MAX, crashes: true, mutation: None }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Counterexample {
    pub crash: Option<(NodeId, f64)>,
    pub choices: Vec<u8>,
    pub key: String,
    pub witness: Vec<Record>,
    pub trace: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExploreReport {
    pub runs: usize,
    /// Every schedule within the bounds was tried.
    pub complete: bool,
    /// Most choice points met in a single run.
    pub deepest: usize,
    pub violation: Option<Counterexample>,
}

fn on_tape(msg: &PeerMsg) -> bool {
    matches!(
        msg,
        PeerMsg::Accept { .. }
            | PeerMsg::AcceptReply { .. }
            | PeerMsg::AcceptNote { .. }
            | PeerMsg::Commit { .. }
            | PeerMsg::CatchUpRequest { .. }
            | PeerMsg::CatchUpReply { .. }
    )
}

fn rosters(n: u8) -> [(NodeId, Roster); 3] {
    let set = |ids: &[u8]| ids.iter().fold(NodeSet::empty(), |mut s, i| {
        s.insert(NodeId(*i));
        s
    });
    [
        (NodeId(0), Roster::full(NodeId(0), set(&[0, 1]))),
        (NodeId(0), Roster::full(NodeId(0), NodeSet::all(n))),
        (NodeId(1), Roster::full(NodeId(1), set(&[1, 2]))),
    ]
}

/// The scripted run. Node 1 writes right before node 1 reads; node 2 gains
/// the responder role shortly after and reads; leadership then moves.
pub fn scenario(nodes: u8, ballots: usize) -> Scenario {
    let rs = rosters(nodes);
    let mut events = Vec::new();
    let mut at = |at_ms: f64, action: Action| events.push(ScriptEvent { at_ms, action });
    for b in 1..ballots {
        let (node, roster) = rs[b % rs.len()].clone();
        let at_ms = if b == 1 { 172.0 } else { 400.0 + 200.0 * (b - 2) as f64 };
        at(at_ms, Action::RosterSet { node, roster });
    }
    let put = |site: u8, v: &str| Action::Put { site: NodeId(site), key: "x".into(), value: v.into() };
    let get = |site: u8| Action::Get { site: NodeId(site), key: "x".into() };
    at(150.0, put(1, "w1"));
    at(170.0, get(1));
    at(200.0, get(2));
    at(420.0, put(0, "w2"));
    Scenario {
        name: format!("explore-{nodes}n-{ballots}b"),
        config: fast_config(nodes),
        rtt_ms: uniform_rtt_ms(nodes as usize, 10.0),
        jitter_ms: 0.0,
        drop_prob: 0.0,
        drift: Default::default(),
        client_rtt_ms: 1.0,
        clients: Vec::new(),
        workload: Workload::default(),
        initial_roster: Some(rs[0].1.clone()),
        duration_ms: 1_200.0,
        events,
        unhold_ms: None,
    }
}

struct Run {
    seen: Vec<u8>,
    verdict: Verdict,
    trace: Vec<String>,
}

fn run_once(sc: &Scenario, crash: Option<(NodeId, f64)>, choices: &[u8], max_points: usize, trace: bool) -> Run {
    let mut sc = sc.clone();
    if let Some((node, at_ms)) = crash {
        sc.events.push(ScriptEvent { at_ms, action: Action::Crash { node } });
    }
    let tape = Tape {
        choices: choices.to_vec(),
        seen: Vec::new(),
        buckets: BUCKETS.to_vec(),
        max_points,
        applies: on_tape,
    };
    let mut sim = Sim::new(sc, 0, SimOptions { trace, tape: Some(tape), ..Default::default() });
    while sim.step() {}
    let seen = sim.tape.take().map(|t| t.seen).unwrap_or_default();
    let r = sim.finish();
    Run { seen, verdict: check(&r.history), trace: r.trace }
}

/// Next choice vector in depth-first order, or `None` when the subtree
/// under the current crash option is exhausted.
fn advance(choices: &[u8], seen: &[u8]) -> Option<Vec<u8>> {
    let mut next: Vec<u8> = (0..seen.len()).map(|i| choices.get(i).copied().unwrap_or(0)).collect();
    while let Some(last) = next.len().checked_sub(1) {
        if next[last] + 1 < seen[last] {
            next[last] += 1;
            return Some(next);
        }
        next.pop();
    }
    None
}

pub fn explore(opts: &ExploreOptions) -> ExploreReport {
    let mut sc = scenario(opts.nodes, opts.ballots);
    sc.config.mutation = opts.mutation;
    let mut crashes = vec![None];
    if opts.crashes {
        for n in 0..opts.nodes {
            for t in CRASH_AT_MS {
                crashes.push(Some((NodeId(n), t)));
            }
        }
    }
    let mut report = ExploreReport { runs: 0, complete: false, deepest: 0, violation: None };
    for crash in crashes {
        let mut choices = Vec::new();
        loop {
            if report.runs >= opts.budget {
                return report;
            }
            let run = run_once(&sc, crash, &choices, opts.max_points, false);
            report.runs += 1;
            report.deepest = report.deepest.max(run.seen.len());
            if let Verdict::Violation { key, witness } = run.verdict {
                let used: Vec<u8> = (0..run.seen.len()).map(|i| choices.get(i).copied().unwrap_or(0)).collect();
                let trace = run_once(&sc, crash, &used, opts.max_points, true).trace;
                report.violation = Some(Counterexample { crash, choices: used, key, witness, trace });
                return report;
            }
            match advance(&choices, &run.seen) {
                Some(next) => choices = next,
                None => break,
            }
        }
    }
    report.complete = true;
    report
}

//! The discrete-event loop.
//!
//! Events are ordered by (real time, insertion sequence). Each node sees its
//! own drifting clock; timers are armed in local time and converted to the
//! real instant at which the node's clock reaches them.

use std::collections::BTreeMap;

use bodega_core::{
    Ballot, ClientOp, ClientReply, ClientRequest, Input, Key, Micros, Node, NodeId, Output, PeerMsg, ReplyBody,
    Roster, TimerKind, Value,
};
use bodega_lincheck::{History, OpKind, Outcome, Record};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::client::{Client, ClientOpKind, Pending};
use crate::clock::{max_drift_ppm, ClockModel, DriftSpec};
use crate::metrics::{Metrics, ReadSample, WriteSample};
use crate::network::NetworkModel;
use crate::monitor::Monitor;
use crate::scenario::{Action, Scenario};

/// Client id used for operator requests (roster changes).
pub const OPERATOR: u64 = 0;
/// Scripted one-off operations get client ids from here up.
pub const SCRIPT_CLIENT_BASE: u64 = 1_000_000;

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
pub enum SimEvent {
    Deliver { from: NodeId, to: NodeId, msg: PeerMsg },
    ClientSend { client: u64, to: NodeId, req: ClientRequest },
    ClientRecv { client: u64, from: NodeId, reply: ClientReply },
    TimerFire { node: NodeId, kind: TimerKind, gen: u64 },
    ClientWake { client: u64, gen: u64 },
    ClientStart { client: u64 },
    Script { index: usize, action: Action },
    Heal { a: NodeId, b: NodeId },
}

/// Chooses delays for selected messages instead of the network model; used
/// to enumerate schedules.
pub struct Tape {
    pub choices: Vec<u8>,
    /// Arity of every choice point met so far, in order.
    pub seen: Vec<u8>,
    pub buckets: Vec<Option<Micros>>,
    pub max_points: usize,
    pub applies: fn(&PeerMsg) -> bool,
}

impl Tape {
    fn pick(&mut self, msg: &PeerMsg) -> Option<Option<Micros>> {
        if !(self.applies)(msg) || self.seen.len() >= self.max_points {
            return None;
        }
        let i = self.seen.len();
        let c = self.choices.get(i).copied().unwrap_or(0);
        self.seen.push(self.buckets.len() as u8);
        Some(self.buckets[c as usize])
    }
}

#[derive(Default)]
pub struct SimOptions {
    pub trace: bool,
    /// Check after every event that live nodes agree on the stable ballot.
    pub check_stable: bool,
    /// Check agreement, ballot monotonicity, execution order and lease-set
    /// exclusivity after every protocol step.
    pub check_invariants: bool,
    pub tape: Option<Tape>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StableConflict {
    pub at: Micros,
    pub holders: Vec<(NodeId, Ballot)>,
}

pub struct SimResult {
    pub history: History,
    pub metrics: Metrics,
    pub trace: Vec<String>,
    pub stable_conflicts: Vec<StableConflict>,
    pub invariant_violations: Vec<String>,
    pub operator_replies: Vec<(Micros, ClientReply)>,
}

pub struct Sim {
    pub scenario: Scenario,
    now: Micros,
    end: Micros,
    seq: u64,
    queue: BTreeMap<(Micros, u64), SimEvent>,
    nodes: Vec<Option<Node>>,
    clocks: ClockModel,
    net: NetworkModel,
    net_rng: ChaCha8Rng,
    timer_gen: BTreeMap<(NodeId, TimerKind), u64>,
    clients: BTreeMap<u64, Client>,
    records: Vec<Record>,
    metrics: Metrics,
    trace: Option<Vec<String>>,
    check_stable: bool,
    conflicts: Vec<StableConflict>,
    monitor: Option<Monitor>,
    pub tape: Option<Tape>,
    operator_replies: Vec<(Micros, ClientReply)>,
    client_one_way: Micros,
}

fn ms(x: f64) -> Micros {
    (x * 1000.0).round() as Micros
}

impl Sim {
    pub fn new(scenario: Scenario, seed: u64, opts: SimOptions) -> Self {
        let n = scenario.n();
        let mut seeder = ChaCha8Rng::seed_from_u64(seed);
        let bound = max_drift_ppm(&scenario.config);
        let ppm = match &scenario.drift {
            DriftSpec::None => vec![0; n],
            DriftSpec::Extreme => (0..n).map(|i| if i % 2 == 0 { bound } else { -bound }).collect(),
            DriftSpec::Random => (0..n).map(|_| seeder.random_range(-bound..=bound)).collect(),
            DriftSpec::Ppm { ppm } => ppm.clone(),
        };
        let net = NetworkModel::from_rtt_ms(&scenario.rtt_ms, scenario.jitter_ms, scenario.drop_prob);
        let nodes = (0..n).map(|i| Some(Node::new(NodeId(i as u8), scenario.config.clone(), seed))).collect();
        let mut sim = Sim {
            now: 0,
            end: ms(scenario.duration_ms),
            seq: 0,
            queue: BTreeMap::new(),
            nodes,
            clocks: ClockModel::new(ppm),
            net_rng: ChaCha8Rng::seed_from_u64(seeder.random()),
            net,
            timer_gen: BTreeMap::new(),
            clients: BTreeMap::new(),
            records: Vec::new(),
            metrics: Metrics::new(n),
            trace: opts.trace.then(Vec::new),
            check_stable: opts.check_stable,
            conflicts: Vec::new(),
            monitor: opts.check_invariants.then(|| Monitor::new(n)),
            tape: opts.tape,
            operator_replies: Vec::new(),
            client_one_way: ms(scenario.client_rtt_ms) / 2,
            scenario,
        };
        let mut next_id = 1;
        for g in sim.scenario.clients.clone() {
            for _ in 0..g.count {
                let rng = ChaCha8Rng::seed_from_u64(seeder.random());
                let mut c = Client::new(next_id, g.site, sim.nearest(g.site), &sim.scenario.workload, rng);
                c.leader = sim.scenario.initial_roster.as_ref().and_then(|r| r.leader);
                c.roster = sim.scenario.initial_roster.clone().map(|r| (Ballot::ZERO, r));
                sim.clients.insert(next_id, c);
                next_id += 1;
            }
        }
        for i in 0..n {
            let outs = sim.nodes[i].as_mut().unwrap().start(0);
            sim.handle_outputs(NodeId(i as u8), outs, None);
        }
        if let Some(r) = sim.scenario.initial_roster.clone() {
            let at = r.leader.unwrap_or(NodeId(0));
            sim.operator(0, at, ClientOp::RosterSet { roster: r });
        }
        for (index, e) in sim.scenario.events.clone().into_iter().enumerate() {
            sim.push(ms(e.at_ms), SimEvent::Script { index, action: e.action });
        }
        let start = ms(sim.scenario.workload.start_ms);
        let ids: Vec<u64> = sim.clients.keys().copied().collect();
        for id in ids {
            sim.push(start, SimEvent::ClientStart { client: id });
        }
        sim
    }

    fn nearest(&self, site: NodeId) -> Vec<NodeId> {
        let mut v: Vec<NodeId> = (0..self.scenario.n()).map(|i| NodeId(i as u8)).collect();
        v.sort_by_key(|p| (self.net.rtt(site, *p), *p));
        v
    }

    fn push(&mut self, at: Micros, ev: SimEvent) {
        self.seq += 1;
        self.queue.insert((at.max(self.now), self.seq), ev);
    }

    pub fn now(&self) -> Micros {
        self.now
    }

    pub fn end(&self) -> Micros {
        self.end
    }

    pub fn set_end(&mut self, end: Micros) {
        self.end = end;
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes[id.idx()].as_ref()
    }

    pub fn local_now(&self, id: NodeId) -> Micros {
        self.clocks.local(id.idx(), self.now)
    }

    pub fn network(&self) -> &NetworkModel {
        &self.net
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    /// Ballot held stable by each live node right now.
    pub fn stable_ballots(&self) -> Vec<(NodeId, Option<Ballot>)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.as_ref().map(|n| (NodeId(i as u8), n.stable_ballot(self.local_now(NodeId(i as u8))))))
            .collect()
    }

    /// Sends an operator request to `node` at `at`.
    pub fn operator(&mut self, at: Micros, node: NodeId, op: ClientOp) {
        let seq = self.seq + 1;
        let req = ClientRequest::new(bodega_core::RequestId { client: OPERATOR, seq }, op);
        self.push(at, SimEvent::ClientSend { client: OPERATOR, to: node, req });
    }

    /// Schedules a scripted action.
    pub fn schedule(&mut self, at: Micros, action: Action) {
        let index = usize::MAX;
        self.push(at, SimEvent::Script { index, action });
    }

    /// Processes the next event if it is due by the end of the run.
    pub fn step(&mut self) -> bool {
        let Some((&(t, s), _)) = self.queue.iter().next() else { return false };
        if t > self.end {
            return false;
        }
        let ev = self.queue.remove(&(t, s)).unwrap();
        self.now = t;
        if let Some(tr) = &mut self.trace {
            #[derive(Serialize)]
            struct Line<'a> {
                t: Micros,
                #[serde(flatten)]
                ev: &'a SimEvent,
            }
            tr.push(serde_json::to_string(&Line { t, ev: &ev }).expect("event serializes"));
        }
        self.dispatch(ev);
        if self.check_stable {
            self.check_single_stable();
        }
        true
    }

    pub fn run_until(&mut self, t: Micros) {
        let end = self.end;
        self.end = t.min(end);
        while self.step() {}
        self.end = end;
        self.now = self.now.max(t.min(end));
    }

    /// Runs until `pred` holds (checked after every event) or `deadline`.
    pub fn run_until_pred(&mut self, deadline: Micros, mut pred: impl FnMut(&Sim) -> bool) -> Option<Micros> {
        if pred(self) {
            return Some(self.now);
        }
        let end = self.end;
        self.end = deadline.min(end);
        let mut hit = None;
        while self.step() {
            if pred(self) {
                hit = Some(self.now);
                break;
            }
        }
        self.end = end;
        hit
    }

    pub fn run(mut self) -> SimResult {
        while self.step() {}
        self.finish()
    }

    pub fn finish(self) -> SimResult {
        let history = History::new(self.records).expect("simulated history is well formed");
        SimResult {
            history,
            metrics: self.metrics,
            trace: self.trace.unwrap_or_default(),
            stable_conflicts: self.conflicts,
            invariant_violations: self.monitor.map(|m| m.violations).unwrap_or_default(),
            operator_replies: self.operator_replies,
        }
    }

    fn check_single_stable(&mut self) {
        let holders: Vec<(NodeId, Ballot)> =
            self.stable_ballots().into_iter().filter_map(|(p, b)| b.map(|b| (p, b))).collect();
        if holders.windows(2).any(|w| w[0].1 != w[1].1) && self.conflicts.len() < 16 {
            self.conflicts.push(StableConflict { at: self.now, holders });
        }
    }

    fn dispatch(&mut self, ev: SimEvent) {
        match ev {
            SimEvent::Deliver { from, to, msg } => self.step_node(to, Input::Peer { from, msg }, None),
            SimEvent::ClientSend { client, to, req } => {
                let is_get = matches!(req.op, ClientOp::Get { .. });
                let rid = req.request_id;
                self.step_node(to, Input::Client { client, req }, is_get.then_some((client, rid)));
            }
            SimEvent::ClientRecv { client, from, reply } => self.client_recv(client, from, reply),
            SimEvent::TimerFire { node, kind, gen } => {
                if self.timer_gen.get(&(node, kind)) == Some(&gen) {
                    self.step_node(node, Input::Timer { kind }, None);
                }
            }
            SimEvent::ClientWake { client, gen } => self.client_wake(client, gen),
            SimEvent::ClientStart { client } => self.client_issue(client),
            SimEvent::Script { action, .. } => self.apply(action),
            SimEvent::Heal { .. } => {}
        }
    }

    fn apply(&mut self, action: Action) {
        match action {
            Action::Crash { node } => {
                self.nodes[node.idx()] = None;
            }
            Action::Partition { a, b, for_ms } => {
                let until = self.now + ms(for_ms);
                self.net.block(a, b, until);
                self.net.block(b, a, until);
                self.push(until, SimEvent::Heal { a, b });
            }
            Action::Isolate { node, for_ms } => {
                let until = self.now + ms(for_ms);
                for p in 0..self.scenario.n() {
                    let p = NodeId(p as u8);
                    if p != node {
                        self.net.block(node, p, until);
                        self.net.block(p, node, until);
                    }
                }
                self.push(until, SimEvent::Heal { a: node, b: node });
            }
            Action::RosterSet { node, roster } => self.operator(self.now, node, ClientOp::RosterSet { roster }),
            Action::Put { site, key, value } => {
                self.script_op(site, Key::from(key), ClientOpKind::Put(Value::from(value)));
            }
            Action::Get { site, key } => self.script_op(site, Key::from(key), ClientOpKind::Get),
        }
    }

    fn script_op(&mut self, site: NodeId, key: Key, kind: ClientOpKind) {
        let id = SCRIPT_CLIENT_BASE + self.clients.keys().filter(|k| **k >= SCRIPT_CLIENT_BASE).count() as u64;
        let rng = ChaCha8Rng::seed_from_u64(id);
        let mut c = Client::new(id, site, self.nearest(site), &self.scenario.workload, rng);
        c.scripted = true;
        // A one-off client looks the roster up at its own site first.
        let known = match self.node(site) {
            Some(n) if !n.newest().0.is_zero() => Some((n.newest().0, n.newest().1.clone())),
            _ => self.scenario.initial_roster.clone().map(|r| (Ballot::ZERO, r)),
        };
        c.leader = known.as_ref().and_then(|(_, r)| r.leader);
        c.roster = known;
        self.clients.insert(id, c);
        self.client_start_op(id, key, kind);
    }

    fn step_node(&mut self, id: NodeId, input: Input, read_of: Option<(u64, bodega_core::RequestId)>) {
        let local = self.clocks.local(id.idx(), self.now);
        let Some(node) = self.nodes[id.idx()].as_mut() else { return };
        let outs = node.step(local, input);
        if let (Some(m), Some(node)) = (&mut self.monitor, &self.nodes[id.idx()]) {
            m.observe(self.now, id, node);
        }
        self.handle_outputs(id, outs, read_of);
    }

    fn handle_outputs(&mut self, id: NodeId, outs: Vec<Output>, read_of: Option<(u64, bodega_core::RequestId)>) {
        let mut sends = 0;
        for o in outs {
            match o {
                Output::Send { to, msg } => {
                    if to != id {
                        sends += 1;
                        self.metrics.messages += 1;
                    }
                    self.send(id, to, msg);
                }
                Output::Reply { client, reply } => {
                    let d = self.client_delay(client, id);
                    self.push(self.now + d, SimEvent::ClientRecv { client, from: id, reply });
                }
                Output::SetTimer { kind, at } => {
                    let g = self.timer_gen.entry((id, kind)).or_insert(0);
                    *g += 1;
                    let gen = *g;
                    let real = self.clocks.real_at(id.idx(), at);
                    self.push(real, SimEvent::TimerFire { node: id, kind, gen });
                }
            }
        }
        if sends > 0 {
            if let Some((client, rid)) = read_of {
                if let Some(p) = self.clients.get_mut(&client).and_then(|c| c.pending.as_mut()) {
                    if p.rid == rid {
                        p.sends_on_path = true;
                    }
                }
            }
        }
    }

    fn send(&mut self, from: NodeId, to: NodeId, msg: PeerMsg) {
        let delay = if from == to {
            Some(0)
        } else if let Some(d) = self.tape.as_mut().and_then(|t| t.pick(&msg)) {
            if self.net.is_blocked(from, to, self.now) {
                None
            } else {
                d
            }
        } else {
            self.net.sample(from, to, self.now, &mut self.net_rng)
        };
        if let Some(d) = delay {
            self.push(self.now + d, SimEvent::Deliver { from, to, msg });
        }
    }

    fn client_delay(&self, client: u64, node: NodeId) -> Micros {
        let site = self.clients.get(&client).map(|c| c.site).unwrap_or(node);
        self.net.one_way(site, node) + self.client_one_way
    }

    fn unhold_timeout(&self, c: &Client) -> Micros {
        if let Some(u) = self.scenario.unhold_ms {
            return ms(u);
        }
        let leader = c.leader.unwrap_or(c.site);
        (2 * self.net.rtt(c.site, leader)).max(50_000) + 2 * self.client_one_way
    }

    fn write_timeout(&self) -> Micros {
        let cfg = &self.scenario.config;
        2 * cfg.lease_us + cfg.hb_fail_us + cfg.hb_fail_jitter_us
    }

    fn client_issue(&mut self, id: u64) {
        let w = self.scenario.workload.clone();
        let Some(c) = self.clients.get_mut(&id) else { return };
        let (key, kind) = c.draw(&w);
        self.client_start_op(id, key, kind);
    }

    fn client_start_op(&mut self, id: u64, key: Key, kind: ClientOpKind) {
        let now = self.now;
        let c = self.clients.get_mut(&id).unwrap();
        let rid = c.next_rid();
        let (op, value) = match &kind {
            ClientOpKind::Get => (OpKind::Get, None),
            ClientOpKind::Put(v) => (OpKind::Put, Some(v.to_string())),
        };
        self.records.push(Record {
            client: id,
            request_id: rid.seq,
            op,
            key: key.to_string(),
            value,
            invoke: now,
            response: None,
            outcome: Outcome::Timeout,
        });
        let target = c.first_target(&key, &kind);
        c.pending = Some(Pending {
            rid,
            key,
            kind,
            invoke: now,
            record: self.records.len() - 1,
            sent_to: Vec::new(),
            sends_on_path: false,
        });
        self.client_send(id, target);
    }

    fn client_send(&mut self, id: u64, to: NodeId) {
        let now = self.now;
        let d = self.client_delay(id, to);
        let timeout = {
            let c = &self.clients[&id];
            match &c.pending.as_ref().unwrap().kind {
                ClientOpKind::Get => self.unhold_timeout(c),
                ClientOpKind::Put(_) => self.write_timeout(),
            }
        };
        let c = self.clients.get_mut(&id).unwrap();
        let p = c.pending.as_mut().unwrap();
        p.sent_to.push(to);
        let op = match &p.kind {
            ClientOpKind::Get => ClientOp::Get { key: p.key.clone() },
            ClientOpKind::Put(v) => ClientOp::Put { key: p.key.clone(), value: v.clone() },
        };
        let req = ClientRequest::new(p.rid, op).with_hints(c.nearest.clone());
        c.wake_gen += 1;
        let gen = c.wake_gen;
        self.push(now + d, SimEvent::ClientSend { client: id, to, req });
        self.push(now + timeout, SimEvent::ClientWake { client: id, gen });
    }

    fn client_wake(&mut self, id: u64, gen: u64) {
        let now = self.now;
        let wt = self.write_timeout();
        let Some(c) = self.clients.get_mut(&id) else { return };
        if c.wake_gen != gen {
            return;
        }
        let Some(p) = &c.pending else {
            // Think time over.
            if !c.scripted {
                self.client_issue(id);
            }
            return;
        };
        match p.kind {
            ClientOpKind::Get => {
                let to = c.retry_target();
                self.client_send(id, to);
            }
            ClientOpKind::Put(_) => {
                if now >= p.invoke + wt {
                    // Possibly in some log; it may still take effect.
                    c.pending = None;
                    let scripted = c.scripted;
                    if !scripted {
                        self.client_issue(id);
                    }
                } else {
                    // Backoff after a bounce.
                    let to = c.leader.unwrap_or(c.site);
                    self.client_send(id, to);
                }
            }
        }
    }

    fn client_recv(&mut self, id: u64, from: NodeId, reply: ClientReply) {
        if id == OPERATOR {
            self.operator_replies.push((self.now, reply));
            return;
        }
        let now = self.now;
        let Some(c) = self.clients.get_mut(&id) else { return };
        let Some(p) = &c.pending else { return };
        if p.rid != reply.request_id {
            return;
        }
        match reply.body {
            ReplyBody::Value { value, local } => {
                let p = c.pending.take().unwrap();
                let rec = &mut self.records[p.record];
                rec.response = Some(now);
                rec.outcome = Outcome::Ok;
                rec.value = value.map(|v| v.to_string());
                let site = c.site;
                let is_local = local && from == site && p.sent_to.len() == 1 && !p.sends_on_path;
                for to in &p.sent_to {
                    self.metrics.touched[to.idx()] += 1;
                }
                if !local {
                    for t in self.metrics.touched.iter_mut() {
                        *t += 1;
                    }
                }
                self.metrics.reads.push(ReadSample {
                    client: id,
                    site,
                    invoke: p.invoke,
                    latency: now - p.invoke,
                    local: is_local,
                    answered_by: from,
                });
                self.after_op(id);
            }
            ReplyBody::WriteOk => {
                let p = c.pending.take().unwrap();
                let rec = &mut self.records[p.record];
                rec.response = Some(now);
                rec.outcome = Outcome::Ok;
                c.leader = Some(from);
                let site = c.site;
                self.metrics.writes.push(WriteSample { client: id, site, invoke: p.invoke, latency: now - p.invoke });
                self.after_op(id);
            }
            ReplyBody::Redirect { to: Some(to), .. } if to != from => {
                self.refresh_roster(id, from);
                let c = self.clients.get_mut(&id).unwrap();
                let p = c.pending.as_ref().unwrap();
                if matches!(p.kind, ClientOpKind::Put(_)) {
                    c.leader = Some(to);
                }
                self.client_send(id, to);
            }
            ReplyBody::Redirect { .. } | ReplyBody::Unavailable => {
                // Try again shortly, elsewhere for reads.
                self.refresh_roster(id, from);
                let c = self.clients.get_mut(&id).unwrap();
                c.wake_gen += 1;
                let gen = c.wake_gen;
                if matches!(c.pending.as_ref().unwrap().kind, ClientOpKind::Put(_)) && c.leader == Some(from) {
                    c.leader = None;
                }
                self.push(now + 20_000, SimEvent::ClientWake { client: id, gen });
            }
            _ => {}
        }
    }

    /// A bounced client looks up the newest roster at the node that
    /// bounced it.
    fn refresh_roster(&mut self, id: u64, from: NodeId) {
        let Some(n) = self.nodes[from.idx()].as_ref() else { return };
        let (b, r) = n.newest();
        let c = self.clients.get_mut(&id).unwrap();
        if c.roster.as_ref().is_none_or(|(cb, _)| *cb < b) {
            c.roster = Some((b, r.clone()));
        }
    }

    fn after_op(&mut self, id: u64) {
        let think = ms(self.scenario.workload.think_ms);
        let c = self.clients.get_mut(&id).unwrap();
        c.wake_gen += 1;
        if c.scripted {
            return;
        }
        if think == 0 {
            self.client_issue(id);
        } else {
            c.wake_gen += 1;
            let gen = c.wake_gen;
            self.push(self.now + think, SimEvent::ClientWake { client: id, gen });
        }
    }

    /// Newest roster any live node knows of.
    pub fn newest_roster(&self) -> Option<(Ballot, Roster)> {
        self.nodes
            .iter()
            .flatten()
            .map(|n| {
                let (b, r) = n.newest();
                (b, r.clone())
            })
            .max_by_key(|(b, _)| *b)
    }
}

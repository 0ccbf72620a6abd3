//! Drives a few cores through a tiny in-memory network with a fixed hop
//! delay, without the simulator.

use std::collections::BTreeMap;

use bodega_core::{
    ClientOp, ClientReply, ClientRequest, ClusterConfig, Input, Micros, Node, NodeId, NodeSet, Output, ReplyBody,
    RequestId, Roster, TimerKind,
};

const HOP: Micros = 5_000;

struct Net {
    nodes: Vec<Option<Node>>,
    now: Micros,
    seq: u64,
    queue: BTreeMap<(Micros, u64), (NodeId, Ev)>,
    timers: BTreeMap<(NodeId, TimerKind), Micros>,
    replies: Vec<(Micros, u64, ClientReply)>,
}

enum Ev {
    Input(Input),
    Timer(TimerKind),
}

impl Net {
    fn new(n: u8) -> Self {
        let cfg = ClusterConfig::with_n(n);
        let mut net = Net {
            nodes: (0..n).map(|i| Some(Node::new(NodeId(i), cfg.clone(), i as u64))).collect(),
            now: 0,
            seq: 0,
            queue: BTreeMap::new(),
            timers: BTreeMap::new(),
            replies: Vec::new(),
        };
        for i in 0..n {
            let outs = net.nodes[i as usize].as_mut().unwrap().start(0);
            net.apply(NodeId(i), outs);
        }
        net
    }

    fn push(&mut self, at: Micros, to: NodeId, ev: Ev) {
        self.seq += 1;
        self.queue.insert((at, self.seq), (to, ev));
    }

    fn apply(&mut self, from: NodeId, outs: Vec<Output>) {
        for o in outs {
            match o {
                Output::Send { to, msg } => {
                    let d = if to == from { 0 } else { HOP };
                    self.push(self.now + d, to, Ev::Input(Input::Peer { from, msg }));
                }
                Output::Reply { client, reply } => self.replies.push((self.now, client, reply)),
                Output::SetTimer { kind, at } => {
                    self.timers.insert((from, kind), at);
                    self.push(at, from, Ev::Timer(kind));
                }
            }
        }
    }

    fn run_until(&mut self, t: Micros) {
        while let Some((&(at, s), _)) = self.queue.iter().next() {
            if at > t {
                break;
            }
            let (to, ev) = self.queue.remove(&(at, s)).unwrap();
            self.now = at;
            let input = match ev {
                Ev::Input(i) => i,
                // Only the latest arming of a timer kind fires.
                Ev::Timer(kind) if self.timers.get(&(to, kind)) == Some(&at) => {
                    self.timers.remove(&(to, kind));
                    Input::Timer { kind }
                }
                Ev::Timer(_) => continue,
            };
            let Some(node) = self.nodes[to.idx()].as_mut() else { continue };
            let outs = node.step(at, input);
            self.apply(to, outs);
        }
        self.now = t;
    }

    fn client(&mut self, to: NodeId, client: u64, seq: u64, op: ClientOp) {
        let req = ClientRequest::new(RequestId::new(client, seq), op);
        self.push(self.now, to, Ev::Input(Input::Client { client, req }));
    }

    fn reply_for(&self, client: u64, seq: u64) -> Option<&ReplyBody> {
        self.replies.iter().find(|(_, c, r)| *c == client && r.request_id.seq == seq).map(|(_, _, r)| &r.body)
    }

    fn node(&self, i: u8) -> &Node {
        self.nodes[i as usize].as_ref().unwrap()
    }
}

fn settled(n: u8, roster: Roster) -> Net {
    let mut net = Net::new(n);
    net.client(roster.leader.unwrap(), 1, 1, ClientOp::RosterSet { roster });
    net.run_until(3_000_000);
    for i in 0..n {
        assert!(net.node(i).is_stable(net.now), "node {i} not stable");
    }
    net
}

#[test]
fn announced_roster_becomes_stable_everywhere() {
    let net = settled(3, Roster::full(NodeId(0), NodeSet::all(3)));
    let b = net.node(0).ballot();
    assert!(!b.is_zero());
    assert!((0..3).all(|i| net.node(i).ballot() == b));
    assert!(net.node(0).is_leader());
}

#[test]
fn write_then_local_read_at_every_responder() {
    let mut net = settled(3, Roster::full(NodeId(0), NodeSet::all(3)));
    net.client(NodeId(0), 2, 1, ClientOp::Put { key: "k".into(), value: "v1".into() });
    net.run_until(net.now + 200_000);
    assert_eq!(net.reply_for(2, 1), Some(&ReplyBody::WriteOk));
    for i in 0..3u8 {
        net.client(NodeId(i), 10 + i as u64, 1, ClientOp::Get { key: "k".into() });
    }
    net.run_until(net.now + 1);
    for i in 0..3u64 {
        assert_eq!(
            net.reply_for(10 + i, 1),
            Some(&ReplyBody::Value { value: Some("v1".into()), local: true }),
            "node {i}"
        );
    }
}

#[test]
fn non_responder_redirects_to_leader() {
    let mut net = settled(3, Roster::leader_only(NodeId(0)));
    net.client(NodeId(2), 5, 1, ClientOp::Get { key: "k".into() });
    net.run_until(net.now + 1);
    assert!(matches!(net.reply_for(5, 1), Some(ReplyBody::Redirect { to: Some(NodeId(0)), .. })));
    net.client(NodeId(0), 6, 1, ClientOp::Get { key: "k".into() });
    net.run_until(net.now + 1);
    assert_eq!(net.reply_for(6, 1), Some(&ReplyBody::Value { value: None, local: true }));
}

#[test]
fn read_during_write_is_held_until_commit() {
    let mut net = settled(3, Roster::full(NodeId(0), NodeSet::all(3)));
    net.client(NodeId(0), 2, 1, ClientOp::Put { key: "k".into(), value: "v".into() });
    // The Accept reaches node 2 one hop after the batch is sealed.
    let batch = net.node(0).config().batch_interval_us;
    net.run_until(net.now + batch + HOP);
    assert!(net.node(2).log().highest_accepted() > net.node(2).log().committed_prefix());
    net.client(NodeId(2), 9, 1, ClientOp::Get { key: "k".into() });
    net.run_until(net.now + 1);
    assert!(net.reply_for(9, 1).is_none(), "read answered before the write was certain");
    net.run_until(net.now + 4 * HOP);
    assert_eq!(net.reply_for(9, 1), Some(&ReplyBody::Value { value: Some("v".into()), local: true }));
}

#[test]
fn overlapping_roster_is_rejected() {
    let mut net = Net::new(3);
    let text = r#"{"leader":0,"ranges":[{"lo":"a","hi":"m","responders":[1]},{"lo":"c","responders":[2]}]}"#;
    let roster: Roster = serde_json::from_str(text).unwrap();
    net.client(NodeId(0), 1, 1, ClientOp::RosterSet { roster });
    net.run_until(1);
    assert!(matches!(net.reply_for(1, 1), Some(ReplyBody::Rejected { .. })));
    assert!(net.node(0).ballot().is_zero());
}

#[test]
fn crashed_responder_is_dropped_and_writes_resume() {
    let mut net = settled(3, Roster::full(NodeId(0), NodeSet::all(3)));
    net.run_until(net.now + 5_000_000);
    net.nodes[2] = None;
    let crash = net.now;
    net.client(NodeId(0), 3, 1, ClientOp::Put { key: "k".into(), value: "after".into() });
    let cfg = net.node(0).config().clone();
    let bound = cfg.hb_fail_us + cfg.hb_fail_jitter_us + cfg.lease_us + cfg.delta_us + 8 * HOP;
    net.run_until(crash + bound);
    assert_eq!(net.reply_for(3, 1), Some(&ReplyBody::WriteOk));
    assert!(!net.node(0).roster().responders_of(&"k".into()).contains(NodeId(2)));
}

#[test]
fn identical_inputs_give_identical_digests() {
    let a = settled(3, Roster::full(NodeId(1), NodeSet::all(3)));
    let b = settled(3, Roster::full(NodeId(1), NodeSet::all(3)));
    for i in 0..3 {
        assert_eq!(a.node(i).digest(), b.node(i).digest());
    }
}

//! Closed-loop simulated clients.
//!
//! A client sits at a site and sends reads to the nearest responder it
//! knows of, writes to the leader it believes in. Redirects are followed.
//! A read that is not answered within the unhold timeout is re-sent with the
//! same request id to another node; a write is only re-sent when the reply
//! proves it never entered the log (a redirect or "unavailable").

use bodega_core::{Ballot, Key, Micros, NodeId, RequestId, Roster, Value};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::scenario::{KeyDist, Workload};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientOpKind {
    Get,
    Put(Value),
}

#[derive(Debug, Clone)]
pub struct Pending {
    pub rid: RequestId,
    pub key: Key,
    pub kind: ClientOpKind,
    pub invoke: Micros,
    /// Index of the history record for this op.
    pub record: usize,
    pub sent_to: Vec<NodeId>,
    /// Some node emitted protocol messages while handling this read.
    pub sends_on_path: bool,
}

pub struct Client {
    pub id: u64,
    pub site: NodeId,
    /// Nodes ordered by distance from the site, the site first.
    pub nearest: Vec<NodeId>,
    pub scripted: bool,
    pub seq: u64,
    pub leader: Option<NodeId>,
    pub roster: Option<(Ballot, Roster)>,
    pub pending: Option<Pending>,
    pub wake_gen: u64,
    pub rng: ChaCha8Rng,
    zipf: Option<Zipf<f64>>,
}

impl Client {
    pub fn new(id: u64, site: NodeId, nearest: Vec<NodeId>, workload: &Workload, rng: ChaCha8Rng) -> Self {
        let zipf = match workload.distribution {
            KeyDist::Uniform => None,
            KeyDist::Zipf { theta } => Some(Zipf::new(workload.keys as f64, theta).expect("valid zipf")),
        };
        Client {
            id,
            site,
            nearest,
            scripted: false,
            seq: 0,
            leader: None,
            roster: None,
            pending: None,
            wake_gen: 0,
            rng,
            zipf,
        }
    }

    pub fn next_rid(&mut self) -> RequestId {
        self.seq += 1;
        RequestId { client: self.id, seq: self.seq }
    }

    /// Draws the next operation of the workload.
    pub fn draw(&mut self, w: &Workload) -> (Key, ClientOpKind) {
        let k = match &self.zipf {
            None => self.rng.random_range(0..w.keys),
            Some(z) => (z.sample(&mut self.rng) as u32).clamp(1, w.keys) - 1,
        };
        let key = Key::from(format!("k{k}"));
        if self.rng.random_bool(w.write_ratio) {
            let mut v = format!("c{}-{}", self.id, self.seq + 1);
            while v.len() < w.value_size {
                v.push('.');
            }
            (key, ClientOpKind::Put(Value::from(v)))
        } else {
            (key, ClientOpKind::Get)
        }
    }

    /// Where to send a fresh request.
    pub fn first_target(&self, key: &Key, kind: &ClientOpKind) -> NodeId {
        match kind {
            ClientOpKind::Put(_) => self.leader.unwrap_or(self.site),
            ClientOpKind::Get => match &self.roster {
                Some((_, r)) if !r.responders_of(key).contains(self.site) => {
                    self.leader.or(r.leader).unwrap_or(self.site)
                }
                _ => self.site,
            },
        }
    }

    /// Where to re-send a read that timed out or bounced.
    pub fn retry_target(&self) -> NodeId {
        let p = self.pending.as_ref().expect("retry without pending op");
        let last = p.sent_to.last().copied();
        if let Some(l) = self.leader {
            if Some(l) != last {
                return l;
            }
        }
        let i = p.sent_to.len() % self.nearest.len();
        let cand = self.nearest[i];
        if Some(cand) == last {
            self.nearest[(i + 1) % self.nearest.len()]
        } else {
            cand
        }
    }
}

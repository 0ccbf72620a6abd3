//! Client library: one connection per node, roster caching, redirects.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::time::Duration;

use bodega_core::{
    Ballot, ClientOp, ClientReply, ClientRequest, Key, NodeId, NodeStats, ReplyBody, RequestId, Roster, Value,
};
use tokio::net::TcpStream;

use crate::wire::{read_frame, write_frame, WireError, WireMsg};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("connecting to {addr}: {source}")]
    Connect { addr: SocketAddr, source: std::io::Error },
    #[error("wire: {0}")]
    Wire(#[from] WireError),
    #[error("request timed out")]
    Timeout,
    #[error("server error: {0}")]
    Server(String),
    #[error("unexpected reply: {0:?}")]
    Unexpected(ReplyBody),
    #[error("no node could serve the request after {0} attempts")]
    GaveUp(usize),
}

struct Conn {
    stream: TcpStream,
    seq: u64,
}

/// Where a read was answered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Answered {
    pub by: NodeId,
    pub local: bool,
}

pub struct KvClient {
    addrs: Vec<SocketAddr>,
    /// The node co-located with this client.
    pub site: NodeId,
    id: u64,
    seq: u64,
    conns: HashMap<NodeId, Conn>,
    roster: Option<(Ballot, Roster)>,
    leader: Option<NodeId>,
    pub timeout: Duration,
    pub max_attempts: usize,
}

impl KvClient {
    /// `addrs[i]` is the client address of node `i`.
    pub fn new(addrs: Vec<SocketAddr>, site: NodeId, id: u64) -> Self {
        KvClient {
            addrs,
            site,
            id,
            seq: 0,
            conns: HashMap::new(),
            roster: None,
            leader: None,
            timeout: Duration::from_secs(5),
            max_attempts: 20,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn next_request_id(&mut self) -> RequestId {
        self.seq += 1;
        RequestId::new(self.id, self.seq)
    }

    async fn conn(&mut self, to: NodeId) -> Result<&mut Conn, ClientError> {
        if !self.conns.contains_key(&to) {
            let addr = self.addrs[to.idx()];
            let stream = TcpStream::connect(addr).await.map_err(|source| ClientError::Connect { addr, source })?;
            let _ = stream.set_nodelay(true);
            self.conns.insert(to, Conn { stream, seq: 0 });
        }
        Ok(self.conns.get_mut(&to).unwrap())
    }

    /// Sends one request to `to` and waits for its reply.
    pub async fn call(&mut self, to: NodeId, req: ClientRequest) -> Result<ClientReply, ClientError> {
        let id = self.id;
        let timeout = self.timeout;
        let rid = req.request_id;
        let res = async {
            let c = self.conn(to).await?;
            c.seq += 1;
            write_frame(&mut c.stream, &WireMsg::Request(req).into_envelope(id, c.seq)).await?;
            loop {
                let env = read_frame(&mut c.stream).await?;
                match WireMsg::from_envelope(env)? {
                    WireMsg::Reply(r) if r.request_id == rid => return Ok(r),
                    WireMsg::Error { reason } => return Err(ClientError::Server(reason)),
                    _ => {}
                }
            }
        };
        match tokio::time::timeout(timeout, res).await {
            Ok(Ok(r)) => Ok(r),
            Ok(Err(e)) => {
                self.conns.remove(&to);
                Err(e)
            }
            Err(_) => {
                self.conns.remove(&to);
                Err(ClientError::Timeout)
            }
        }
    }

    pub async fn roster_get(&mut self, node: NodeId) -> Result<(Ballot, Roster, bool), ClientError> {
        let rid = self.next_request_id();
        match self.call(node, ClientRequest::new(rid, ClientOp::RosterGet)).await?.body {
            ReplyBody::Roster { ballot, roster, stable } => Ok((ballot, roster, stable)),
            other => Err(ClientError::Unexpected(other)),
        }
    }

    pub async fn roster_set(&mut self, node: NodeId, roster: Roster) -> Result<Ballot, ClientError> {
        let rid = self.next_request_id();
        match self.call(node, ClientRequest::new(rid, ClientOp::RosterSet { roster })).await?.body {
            ReplyBody::RosterSet { ballot } => Ok(ballot),
            ReplyBody::Rejected { reason } => Err(ClientError::Server(reason)),
            other => Err(ClientError::Unexpected(other)),
        }
    }

    pub async fn stats(&mut self, node: NodeId) -> Result<NodeStats, ClientError> {
        let rid = self.next_request_id();
        match self.call(node, ClientRequest::new(rid, ClientOp::Stats)).await?.body {
            ReplyBody::Stats(s) => Ok(*s),
            other => Err(ClientError::Unexpected(other)),
        }
    }

    /// Refreshes the cached roster from `node`.
    pub async fn refresh(&mut self, node: NodeId) {
        if let Ok((b, r, _)) = self.roster_get(node).await {
            if self.roster.as_ref().is_none_or(|(cb, _)| *cb <= b) {
                self.leader = r.leader;
                self.roster = Some((b, r));
            }
        }
    }

    fn hints(&self) -> Vec<NodeId> {
        let mut h = vec![self.site];
        h.extend((0..self.addrs.len() as u8).map(NodeId).filter(|p| *p != self.site));
        h
    }

    fn read_target(&self, key: &Key) -> NodeId {
        match &self.roster {
            Some((_, r)) if !r.responders_of(key).contains(self.site) => r.leader.unwrap_or(self.site),
            _ => self.site,
        }
    }

    /// Issues `op` with a fixed request id, following redirects.
    async fn route(&mut self, rid: RequestId, op: ClientOp, mut to: NodeId) -> Result<(NodeId, ReplyBody), ClientError> {
        for attempt in 0..self.max_attempts {
            let req = ClientRequest::new(rid, op.clone()).with_hints(self.hints());
            let body = match self.call(to, req).await {
                Ok(r) => r.body,
                // A write that may have reached a log is never re-sent: a
                // late duplicate could land after a newer write.
                Err(ClientError::Timeout | ClientError::Wire(_)) if matches!(op, ClientOp::Put { .. }) => {
                    return Err(ClientError::Timeout);
                }
                Err(ClientError::Connect { .. } | ClientError::Timeout | ClientError::Wire(_)) => {
                    to = NodeId(((to.0 as usize + 1) % self.addrs.len()) as u8);
                    continue;
                }
                Err(e) => return Err(e),
            };
            match body {
                ReplyBody::Redirect { to: Some(next), .. } if next != to => {
                    self.refresh(to).await;
                    to = next;
                }
                ReplyBody::Redirect { .. } | ReplyBody::Unavailable => {
                    self.refresh(to).await;
                    tokio::time::sleep(Duration::from_millis(20 * (attempt as u64 + 1).min(10))).await;
                    to = self.leader.unwrap_or(to);
                }
                other => return Ok((to, other)),
            }
        }
        Err(ClientError::GaveUp(self.max_attempts))
    }

    pub async fn get(&mut self, key: impl Into<Key>) -> Result<(Option<Value>, Answered), ClientError> {
        let rid = self.next_request_id();
        self.get_with(rid, key.into()).await
    }

    pub async fn get_with(&mut self, rid: RequestId, key: Key) -> Result<(Option<Value>, Answered), ClientError> {
        if self.roster.is_none() {
            self.refresh(self.site).await;
        }
        let first = self.read_target(&key);
        match self.route(rid, ClientOp::Get { key }, first).await? {
            (by, ReplyBody::Value { value, local }) => Ok((value, Answered { by, local })),
            (_, other) => Err(ClientError::Unexpected(other)),
        }
    }

    pub async fn put(&mut self, key: impl Into<Key>, value: impl Into<Value>) -> Result<(), ClientError> {
        let rid = self.next_request_id();
        self.put_with(rid, key.into(), value.into()).await
    }

    pub async fn put_with(&mut self, rid: RequestId, key: Key, value: Value) -> Result<(), ClientError> {
        if self.roster.is_none() {
            self.refresh(self.site).await;
        }
        let first = self.leader.unwrap_or(self.site);
        match self.route(rid, ClientOp::Put { key, value }, first).await? {
            (by, ReplyBody::WriteOk) => {
                self.leader = Some(by);
                Ok(())
            }
            (_, other) => Err(ClientError::Unexpected(other)),
        }
    }
}

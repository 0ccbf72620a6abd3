//! The daemon: one task owns the protocol core and consumes an ordered
//! event queue fed by peer links, client connections and timers.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use bodega_core::replay::{EventRecord, RecordHeader};
use bodega_core::{
    ClientOp, ClientReply, ClientRequest, Input, Micros, Node, NodeId, NodeStats, Output, PeerMsg, RequestId,
    TimerKind,
};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::JoinSet;
use tokio::time::Instant;
use tracing::{debug, info, warn};

use crate::config::NodeConfig;
use crate::wire::{read_frame, write_frame, Dedup, WireError, WireMsg};

/// Messages queued for a peer that is unreachable are dropped past this;
/// the core retransmits what matters.
const PEER_QUEUE: usize = 4096;
/// Client id under which the daemon itself submits the initial roster.
const OPERATOR: u64 = 0;

enum Event {
    Peer { from: NodeId, msg: PeerMsg },
    ClientOpen { conn: u64, tx: mpsc::UnboundedSender<ClientReply> },
    Client { conn: u64, req: ClientRequest },
    ClientClosed { conn: u64 },
}

pub struct Server {
    cfg: NodeConfig,
    peer_listener: TcpListener,
    client_listener: TcpListener,
}

/// A daemon running in the background of the current runtime.
pub struct Running {
    pub id: NodeId,
    pub peer_addr: SocketAddr,
    pub client_addr: SocketAddr,
    stats: watch::Receiver<Option<NodeStats>>,
    stop: Option<oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<anyhow::Result<()>>,
}

impl Running {
    /// Latest statistics published by the core loop.
    pub fn stats(&self) -> Option<NodeStats> {
        self.stats.borrow().clone()
    }

    pub async fn stop(mut self) -> anyhow::Result<()> {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        self.task.await?
    }
}

impl Server {
    pub async fn bind(cfg: NodeConfig) -> anyhow::Result<Server> {
        cfg.validate()?;
        let peer_listener = TcpListener::bind(cfg.peer_listen())
            .await
            .with_context(|| format!("binding peer address {}", cfg.peer_listen()))?;
        let client_listener = TcpListener::bind(cfg.client_listen())
            .await
            .with_context(|| format!("binding client address {}", cfg.client_listen()))?;
        Ok(Server { cfg, peer_listener, client_listener })
    }

    /// Uses listeners bound by the caller, e.g. on ephemeral ports.
    pub fn with_listeners(cfg: NodeConfig, peer: TcpListener, client: TcpListener) -> anyhow::Result<Server> {
        cfg.validate()?;
        Ok(Server { cfg, peer_listener: peer, client_listener: client })
    }

    pub fn spawn(self) -> anyhow::Result<Running> {
        let id = self.cfg.id;
        let peer_addr = self.peer_listener.local_addr()?;
        let client_addr = self.client_listener.local_addr()?;
        let (stop_tx, stop_rx) = oneshot::channel();
        let (stats_tx, stats) = watch::channel(None);
        let task = tokio::spawn(self.run_inner(async { let _ = stop_rx.await; }, stats_tx));
        Ok(Running { id, peer_addr, client_addr, stats, stop: Some(stop_tx), task })
    }

    /// Serves until `shutdown` completes.
    pub async fn run(self, shutdown: impl std::future::Future<Output = ()> + Send + 'static) -> anyhow::Result<()> {
        let (stats_tx, _rx) = watch::channel(None);
        self.run_inner(shutdown, stats_tx).await
    }

    async fn run_inner(
        self,
        shutdown: impl std::future::Future<Output = ()> + Send + 'static,
        stats_tx: watch::Sender<Option<NodeStats>>,
    ) -> anyhow::Result<()> {
        let Server { cfg, peer_listener, client_listener } = self;
        let me = cfg.id;
        let mut tasks = JoinSet::new();
        let (ev_tx, ev_rx) = mpsc::unbounded_channel();

        let mut links = BTreeMap::new();
        for p in cfg.peers.iter().filter(|p| p.id != me) {
            let (tx, rx) = mpsc::channel(PEER_QUEUE);
            links.insert(p.id, tx);
            tasks.spawn(outbound(me, p.id, p.peer_addr, rx));
        }
        tasks.spawn(accept_peers(peer_listener, ev_tx.clone()));
        tasks.spawn(accept_clients(client_listener, ev_tx.clone()));

        let recorder = match &cfg.record {
            Some(path) => {
                let f = File::create(path).with_context(|| format!("creating record file {}", path.display()))?;
                Some(BufWriter::new(f))
            }
            None => None,
        };
        info!(node = %me, peer = %cfg.peer_listen(), client = %cfg.client_listen(), "serving");
        let core = Core {
            node: Node::new(me, cfg.cluster.clone(), cfg.seed),
            me,
            epoch: Instant::now(),
            timers: BTreeMap::new(),
            links,
            clients: HashMap::new(),
            loopback: ev_tx,
            recorder,
            stats_tx,
            last_stats: 0,
        };
        let res = core.run(cfg, ev_rx, shutdown).await;
        tasks.shutdown().await;
        res
    }
}

struct Core {
    node: Node,
    me: NodeId,
    epoch: Instant,
    timers: BTreeMap<TimerKind, Micros>,
    links: BTreeMap<NodeId, mpsc::Sender<PeerMsg>>,
    clients: HashMap<u64, mpsc::UnboundedSender<ClientReply>>,
    loopback: mpsc::UnboundedSender<Event>,
    recorder: Option<BufWriter<File>>,
    stats_tx: watch::Sender<Option<NodeStats>>,
    last_stats: Micros,
}

impl Core {
    fn now(&self) -> Micros {
        self.epoch.elapsed().as_micros() as Micros
    }

    async fn run(
        mut self,
        cfg: NodeConfig,
        mut events: mpsc::UnboundedReceiver<Event>,
        shutdown: impl std::future::Future<Output = ()>,
    ) -> anyhow::Result<()> {
        if let Some(w) = &mut self.recorder {
            let header = RecordHeader { node: self.me, seed: cfg.seed, start: 0, config: cfg.cluster.clone() };
            writeln!(w, "{}", serde_json::to_string(&header)?)?;
        }
        let outs = self.node.start(0);
        self.apply(outs);
        if let Some(r) = cfg.initial_roster.clone().filter(|r| r.leader == Some(self.me)) {
            let req = ClientRequest::new(RequestId::new(OPERATOR, 1), ClientOp::RosterSet { roster: r });
            self.step(Input::Client { client: OPERATOR, req })?;
        }
        tokio::pin!(shutdown);
        loop {
            let deadline = self.timers.values().min().map(|at| self.epoch + Duration::from_micros(*at));
            let sleep = async move {
                match deadline {
                    Some(d) => tokio::time::sleep_until(d).await,
                    None => std::future::pending().await,
                }
            };
            tokio::select! {
                _ = &mut shutdown => break,
                ev = events.recv() => {
                    let Some(ev) = ev else { break };
                    match ev {
                        Event::Peer { from, msg } => self.step(Input::Peer { from, msg })?,
                        Event::ClientOpen { conn, tx } => {
                            self.clients.insert(conn, tx);
                        }
                        Event::ClientClosed { conn } => {
                            self.clients.remove(&conn);
                        }
                        Event::Client { conn, req } => self.step(Input::Client { client: conn, req })?,
                    }
                }
                _ = sleep => {
                    let now = self.now();
                    let due: Vec<TimerKind> = self.timers.iter().filter(|(_, at)| **at <= now).map(|(k, _)| *k).collect();
                    for kind in due {
                        self.timers.remove(&kind);
                        self.step(Input::Timer { kind })?;
                    }
                    if now >= self.last_stats + 100_000 {
                        self.last_stats = now;
                        self.stats_tx.send_replace(Some(self.node.stats()));
                    }
                }
            }
        }
        if let Some(w) = &mut self.recorder {
            w.flush()?;
        }
        Ok(())
    }

    fn step(&mut self, input: Input) -> anyhow::Result<()> {
        let now = self.now();
        let recorded = self.recorder.is_some().then(|| input.clone());
        let outs = self.node.step(now, input);
        if let (Some(w), Some(input)) = (&mut self.recorder, recorded) {
            let rec = EventRecord { now, input, digest: Some(self.node.digest()) };
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        self.apply(outs);
        Ok(())
    }

    fn apply(&mut self, outs: Vec<Output>) {
        for o in outs {
            match o {
                Output::Send { to, msg } if to == self.me => {
                    let _ = self.loopback.send(Event::Peer { from: to, msg });
                }
                Output::Send { to, msg } => {
                    if let Some(link) = self.links.get(&to) {
                        if link.try_send(msg).is_err() {
                            debug!(peer = %to, "peer queue full; dropping");
                        }
                    }
                }
                Output::Reply { client, reply } => {
                    if let Some(tx) = self.clients.get(&client) {
                        let _ = tx.send(reply);
                    }
                }
                Output::SetTimer { kind, at } => {
                    self.timers.insert(kind, at);
                }
            }
        }
    }
}

/// Keeps a connection to one peer, reconnecting with backoff. The sequence
/// counter survives reconnects so the receiver can drop redeliveries.
async fn outbound(me: NodeId, peer: NodeId, addr: SocketAddr, mut rx: mpsc::Receiver<PeerMsg>) {
    let mut seq = 0u64;
    let mut backoff = Duration::from_millis(20);
    loop {
        let mut stream = match TcpStream::connect(addr).await {
            Ok(s) => s,
            Err(e) => {
                debug!(%peer, "connect failed: {e}");
                tokio::time::sleep(backoff).await;
                backoff = (backoff * 2).min(Duration::from_secs(1));
                // Whatever queued up meanwhile is stale.
                while rx.try_recv().is_ok() {}
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        backoff = Duration::from_millis(20);
        seq += 1;
        if write_frame(&mut stream, &WireMsg::Hello { node: me }.into_envelope(me.0 as u64, seq)).await.is_err() {
            continue;
        }
        loop {
            let Some(msg) = rx.recv().await else { return };
            seq += 1;
            let env = WireMsg::Peer(msg).into_envelope(me.0 as u64, seq);
            if let Err(e) = write_frame(&mut stream, &env).await {
                debug!(%peer, "send failed: {e}");
                break;
            }
        }
    }
}

async fn accept_peers(listener: TcpListener, events: mpsc::UnboundedSender<Event>) {
    let dedup = Arc::new(std::sync::Mutex::new(Dedup::default()));
    loop {
        let Ok((stream, addr)) = listener.accept().await else { continue };
        let _ = stream.set_nodelay(true);
        let events = events.clone();
        let dedup = dedup.clone();
        tokio::spawn(async move {
            if let Err(e) = inbound_peer(stream, events, dedup).await {
                debug!(%addr, "peer connection closed: {e}");
            }
        });
    }
}

async fn inbound_peer(
    mut stream: TcpStream,
    events: mpsc::UnboundedSender<Event>,
    dedup: Arc<std::sync::Mutex<Dedup>>,
) -> Result<(), WireError> {
    let hello = read_frame(&mut stream).await?;
    let from = match WireMsg::from_envelope(hello.clone())? {
        WireMsg::Hello { node } => node,
        _ => return Err(WireError::UnknownKind { kind: hello.kind }),
    };
    dedup.lock().unwrap().accept(&hello);
    loop {
        let env = read_frame(&mut stream).await?;
        if !dedup.lock().unwrap().accept(&env) {
            continue;
        }
        match WireMsg::from_envelope(env) {
            Ok(WireMsg::Peer(msg)) => {
                if events.send(Event::Peer { from, msg }).is_err() {
                    return Ok(());
                }
            }
            Ok(_) => {}
            Err(e) => {
                reject(&mut stream, &e).await;
                return Err(e);
            }
        }
    }
}

async fn reject(stream: &mut TcpStream, e: &WireError) {
    if matches!(e, WireError::UnknownKind { .. } | WireError::Version { .. }) {
        let env = WireMsg::Error { reason: e.to_string() }.into_envelope(0, 0);
        let _ = write_frame(stream, &env).await;
    }
}

async fn accept_clients(listener: TcpListener, events: mpsc::UnboundedSender<Event>) {
    // Connection ids double as the core's reply channel ids; 0 is reserved.
    let next = AtomicU64::new(1);
    loop {
        let Ok((stream, addr)) = listener.accept().await else { continue };
        let _ = stream.set_nodelay(true);
        let conn = next.fetch_add(1, Ordering::Relaxed);
        let events = events.clone();
        tokio::spawn(async move {
            if let Err(e) = client_conn(conn, stream, events.clone()).await {
                if !matches!(e, WireError::Closed) {
                    warn!(%addr, "client connection closed: {e}");
                }
            }
            let _ = events.send(Event::ClientClosed { conn });
        });
    }
}

async fn client_conn(conn: u64, stream: TcpStream, events: mpsc::UnboundedSender<Event>) -> Result<(), WireError> {
    let (mut rd, mut wr) = stream.into_split();
    let (tx, mut rx) = mpsc::unbounded_channel::<ClientReply>();
    let (err_tx, mut err_rx) = mpsc::unbounded_channel::<String>();
    let _ = events.send(Event::ClientOpen { conn, tx });
    let writer = tokio::spawn(async move {
        let mut seq = 0;
        loop {
            let msg = tokio::select! {
                r = rx.recv() => match r { Some(r) => WireMsg::Reply(r), None => return },
                e = err_rx.recv() => match e { Some(reason) => WireMsg::Error { reason }, None => return },
            };
            seq += 1;
            let last = matches!(msg, WireMsg::Error { .. });
            if write_frame(&mut wr, &msg.into_envelope(0, seq)).await.is_err() || last {
                return;
            }
        }
    });
    let res = async {
        loop {
            let env = read_frame(&mut rd).await?;
            match WireMsg::from_envelope(env)? {
                WireMsg::Request(req) => {
                    if events.send(Event::Client { conn, req }).is_err() {
                        return Ok(());
                    }
                }
                other => return Err(WireError::UnknownKind { kind: format!("{other:?}") }),
            }
        }
    }
    .await;
    if let Err(e @ (WireError::UnknownKind { .. } | WireError::Version { .. })) = &res {
        let _ = err_tx.send(e.to_string());
        let _ = tokio::time::timeout(Duration::from_millis(200), writer).await;
    } else {
        writer.abort();
    }
    res
}

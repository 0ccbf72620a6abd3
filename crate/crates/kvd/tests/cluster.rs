use std::io::BufRead;
use std::path::Path;
use std::time::Duration;

use bodega_core::replay::{first_divergence, EventRecord, RecordHeader};
use bodega_core::{Ballot, ClusterConfig, KeyRange, NodeId, NodeSet, RangeAssignment, Roster};
use bodega_kvd::client::ClientError;
use bodega_kvd::{KvClient, NodeConfig, PeerAddr, Running, Server};
use bodega_lincheck::{check, History, OpKind, Outcome, Record};
use tokio::net::TcpListener;

fn fast(n: u8) -> ClusterConfig {
    ClusterConfig {
        guard_us: 600_000,
        lease_us: 600_000,
        delta_us: 24_000,
        hb_send_us: 40_000,
        hb_fail_us: 300_000,
        hb_fail_jitter_us: 75_000,
        ..ClusterConfig::with_n(n)
    }
}

async fn start(n: u8, roster: Option<Roster>, record_dir: Option<&Path>) -> Vec<Running> {
    let mut listeners = Vec::new();
    let mut peers = Vec::new();
    for i in 0..n {
        let p = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let c = TcpListener::bind("127.0.0.1:0").await.unwrap();
        peers.push(PeerAddr { id: NodeId(i), peer_addr: p.local_addr().unwrap(), client_addr: c.local_addr().unwrap() });
        listeners.push((p, c));
    }
    let mut out = Vec::new();
    for (i, (p, c)) in listeners.into_iter().enumerate() {
        let cfg = NodeConfig {
            id: NodeId(i as u8),
            peers: peers.clone(),
            peer_listen: None,
            client_listen: None,
            cluster: fast(n),
            initial_roster: roster.clone(),
            seed: i as u64,
            record: record_dir.map(|d| d.join(format!("node{i}.jsonl"))),
        };
        out.push(Server::with_listeners(cfg, p, c).unwrap().spawn().unwrap());
    }
    out
}

fn addrs(nodes: &[Running]) -> Vec<std::net::SocketAddr> {
    nodes.iter().map(|r| r.client_addr).collect()
}

async fn wait_stable(nodes: &[Running]) {
    let mut c = KvClient::new(addrs(nodes), NodeId(0), 999);
    for _ in 0..200 {
        let mut all = true;
        for r in nodes {
            match c.roster_get(r.id).await {
                Ok((b, _, stable)) if !b.is_zero() && stable => {}
                _ => all = false,
            }
        }
        if all {
            return;
        }
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
    panic!("cluster never became stable");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn fresh_node_has_no_roster_and_rejects_overlap() {
    let nodes = start(3, None, None).await;
    let mut c = KvClient::new(addrs(&nodes), NodeId(1), 1);
    let (ballot, roster, _) = c.roster_get(NodeId(1)).await.unwrap();
    assert_eq!(ballot, Ballot::ZERO);
    assert!(roster.is_empty());

    let set: NodeSet = [NodeId(1)].into_iter().collect();
    let bad = Roster {
        leader: Some(NodeId(0)),
        ranges: vec![
            RangeAssignment { range: KeyRange::new("a", Some("m".into())), responders: set },
            RangeAssignment { range: KeyRange::new("c", None), responders: set },
        ],
    };
    match c.roster_set(NodeId(0), bad).await {
        Err(ClientError::Server(reason)) => assert!(reason.contains("overlap"), "{reason}"),
        other => panic!("expected rejection, got {other:?}"),
    }
    for n in nodes {
        n.stop().await.unwrap();
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn puts_and_gets_are_linearizable_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let roster = Roster::full(NodeId(0), NodeSet::all(3));
    let nodes = start(3, Some(roster), Some(dir.path())).await;
    wait_stable(&nodes).await;

    let epoch = std::time::Instant::now();
    let mut tasks = tokio::task::JoinSet::new();
    for site in 0..3u8 {
        let a = addrs(&nodes);
        tasks.spawn(async move {
            let mut c = KvClient::new(a, NodeId(site), site as u64 + 1);
            let mut recs = Vec::new();
            let mut local = 0;
            for i in 0..40u32 {
                let key = format!("k{}", i % 3);
                let rid = c.next_request_id();
                let invoke = epoch.elapsed().as_micros() as u64;
                if i % 4 == 0 {
                    let v = format!("s{site}-{i}");
                    let res = c.put_with(rid, key.clone().into(), v.clone().into()).await;
                    let end = epoch.elapsed().as_micros() as u64;
                    let ok = res.is_ok();
                    recs.push(Record {
                        client: c.id(),
                        request_id: rid.seq,
                        op: OpKind::Put,
                        key,
                        value: Some(v),
                        invoke,
                        response: ok.then_some(end),
                        outcome: if ok { Outcome::Ok } else { Outcome::Timeout },
                    });
                } else {
                    let (v, at) = c.get_with(rid, key.clone().into()).await.expect("read served");
                    if at.local && at.by == NodeId(site) {
                        local += 1;
                    }
                    recs.push(Record {
                        client: c.id(),
                        request_id: rid.seq,
                        op: OpKind::Get,
                        key,
                        value: v.map(|v| v.to_string()),
                        invoke,
                        response: Some(epoch.elapsed().as_micros() as u64),
                        outcome: Outcome::Ok,
                    });
                }
            }
            (recs, local)
        });
    }
    let mut records = Vec::new();
    let mut local = 0;
    while let Some(r) = tasks.join_next().await {
        let (recs, l) = r.unwrap();
        records.extend(recs);
        local += l;
    }
    assert!(local > 0, "no read was served locally");
    let history = History::new(records).unwrap();
    assert!(check(&history).is_ok(), "history not linearizable");

    for n in nodes {
        n.stop().await.unwrap();
    }
    for i in 0..3 {
        let f = std::fs::File::open(dir.path().join(format!("node{i}.jsonl"))).unwrap();
        let mut lines = std::io::BufReader::new(f).lines();
        let header: RecordHeader = serde_json::from_str(&lines.next().unwrap().unwrap()).unwrap();
        let events: Vec<EventRecord> = lines.map(|l| serde_json::from_str(&l.unwrap()).unwrap()).collect();
        assert!(events.len() > 10);
        assert_eq!(first_divergence(&header, &events), None, "node {i} replay diverged");
    }
}

//! Framing: a 4-byte big-endian length followed by a JSON envelope
//! `{proto_version, from, kind, payload, seq}`.

use bodega_core::{ClientReply, ClientRequest, NodeId, PeerMsg};
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

pub const PROTO_VERSION: u32 = 1;
/// Frames above this size are refused.
pub const MAX_FRAME: usize = 16 << 20;

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("connection closed")]
    Closed,
    #[error("truncated frame: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error("malformed envelope: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported protocol version {got} (this build speaks {PROTO_VERSION})")]
    Version { got: u32 },
    #[error("unknown message kind `{kind}` for protocol version {PROTO_VERSION}")]
    UnknownKind { kind: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub proto_version: u32,
    pub from: u64,
    pub kind: String,
    pub payload: Json,
    pub seq: u64,
}

/// Everything that travels over a connection.
#[derive(Debug, Clone, PartialEq)]
pub enum WireMsg {
    /// First frame on a peer connection.
    Hello { node: NodeId },
    Peer(PeerMsg),
    Request(ClientRequest),
    Reply(ClientReply),
    /// Sent before closing a connection that spoke something we reject.
    Error { reason: String },
}

const CLIENT_REQUEST: &str = "client_request";
const CLIENT_REPLY: &str = "client_reply";
const HELLO: &str = "hello";
const ERROR: &str = "error";

impl WireMsg {
    pub fn into_envelope(self, from: u64, seq: u64) -> Envelope {
        let (kind, payload) = match self {
            WireMsg::Hello { node } => (HELLO.to_string(), serde_json::json!({ "node": node })),
            WireMsg::Peer(m) => {
                // PeerMsg is already tagged as {kind, payload}.
                let mut v = serde_json::to_value(&m).expect("peer message serializes");
                let payload = v.get_mut("payload").map(Json::take).unwrap_or(Json::Null);
                (m.kind().to_string(), payload)
            }
            WireMsg::Request(r) => (CLIENT_REQUEST.to_string(), serde_json::to_value(r).expect("request serializes")),
            WireMsg::Reply(r) => (CLIENT_REPLY.to_string(), serde_json::to_value(r).expect("reply serializes")),
            WireMsg::Error { reason } => (ERROR.to_string(), serde_json::json!({ "reason": reason })),
        };
        Envelope { proto_version: PROTO_VERSION, from, kind, payload, seq }
    }

    pub fn from_envelope(env: Envelope) -> Result<WireMsg, WireError> {
        if env.proto_version != PROTO_VERSION {
            return Err(WireError::Version { got: env.proto_version });
        }
        Ok(match env.kind.as_str() {
            HELLO => {
                #[derive(Deserialize)]
                struct H {
                    node: NodeId,
                }
                WireMsg::Hello { node: serde_json::from_value::<H>(env.payload)?.node }
            }
            CLIENT_REQUEST => WireMsg::Request(serde_json::from_value(env.payload)?),
            CLIENT_REPLY => WireMsg::Reply(serde_json::from_value(env.payload)?),
            ERROR => WireMsg::Error {
                reason: env.payload.get("reason").and_then(Json::as_str).unwrap_or_default().to_string(),
            },
            kind => {
                let tagged = serde_json::json!({ "kind": kind, "payload": env.payload });
                match serde_json::from_value::<PeerMsg>(tagged) {
                    Ok(m) => WireMsg::Peer(m),
                    Err(e) if e.to_string().contains("unknown variant") => {
                        return Err(WireError::UnknownKind { kind: kind.to_string() })
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        })
    }
}

pub fn encode(env: &Envelope) -> Vec<u8> {
    let body = serde_json::to_vec(env).expect("envelope serializes");
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

/// Parses one frame from the front of `buf`; returns the envelope and the
/// number of bytes consumed, or `None` if more bytes are needed.
pub fn decode(buf: &[u8]) -> Result<Option<(Envelope, usize)>, WireError> {
    if buf.len() < 4 {
        return Ok(None);
    }
    let len = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
    if len > MAX_FRAME {
        return Err(WireError::TooLarge(len));
    }
    if buf.len() < 4 + len {
        return Ok(None);
    }
    let env = serde_json::from_slice(&buf[4..4 + len])?;
    Ok(Some((env, 4 + len)))
}

pub async fn read_frame<R: AsyncRead + Unpin>(r: &mut R) -> Result<Envelope, WireError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let k = r.read(&mut len[got..]).await?;
        if k == 0 {
            return Err(if got == 0 { WireError::Closed } else { WireError::Truncated { expected: 4, got } });
        }
        got += k;
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(WireError::TooLarge(len));
    }
    let mut body = vec![0u8; len];
    let mut got = 0;
    while got < len {
        let k = r.read(&mut body[got..]).await?;
        if k == 0 {
            return Err(WireError::Truncated { expected: len, got });
        }
        got += k;
    }
    Ok(serde_json::from_slice(&body)?)
}

pub async fn write_frame<W: AsyncWrite + Unpin>(w: &mut W, env: &Envelope) -> Result<(), WireError> {
    w.write_all(&encode(env)).await?;
    Ok(())
}

/// Drops redelivered frames: accepts only strictly increasing `seq` per
/// sender.
#[derive(Debug, Default)]
pub struct Dedup {
    last: std::collections::HashMap<u64, u64>,
}

impl Dedup {
    pub fn accept(&mut self, env: &Envelope) -> bool {
        let last = self.last.entry(env.from).or_insert(0);
        if env.seq <= *last {
            return false;
        }
        *last = env.seq;
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bodega_core::{Ballot, ClientOp, RequestId};

    #[test]
    fn peer_roundtrip() {
        let m = PeerMsg::AcceptNote { ballot: Ballot::new(3, 1), slot: 9 };
        let env = WireMsg::Peer(m.clone()).into_envelope(1, 5);
        assert_eq!(env.kind, "accept_note");
        let bytes = encode(&env);
        let (back, used) = decode(&bytes).unwrap().unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(WireMsg::from_envelope(back).unwrap(), WireMsg::Peer(m));
    }

    #[test]
    fn request_roundtrip() {
        let r = ClientRequest::new(RequestId::new(7, 1), ClientOp::Put { key: "k".into(), value: "v".into() });
        let env = WireMsg::Request(r.clone()).into_envelope(7, 1);
        assert_eq!(WireMsg::from_envelope(env).unwrap(), WireMsg::Request(r));
    }

    #[test]
    fn unknown_kind_is_versioned_error() {
        let env = Envelope { proto_version: PROTO_VERSION, from: 0, kind: "gossip".into(), payload: Json::Null, seq: 1 };
        let e = WireMsg::from_envelope(env).unwrap_err();
        assert!(matches!(e, WireError::UnknownKind { .. }));
        assert!(e.to_string().contains("version 1"));
        let env = Envelope { proto_version: 9, from: 0, kind: "commit".into(), payload: Json::Null, seq: 1 };
        assert!(matches!(WireMsg::from_envelope(env), Err(WireError::Version { got: 9 })));
    }

    #[test]
    fn partial_and_oversized() {
        let env = WireMsg::Hello { node: NodeId(2) }.into_envelope(2, 1);
        let bytes = encode(&env);
        assert!(decode(&bytes[..bytes.len() - 1]).unwrap().is_none());
        let big = ((MAX_FRAME + 1) as u32).to_be_bytes();
        assert!(matches!(decode(&big), Err(WireError::TooLarge(_))));
    }

    #[test]
    fn dedup_by_seq() {
        let mut d = Dedup::default();
        let e = |seq| WireMsg::Hello { node: NodeId(0) }.into_envelope(3, seq);
        assert!(d.accept(&e(1)));
        assert!(d.accept(&e(2)));
        assert!(!d.accept(&e(2)));
        assert!(!d.accept(&e(1)));
        assert!(d.accept(&e(5)));
    }
}

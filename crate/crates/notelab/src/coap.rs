//! CoAP client with confirmable retransmission, and a deduplicating
//! server, both over the datagram shim.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU16, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use notelab_core::coap::{Code, Message, MessageType, Timing};
use notelab_core::link::DelayModel;
use tokio::sync::oneshot;

use crate::service::{AbortOnDrop, Service};
use crate::shim::{ByteCounters, ShimDatagram, ShimError};

pub const DEFAULT_PORT: u16 = 5683;
/// How long the server remembers a (source, message id) pair.
pub const DEDUP_WINDOW: Duration = Duration::from_secs(60);
const MAX_DATAGRAM: usize = 64 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum CoapError {
    #[error("no acknowledgement after {attempts} transmissions")]
    TransmissionGiveUp { attempts: u32 },
    #[error("peer reset the exchange")]
    Reset,
    #[error(transparent)]
    Encode(#[from] notelab_core::coap::EncodeError),
    #[error(transparent)]
    Shim(#[from] ShimError),
}

type Pending = Arc<Mutex<HashMap<u16, oneshot::Sender<Message>>>>;

/// Client endpoint. Requests may be issued concurrently.
pub struct CoapClient {
    sock: Arc<ShimDatagram>,
    pending: Pending,
    next_mid: AtomicU16,
    next_token: AtomicU16,
    timing: Timing,
    _reader: AbortOnDrop,
}

impl CoapClient {
    pub async fn open(model: DelayModel, timing: Timing) -> Result<CoapClient, CoapError> {
        let sock = Arc::new(ShimDatagram::open(model).await?);
        let pending: Pending = Arc::default();
        let reader = tokio::spawn(client_reader(sock.clone(), pending.clone()));
        // Message ids start at a socket-dependent point so restarted clients
        // do not collide with the server's dedup memory.
        let start = sock.local_addr().port().wrapping_mul(31);
        Ok(CoapClient {
            sock,
            pending,
            next_mid: AtomicU16::new(start),
            next_token: AtomicU16::new(1),
            timing,
            _reader: AbortOnDrop(reader),
        })
    }

    pub fn counters(&self) -> Arc<ByteCounters> {
        self.sock.counters()
    }

    pub fn socket(&self) -> &ShimDatagram {
        &self.sock
    }

    fn request(&self, mtype: MessageType, path: &str, payload: &[u8]) -> Message {
        let mid = self.next_mid.fetch_add(1, Ordering::Relaxed);
        let mut m = Message::new(mtype, Code::POST, mid).with_path(path);
        m.token = self.next_token.fetch_add(1, Ordering::Relaxed).to_be_bytes().to_vec();
        m.payload = payload.to_vec();
        m
    }

    /// Confirmable POST. Retransmits on the timing schedule until the
    /// piggybacked response arrives or the exchange is abandoned.
    pub async fn post_confirmable(&self, server: SocketAddr, path: &str, payload: &[u8]) -> Result<Message, CoapError> {
        let req = self.request(MessageType::Confirmable, path, payload);
        let bytes = req.encode()?;
        let (tx, mut rx) = oneshot::channel();
        self.pending.lock().unwrap().insert(req.message_id, tx);
        let mut attempts = 0;
        for attempt in 0..=self.timing.max_retransmit {
            attempts += 1;
            self.sock.send_to(&bytes, server).await?;
            match tokio::time::timeout(self.timing.timeout_after(attempt), &mut rx).await {
                Ok(Ok(resp)) if resp.mtype == MessageType::Reset => return Err(CoapError::Reset),
                Ok(Ok(resp)) => return Ok(resp),
                Ok(Err(_)) => break,
                Err(_) => {}
            }
        }
        self.pending.lock().unwrap().remove(&req.message_id);
        Err(CoapError::TransmissionGiveUp { attempts })
    }

    /// Non-confirmable POST: one datagram, no retransmission.
    pub async fn post_non(&self, server: SocketAddr, path: &str, payload: &[u8]) -> Result<(), CoapError> {
        let req = self.request(MessageType::NonConfirmable, path, payload);
        self.sock.send_to(&req.encode()?, server).await?;
        Ok(())
    }
}

async fn client_reader(sock: Arc<ShimDatagram>, pending: Pending) {
    let mut buf = vec![0u8; MAX_DATAGRAM];
    loop {
        let Ok((n, _)) = sock.recv_from(&mut buf).await else { continue };
        let Ok(msg) = Message::decode(&buf[..n]) else { continue };
        if matches!(msg.mtype, MessageType::Acknowledgement | MessageType::Reset) {
            if let Some(tx) = pending.lock().unwrap().remove(&msg.message_id) {
                let _ = tx.send(msg);
            }
        }
    }
}

/// One request as handed to a server handler.
#[derive(Debug, Clone)]
pub struct CoapRequest {
    pub code: Code,
    pub path: String,
    pub payload: Vec<u8>,
    pub peer: SocketAddr,
    pub confirmable: bool,
}

pub type CoapHandler = Arc<dyn Fn(CoapRequest) -> Code + Send + Sync>;

struct DedupEntry {
    seen: Instant,
    reply: Option<Vec<u8>>,
}

/// Running server. `effects` counts handler invocations.
pub struct CoapServer {
    service: Service,
    effects: Arc<AtomicU64>,
    sock: Arc<ShimDatagram>,
}

impl CoapServer {
    pub async fn bind(addr: SocketAddr, model: DelayModel, handler: CoapHandler) -> Result<CoapServer, CoapError> {
        let sock = Arc::new(ShimDatagram::bind(addr, model).await?);
        let effects = Arc::new(AtomicU64::new(0));
        let task = tokio::spawn(serve(sock.clone(), handler, effects.clone()));
        Ok(CoapServer { service: Service::new(sock.local_addr(), task), effects, sock })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.service.local_addr()
    }

    pub fn effects(&self) -> u64 {
        self.effects.load(Ordering::SeqCst)
    }

    pub fn socket(&self) -> &ShimDatagram {
        &self.sock
    }

    pub fn is_running(&self) -> bool {
        self.service.is_running()
    }

    pub async fn shutdown(&mut self) {
        self.service.shutdown().await;
    }
}

async fn serve(sock: Arc<ShimDatagram>, handler: CoapHandler, effects: Arc<AtomicU64>) {
    let mut seen: HashMap<(SocketAddr, u16), DedupEntry> = HashMap::new();
    let mut last_purge = Instant::now();
    let mut next_mid: u16 = 0x8000;
    let mut buf = vec![0u8; MAX_DATAGRAM];
    loop {
        let Ok((n, peer)) = sock.recv_from(&mut buf).await else { continue };
        let now = Instant::now();
        if now.duration_since(last_purge) > Duration::from_secs(1) {
            seen.retain(|_, e| now.duration_since(e.seen) < DEDUP_WINDOW);
            last_purge = now;
        }
        let Ok(msg) = Message::decode(&buf[..n]) else { continue };
        let confirmable = match msg.mtype {
            MessageType::Confirmable => true,
            MessageType::NonConfirmable => false,
            MessageType::Acknowledgement | MessageType::Reset => continue,
        };
        let key = (peer, msg.message_id);
        if let Some(e) = seen.get(&key) {
            if let Some(reply) = &e.reply {
                let _ = sock.send_to(reply, peer).await;
            }
            continue;
        }
        if msg.code == Code::EMPTY {
            // CoAP ping.
            if confirmable {
                let mut rst = Message::new(MessageType::Reset, Code::EMPTY, msg.message_id);
                rst.token.clear();
                let _ = sock.send_to(&rst.encode().unwrap_or_default(), peer).await;
            }
            continue;
        }
        let code = if msg.code.is_request() {
            effects.fetch_add(1, Ordering::SeqCst);
            handler(CoapRequest {
                code: msg.code,
                path: msg.uri_path().join("/"),
                payload: msg.payload.clone(),
                peer,
                confirmable,
            })
        } else {
            Code::BAD_REQUEST
        };
        let reply = if confirmable {
            let mut ack = Message::new(MessageType::Acknowledgement, code, msg.message_id);
            ack.token = msg.token.clone();
            ack
        } else {
            next_mid = next_mid.wrapping_add(1);
            let mut non = Message::new(MessageType::NonConfirmable, code, next_mid);
            non.token = msg.token.clone();
            non
        };
        let reply = reply.encode().ok();
        if let Some(bytes) = &reply {
            let _ = sock.send_to(bytes, peer).await;
        }
        seen.insert(key, DedupEntry { seen: now, reply });
    }
}

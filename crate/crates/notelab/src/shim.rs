//! Loopback transport shim with injected delay, jitter and datagram loss.
//!
//! Logical addresses (the lab's 192.168.x.y plan) are labels only; every
//! channel runs over 127.0.0.1. A stream's [`DelayModel`] applies to both
//! directions as seen by the side that opened it: outgoing bytes are held
//! back before they reach the socket and incoming bytes before they reach
//! the reader, each by an independently sampled delay, with per-direction
//! FIFO order preserved.

use std::io;
use std::net::{Ipv4Addr, SocketAddr};
use std::pin::Pin;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll};
use std::time::Duration;

use notelab_core::link::{Decision, DelayModel, DelayModelError, LinkSchedule};
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt, DuplexStream, ReadBuf};
use tokio::net::{TcpListener, TcpStream, UdpSocket};
use tokio::sync::mpsc;
use tokio::time::Instant;

pub const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
const PIPE_CAPACITY: usize = 256 * 1024;
const CHUNK: usize = 64 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum ShimError {
    #[error("connection refused by {0}")]
    ConnectionRefused(SocketAddr),
    #[error("timed out connecting to {0}")]
    Timeout(SocketAddr),
    #[error("datagram send failed: {0}")]
    SendFailed(io::Error),
    #[error("invalid delay model: {0}")]
    Model(#[from] DelayModelError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A component address: the logical label from the addressing plan plus the
/// loopback port it actually binds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    pub logical_addr: String,
    pub port: u16,
    /// Loopback port to bind; defaults to `port`. Zero picks a free port.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bind_port: Option<u16>,
}

impl Endpoint {
    pub fn new(logical_addr: impl Into<String>, port: u16) -> Self {
        Endpoint { logical_addr: logical_addr.into(), port, bind_port: None }
    }

    /// Same label, bound to an ephemeral loopback port.
    pub fn ephemeral(logical_addr: impl Into<String>, port: u16) -> Self {
        Endpoint { logical_addr: logical_addr.into(), port, bind_port: Some(0) }
    }

    pub fn bind_addr(&self) -> SocketAddr {
        SocketAddr::from((Ipv4Addr::LOCALHOST, self.bind_port.unwrap_or(self.port)))
    }

    pub fn label(&self) -> String {
        format!("{}:{}", self.logical_addr, self.port)
    }
}

/// Running byte totals for one channel or one listener.
#[derive(Debug, Default)]
pub struct ByteCounters {
    sent: AtomicU64,
    received: AtomicU64,
}

impl ByteCounters {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn sent(&self) -> u64 {
        self.sent.load(Ordering::Relaxed)
    }

    pub fn received(&self) -> u64 {
        self.received.load(Ordering::Relaxed)
    }

    pub fn totals(&self) -> (u64, u64) {
        (self.sent(), self.received())
    }

    fn add_sent(&self, n: usize) {
        self.sent.fetch_add(n as u64, Ordering::Relaxed);
    }

    fn add_received(&self, n: usize) {
        self.received.fetch_add(n as u64, Ordering::Relaxed);
    }
}

enum Inner {
    Direct(TcpStream),
    Piped(DuplexStream),
}

/// Ordered reliable byte stream. Implements tokio's `AsyncRead` and
/// `AsyncWrite`; every byte passing through is counted.
pub struct ShimStream {
    inner: Inner,
    counters: Arc<ByteCounters>,
    peer: SocketAddr,
}

impl std::fmt::Debug for ShimStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShimStream").field("peer", &self.peer).finish()
    }
}

/// Connects to `addr` with a fresh counter pair.
pub async fn open_stream(addr: SocketAddr, model: DelayModel) -> Result<ShimStream, ShimError> {
    open_stream_with(addr, model, ByteCounters::new()).await
}

/// Connects to `addr`, accumulating into `counters`.
pub async fn open_stream_with(
    addr: SocketAddr,
    model: DelayModel,
    counters: Arc<ByteCounters>,
) -> Result<ShimStream, ShimError> {
    model.validate_stream()?;
    let tcp = match tokio::time::timeout(CONNECT_TIMEOUT, TcpStream::connect(addr)).await {
        Err(_) => return Err(ShimError::Timeout(addr)),
        Ok(Err(e)) if e.kind() == io::ErrorKind::ConnectionRefused => return Err(ShimError::ConnectionRefused(addr)),
        Ok(r) => r?,
    };
    Ok(ShimStream::wrap(tcp, model, counters))
}

impl ShimStream {
    fn wrap(tcp: TcpStream, model: DelayModel, counters: Arc<ByteCounters>) -> ShimStream {
        let _ = tcp.set_nodelay(true);
        let peer = tcp.peer_addr().unwrap_or_else(|_| SocketAddr::from((Ipv4Addr::UNSPECIFIED, 0)));
        if model.fixed_ms == 0.0 && model.jitter_ms == 0.0 {
            return ShimStream { inner: Inner::Direct(tcp), counters, peer };
        }
        let (app, pump) = tokio::io::duplex(PIPE_CAPACITY);
        let (pump_rd, pump_wr) = tokio::io::split(pump);
        let (tcp_rd, tcp_wr) = tcp.into_split();
        tokio::spawn(delay_pump(pump_rd, tcp_wr, LinkSchedule::new(model)));
        tokio::spawn(delay_pump(tcp_rd, pump_wr, LinkSchedule::reverse(model)));
        ShimStream { inner: Inner::Piped(app), counters, peer }
    }

    pub fn counters(&self) -> &Arc<ByteCounters> {
        &self.counters
    }

    pub fn peer_addr(&self) -> SocketAddr {
        self.peer
    }
}

/// Moves bytes from `r` to `w`, delivering each chunk no earlier than its
/// read time plus a sampled delay and never before the previous chunk.
async fn delay_pump<R, W>(mut r: R, mut w: W, mut schedule: LinkSchedule)
where
    R: AsyncRead + Unpin,
    W: AsyncWrite + Unpin,
{
    let (tx, mut rx) = mpsc::unbounded_channel::<(Instant, Vec<u8>)>();
    let reader = async move {
        let mut last = Instant::now();
        let mut buf = vec![0u8; CHUNK];
        loop {
            let n = match r.read(&mut buf).await {
                Ok(0) | Err(_) => break,
                Ok(n) => n,
            };
            let at = (Instant::now() + schedule.sample_delay()).max(last);
            last = at;
            if tx.send((at, buf[..n].to_vec())).is_err() {
                break;
            }
        }
    };
    let writer = async move {
        while let Some((at, chunk)) = rx.recv().await {
            tokio::time::sleep_until(at).await;
            if w.write_all(&chunk).await.is_err() {
                return;
            }
        }
        let _ = w.shutdown().await;
    };
    tokio::join!(reader, writer);
}

impl AsyncRead for ShimStream {
    fn poll_read(self: Pin<&mut Self>, cx: &mut Context<'_>, buf: &mut ReadBuf<'_>) -> Poll<io::Result<()>> {
        let this = self.get_mut();
        let before = buf.filled().len();
        let res = match &mut this.inner {
            Inner::Direct(s) => Pin::new(s).poll_read(cx, buf),
            Inner::Piped(s) => Pin::new(s).poll_read(cx, buf),
        };
        if let Poll::Ready(Ok(())) = res {
            this.counters.add_received(buf.filled().len() - before);
        }
        res
    }
}

impl AsyncWrite for ShimStream {
    fn poll_write(self: Pin<&mut Self>, cx: &mut Context<'_>, data: &[u8]) -> Poll<io::Result<usize>> {
        let this = self.get_mut();
        let res = match &mut this.inner {
            Inner::Direct(s) => Pin::new(s).poll_write(cx, data),
            Inner::Piped(s) => Pin::new(s).poll_write(cx, data),
        };
        if let Poll::Ready(Ok(n)) = res {
            this.counters.add_sent(n);
        }
        res
    }

    fn poll_flush(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<io::Result<()>> {
        match &mut self.get_mut().inner {
            Inner::Direct(s) => Pin::new(s).poll_flush(cx),
            Inner::Piped(s) => Pin::new(s).poll_flush(cx),
        }
    }

    fn poll_shutdown(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<io::Result<()>> {
        match &mut self.get_mut().inner {
            Inner::Direct(s) => Pin::new(s).poll_shutdown(cx),
            Inner::Piped(s) => Pin::new(s).poll_shutdown(cx),
        }
    }
}

/// Accepting side of stream channels. All accepted streams share one
/// counter pair and the listener's delay model.
pub struct ShimListener {
    listener: TcpListener,
    model: DelayModel,
    counters: Arc<ByteCounters>,
}

impl ShimListener {
    pub async fn bind(addr: SocketAddr, model: DelayModel) -> Result<ShimListener, ShimError> {
        model.validate_stream()?;
        let listener = TcpListener::bind(addr).await?;
        Ok(ShimListener { listener, model, counters: ByteCounters::new() })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    pub fn counters(&self) -> Arc<ByteCounters> {
        self.counters.clone()
    }

    pub async fn accept(&self) -> io::Result<ShimStream> {
        let (tcp, _) = self.listener.accept().await?;
        Ok(ShimStream::wrap(tcp, self.model, self.counters.clone()))
    }
}

/// Best-effort datagram socket. Loss and delay are decided at send time
/// from the seeded schedule, one decision per datagram in send order.
pub struct ShimDatagram {
    sock: Arc<UdpSocket>,
    schedule: Mutex<LinkSchedule>,
    counters: Arc<ByteCounters>,
    forced_drops: AtomicU32,
    decisions: Mutex<Vec<bool>>,
}

impl ShimDatagram {
    pub async fn bind(addr: SocketAddr, model: DelayModel) -> Result<ShimDatagram, ShimError> {
        model.validate()?;
        let sock = UdpSocket::bind(addr).await?;
        Ok(ShimDatagram {
            sock: Arc::new(sock),
            schedule: Mutex::new(LinkSchedule::new(model)),
            counters: ByteCounters::new(),
            forced_drops: AtomicU32::new(0),
            decisions: Mutex::new(Vec::new()),
        })
    }

    /// Ephemeral loopback socket.
    pub async fn open(model: DelayModel) -> Result<ShimDatagram, ShimError> {
        Self::bind(SocketAddr::from((Ipv4Addr::LOCALHOST, 0)), model).await
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.sock.local_addr().expect("bound socket has an address")
    }

    pub fn counters(&self) -> Arc<ByteCounters> {
        self.counters.clone()
    }

    /// Drops the next `n` datagrams regardless of the model.
    pub fn force_drop_next(&self, n: u32) {
        self.forced_drops.fetch_add(n, Ordering::SeqCst);
    }

    /// One entry per send attempt so far: `true` where it was dropped.
    pub fn drop_log(&self) -> Vec<bool> {
        self.decisions.lock().unwrap().clone()
    }

    pub async fn send_to(&self, buf: &[u8], target: SocketAddr) -> Result<(), ShimError> {
        self.counters.add_sent(buf.len());
        let mut decision = self.schedule.lock().unwrap().next_decision();
        let forced = self
            .forced_drops
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        if forced {
            decision = Decision::Drop;
        }
        self.decisions.lock().unwrap().push(decision == Decision::Drop);
        match decision {
            Decision::Drop => Ok(()),
            Decision::Deliver { delay } if delay.is_zero() => {
                self.sock.send_to(buf, target).await.map(|_| ()).map_err(ShimError::SendFailed)
            }
            Decision::Deliver { delay } => {
                let sock = self.sock.clone();
                let buf = buf.to_vec();
                tokio::spawn(async move {
                    tokio::time::sleep(delay).await;
                    let _ = sock.send_to(&buf, target).await;
                });
                Ok(())
            }
        }
    }

    pub async fn recv_from(&self, buf: &mut [u8]) -> io::Result<(usize, SocketAddr)> {
        let (n, from) = self.sock.recv_from(buf).await?;
        self.counters.add_received(n);
        Ok((n, from))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::now_monotonic_ns;

    async fn pair(model: DelayModel) -> (ShimStream, ShimStream) {
        let l = ShimListener::bind("127.0.0.1:0".parse().unwrap(), DelayModel::default()).await.unwrap();
        let addr = l.local_addr();
        let (c, s) = tokio::join!(open_stream(addr, model), l.accept());
        (c.unwrap(), s.unwrap())
    }

    #[tokio::test]
    async fn zero_model_is_plain_loopback() {
        let (mut c, mut s) = pair(DelayModel::default()).await;
        assert_eq!(c.counters().totals(), (0, 0));
        c.write_all(b"0123456789").await.unwrap();
        let mut buf = [0u8; 10];
        s.read_exact(&mut buf).await.unwrap();
        assert_eq!(&buf, b"0123456789");
        assert_eq!(c.counters().sent(), 10);
        assert_eq!(s.counters().received(), 10);
    }

    #[tokio::test]
    async fn fixed_delay_is_a_lower_bound() {
        let (mut c, mut s) = pair(DelayModel::fixed(5.0)).await;
        for _ in 0..5 {
            let t0 = now_monotonic_ns();
            c.write_all(b"x").await.unwrap();
            let mut b = [0u8; 1];
            s.read_exact(&mut b).await.unwrap();
            let dt = now_monotonic_ns() - t0;
            assert!(dt >= 5_000_000, "{dt}");
            assert!(dt <= 10_000_000, "{dt}");
        }
    }

    #[tokio::test]
    async fn delay_applies_to_replies_too() {
        let (mut c, mut s) = pair(DelayModel::fixed(5.0)).await;
        let t0 = now_monotonic_ns();
        s.write_all(b"y").await.unwrap();
        let mut b = [0u8; 1];
        c.read_exact(&mut b).await.unwrap();
        assert!(now_monotonic_ns() - t0 >= 5_000_000);
    }

    #[tokio::test]
    async fn jitter_preserves_fifo() {
        let model = DelayModel { fixed_ms: 1.0, jitter_ms: 1.0, drop_prob: 0.0, seed: 9 };
        let (mut c, mut s) = pair(model).await;
        let writer = tokio::spawn(async move {
            for i in 0u32..100 {
                c.write_all(&i.to_be_bytes()).await.unwrap();
                tokio::time::sleep(Duration::from_micros(200)).await;
            }
            c.shutdown().await.unwrap();
        });
        let mut got = Vec::new();
        s.read_to_end(&mut got).await.unwrap();
        writer.await.unwrap();
        let seen: Vec<u32> = got.chunks(4).map(|c| u32::from_be_bytes(c.try_into().unwrap())).collect();
        assert_eq!(seen, (0..100).collect::<Vec<_>>());
    }

    #[tokio::test]
    async fn streams_reject_loss() {
        let err = open_stream("127.0.0.1:9".parse().unwrap(), DelayModel::lossy(0.1, 0)).await.unwrap_err();
        assert!(matches!(err, ShimError::Model(DelayModelError::DropOnStream)));
    }

    #[tokio::test]
    async fn refused_connection() {
        let l = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = l.local_addr().unwrap();
        drop(l);
        let err = open_stream(addr, DelayModel::default()).await.unwrap_err();
        assert!(matches!(err, ShimError::ConnectionRefused(_)), "{err}");
    }

    async fn deliver_count(model: DelayModel) -> (usize, Vec<bool>) {
        let rx = ShimDatagram::open(DelayModel::default()).await.unwrap();
        let tx = ShimDatagram::open(model).await.unwrap();
        for i in 0u8..100 {
            tx.send_to(&[i], rx.local_addr()).await.unwrap();
        }
        let mut n = 0;
        let mut buf = [0u8; 8];
        while let Ok(Ok(_)) = tokio::time::timeout(Duration::from_millis(100), rx.recv_from(&mut buf)).await {
            n += 1;
        }
        (n, tx.drop_log())
    }

    #[tokio::test]
    async fn datagram_loss_extremes() {
        assert_eq!(deliver_count(DelayModel::lossy(1.0, 1)).await.0, 0);
        assert_eq!(deliver_count(DelayModel::lossy(0.0, 1)).await.0, 100);
    }

    #[tokio::test]
    async fn datagram_loss_is_reproducible() {
        let (a, log_a) = deliver_count(DelayModel::lossy(0.5, 77)).await;
        let (b, log_b) = deliver_count(DelayModel::lossy(0.5, 77)).await;
        assert_eq!(a, b);
        assert_eq!(log_a, log_b);
        assert_eq!(a, log_a.iter().filter(|d| !**d).count());
    }

    #[tokio::test]
    async fn forced_drop() {
        let rx = ShimDatagram::open(DelayModel::default()).await.unwrap();
        let tx = ShimDatagram::open(DelayModel::default()).await.unwrap();
        tx.force_drop_next(1);
        tx.send_to(b"a", rx.local_addr()).await.unwrap();
        tx.send_to(b"b", rx.local_addr()).await.unwrap();
        let mut buf = [0u8; 4];
        let (n, _) = rx.recv_from(&mut buf).await.unwrap();
        assert_eq!(&buf[..n], b"b");
        assert_eq!(tx.drop_log(), vec![true, false]);
        assert_eq!(tx.counters().sent(), 2);
    }
}

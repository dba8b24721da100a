//! HTTP/1.1 server and keep-alive client over the stream shim.
//!
//! Bodies are framed by `Content-Length` only. A handler may instead answer
//! with a line stream whose body runs until the connection closes.

use std::future::Future;
use std::net::SocketAddr;
use std::pin::Pin;
use std::sync::Arc;
use std::time::Duration;

use notelab_core::http::{parse_request, parse_response, parse_response_head, HttpError, Method, Request, Response};
use notelab_core::link::DelayModel;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::sync::mpsc;

use crate::clock::now_monotonic_ns;
use crate::service::{reap, Connections, Service};
use crate::shim::{open_stream_with, ByteCounters, ShimError, ShimListener, ShimStream};

pub const DEFAULT_PORT: u16 = 8080;
/// A connection holding a partial request for this long is answered 400.
pub const PARTIAL_REQUEST_TIMEOUT: Duration = Duration::from_secs(5);
pub const REQUEST_TIMEOUT: Duration = Duration::from_secs(10);

pub enum Reply {
    Full(Response),
    /// Head is sent without `Content-Length`; each chunk is written as it
    /// arrives and the connection closes when the sender is dropped.
    Stream { head: Response, body: mpsc::UnboundedReceiver<Vec<u8>> },
}

impl From<Response> for Reply {
    fn from(r: Response) -> Self {
        Reply::Full(r)
    }
}

pub type BoxFuture<T> = Pin<Box<dyn Future<Output = T> + Send>>;
pub type HttpHandler = Arc<dyn Fn(Request, SocketAddr) -> BoxFuture<Reply> + Send + Sync>;

pub fn handler<F, Fut>(f: F) -> HttpHandler
where
    F: Fn(Request, SocketAddr) -> Fut + Send + Sync + 'static,
    Fut: Future<Output = Reply> + Send + 'static,
{
    Arc::new(move |req, peer| Box::pin(f(req, peer)))
}

pub struct HttpServer {
    service: Service,
    bytes: Arc<ByteCounters>,
}

impl HttpServer {
    pub async fn bind(addr: SocketAddr, handler: HttpHandler) -> Result<HttpServer, ShimError> {
        let listener = ShimListener::bind(addr, DelayModel::default()).await?;
        let local = listener.local_addr();
        let bytes = listener.counters();
        let task = tokio::spawn(async move {
            let mut conns = Connections::new();
            loop {
                let Ok(stream) = listener.accept().await else { continue };
                reap(&mut conns);
                conns.spawn(serve_connection(stream, handler.clone()));
            }
        });
        Ok(HttpServer { service: Service::new(local, task), bytes })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.service.local_addr()
    }

    pub fn byte_counters(&self) -> Arc<ByteCounters> {
        self.bytes.clone()
    }

    pub fn is_running(&self) -> bool {
        self.service.is_running()
    }

    pub async fn shutdown(&mut self) {
        self.service.shutdown().await;
    }
}

fn bad_request(reason: &str) -> Vec<u8> {
    let mut r = Response::with_body(400, "text/plain", reason.as_bytes().to_vec());
    r.headers.insert("Connection", "close");
    r.encode()
}

async fn serve_connection(mut stream: ShimStream, handler: HttpHandler) {
    let peer = stream.peer_addr();
    let mut buf = Vec::with_capacity(4096);
    loop {
        let req = match parse_request(&buf) {
            Ok(Some((req, used))) => {
                buf.drain(..used);
                req
            }
            Ok(None) => {
                let read = if buf.is_empty() {
                    stream.read_buf(&mut buf).await
                } else {
                    match tokio::time::timeout(PARTIAL_REQUEST_TIMEOUT, stream.read_buf(&mut buf)).await {
                        Ok(r) => r,
                        Err(_) => {
                            let _ = stream.write_all(&bad_request("incomplete request")).await;
                            return;
                        }
                    }
                };
                match read {
                    Ok(0) if !buf.is_empty() => {
                        let _ = stream.write_all(&bad_request("body shorter than Content-Length")).await;
                        return;
                    }
                    Ok(0) | Err(_) => return,
                    Ok(_) => continue,
                }
            }
            Err(HttpError::BadRequest(reason)) => {
                let _ = stream.write_all(&bad_request(reason)).await;
                return;
            }
        };
        let close = req.headers.get("connection").is_some_and(|v| v.eq_ignore_ascii_case("close"));
        match handler(req, peer).await {
            Reply::Full(mut resp) => {
                if close {
                    resp.headers.insert("Connection", "close");
                }
                if stream.write_all(&resp.encode()).await.is_err() || close {
                    return;
                }
            }
            Reply::Stream { mut head, mut body } => {
                head.headers.insert("Connection", "close");
                if stream.write_all(&head.encode_head(None)).await.is_err() {
                    return;
                }
                loop {
                    tokio::select! {
                        chunk = body.recv() => match chunk {
                            Some(c) => if stream.write_all(&c).await.is_err() { return },
                            None => break,
                        },
                        // The client hanging up ends the stream.
                        n = stream.read_buf(&mut buf) => if !matches!(n, Ok(k) if k > 0) { return },
                    }
                }
                let _ = stream.shutdown().await;
                return;
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HttpClientError {
    #[error(transparent)]
    Shim(#[from] ShimError),
    #[error("connection closed before a complete response")]
    ConnectionClosed,
    #[error("no response within the timeout")]
    Timeout,
    #[error("malformed response: {0}")]
    BadResponse(HttpError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct Conn {
    stream: ShimStream,
    buf: Vec<u8>,
    used: bool,
}

/// Keep-alive client for one server. A request that fails on a reused
/// connection is retried once on a fresh one.
pub struct HttpClient {
    addr: SocketAddr,
    model: DelayModel,
    host: String,
    conn: Option<Conn>,
    counters: Arc<ByteCounters>,
    timeout: Duration,
}

impl HttpClient {
    pub fn new(addr: SocketAddr, model: DelayModel) -> Self {
        HttpClient {
            addr,
            model,
            host: addr.to_string(),
            conn: None,
            counters: ByteCounters::new(),
            timeout: REQUEST_TIMEOUT,
        }
    }

    /// Value sent in the `Host` header.
    pub fn with_host(mut self, host: impl Into<String>) -> Self {
        self.host = host.into();
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn counters(&self) -> &Arc<ByteCounters> {
        &self.counters
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Opens the connection ahead of the first request.
    pub async fn connect(&mut self) -> Result<(), HttpClientError> {
        if self.conn.is_none() {
            let stream = open_stream_with(self.addr, self.model, self.counters.clone()).await?;
            self.conn = Some(Conn { stream, buf: Vec::new(), used: false });
        }
        Ok(())
    }

    pub async fn send(&mut self, mut req: Request) -> Result<Response, HttpClientError> {
        if req.headers.get("host").is_none() {
            req.headers.insert("Host", self.host.clone());
        }
        let wire = req.encode();
        let mut retried = false;
        loop {
            self.connect().await?;
            let conn = self.conn.as_mut().expect("connected above");
            let reused = conn.used;
            conn.used = true;
            let res = tokio::time::timeout(self.timeout, exchange(conn, &wire)).await;
            match res {
                Ok(Ok(resp)) => {
                    if resp.headers.get("connection").is_some_and(|v| v.eq_ignore_ascii_case("close")) {
                        self.conn = None;
                    }
                    return Ok(resp);
                }
                Ok(Err(e)) => {
                    self.conn = None;
                    let stale = matches!(e, HttpClientError::ConnectionClosed | HttpClientError::Io(_));
                    if reused && stale && !retried {
                        retried = true;
                        continue;
                    }
                    return Err(e);
                }
                Err(_) => {
                    self.conn = None;
                    return Err(HttpClientError::Timeout);
                }
            }
        }
    }

    pub async fn get(&mut self, target: &str) -> Result<Response, HttpClientError> {
        self.send(Request::new(Method::Get, target)).await
    }

    pub async fn post(&mut self, target: &str, content_type: &str, body: &[u8]) -> Result<Response, HttpClientError> {
        self.send(Request::new(Method::Post, target).header("Content-Type", content_type).body(body.to_vec()))
            .await
    }

    pub async fn put_json(&mut self, target: &str, body: &[u8]) -> Result<Response, HttpClientError> {
        self.send(Request::new(Method::Put, target).header("Content-Type", "application/json").body(body.to_vec()))
            .await
    }

    pub async fn patch_json(&mut self, target: &str, body: &[u8]) -> Result<Response, HttpClientError> {
        self.send(Request::new(Method::Patch, target).header("Content-Type", "application/json").body(body.to_vec()))
            .await
    }

    pub fn close(&mut self) {
        self.conn = None;
    }
}

async fn exchange(conn: &mut Conn, wire: &[u8]) -> Result<Response, HttpClientError> {
    conn.stream.write_all(wire).await?;
    loop {
        match parse_response(&conn.buf) {
            Ok(Some((resp, used))) => {
                conn.buf.drain(..used);
                return Ok(resp);
            }
            Ok(None) => {}
            Err(e) => return Err(HttpClientError::BadResponse(e)),
        }
        if conn.stream.read_buf(&mut conn.buf).await? == 0 {
            return Err(HttpClientError::ConnectionClosed);
        }
    }
}

/// Client side of a close-delimited line stream.
pub struct LineStream {
    stream: ShimStream,
    buf: Vec<u8>,
}

impl LineStream {
    /// Sends a GET and waits for the response head. Non-2xx answers are
    /// returned as the error's response.
    pub async fn open(addr: SocketAddr, target: &str, model: DelayModel) -> Result<(Response, LineStream), HttpClientError> {
        let mut stream = open_stream_with(addr, model, ByteCounters::new()).await?;
        let req = Request::new(Method::Get, target).header("Host", addr.to_string()).header("Accept", "application/x-ndjson");
        stream.write_all(&req.encode()).await?;
        let mut buf = Vec::new();
        let head = loop {
            match parse_response_head(&buf) {
                Ok(Some((resp, used))) => {
                    buf.drain(..used);
                    break resp;
                }
                Ok(None) => {}
                Err(e) => return Err(HttpClientError::BadResponse(e)),
            }
            let read = tokio::time::timeout(REQUEST_TIMEOUT, stream.read_buf(&mut buf))
                .await
                .map_err(|_| HttpClientError::Timeout)??;
            if read == 0 {
                return Err(HttpClientError::ConnectionClosed);
            }
        };
        Ok((head, LineStream { stream, buf }))
    }

    /// Next newline-terminated line (without the newline) and the clock
    /// reading when it became available. `None` once the server closes.
    pub async fn next_line(&mut self) -> Result<Option<(Vec<u8>, u64)>, HttpClientError> {
        loop {
            if let Some(i) = self.buf.iter().position(|&b| b == b'\n') {
                let at = now_monotonic_ns();
                let line: Vec<u8> = self.buf.drain(..=i).take(i).collect();
                return Ok(Some((line, at)));
            }
            if self.stream.read_buf(&mut self.buf).await? == 0 {
                return Ok(None);
            }
        }
    }
}

//! HTTP/1.1 request/response framing: no chunked encoding, bodies are
//! delimited by `Content-Length` only.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

/// Upper bound on a request or response head.
pub const MAX_HEAD_LEN: usize = 8 * 1024;
/// Upper bound on a body.
pub const MAX_BODY_LEN: usize = 4 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Get,
    Post,
    Put,
    Patch,
    Delete,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Get => "GET",
            Method::Post => "POST",
            Method::Put => "PUT",
            Method::Patch => "PATCH",
            Method::Delete => "DELETE",
        }
    }

    fn parse(s: &str) -> Option<Method> {
        Some(match s {
            "GET" => Method::Get,
            "POST" => Method::Post,
            "PUT" => Method::Put,
            "PATCH" => Method::Patch,
            "DELETE" => Method::Delete,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HttpError {
    #[error("bad request: {0}")]
    BadRequest(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Headers(Vec<(String, String)>);

impl Headers {
    pub fn new() -> Self {
        Headers(Vec::new())
    }

    /// Case-insensitive lookup of the first header with this name.
    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }

    pub fn insert(&mut self, name: impl Into<String>, value: impl Into<String>) {
        let name = name.into();
        self.0.retain(|(k, _)| !k.eq_ignore_ascii_case(&name));
        self.0.push((name, value.into()));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    fn write(&self, out: &mut Vec<u8>) {
        for (k, v) in &self.0 {
            out.extend_from_slice(k.as_bytes());
            out.extend_from_slice(b": ");
            out.extend_from_slice(v.as_bytes());
            out.extend_from_slice(b"\r\n");
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub method: Method,
    pub target: String,
    pub headers: Headers,
    pub body: Vec<u8>,
}

impl Request {
    pub fn new(method: Method, target: impl Into<String>) -> Self {
        Request { method, target: target.into(), headers: Headers::new(), body: Vec::new() }
    }

    pub fn header(mut self, name: &str, value: impl Into<String>) -> Self {
        self.headers.insert(name, value);
        self
    }

    pub fn body(mut self, body: impl Into<Vec<u8>>) -> Self {
        self.body = body.into();
        self
    }

    /// Path component of the target, without the query string.
    pub fn path(&self) -> &str {
        self.target.split_once('?').map_or(self.target.as_str(), |(p, _)| p)
    }

    pub fn query(&self) -> Option<&str> {
        self.target.split_once('?').map(|(_, q)| q)
    }

    /// Serializes with a `Content-Length` header whenever the method can
    /// carry a body.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(128 + self.body.len());
        out.extend_from_slice(self.method.as_str().as_bytes());
        out.push(b' ');
        out.extend_from_slice(self.target.as_bytes());
        out.extend_from_slice(b" HTTP/1.1\r\n");
        let mut headers = self.headers.clone();
        if !self.body.is_empty() || matches!(self.method, Method::Post | Method::Put | Method::Patch) {
            headers.insert("Content-Length", self.body.len().to_string());
        }
        headers.write(&mut out);
        out.extend_from_slice(b"\r\n");
        out.extend_from_slice(&self.body);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: u16,
    pub headers: Headers,
    pub body: Vec<u8>,
}

pub fn reason_phrase(status: u16) -> &'static str {
    match status {
        200 => "OK",
        204 => "No Content",
        400 => "Bad Request",
        403 => "Forbidden",
        404 => "Not Found",
        405 => "Method Not Allowed",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Unknown",
    }
}

impl Response {
    pub fn new(status: u16) -> Self {
        Response { status, headers: Headers::new(), body: Vec::new() }
    }

    pub fn with_body(status: u16, content_type: &str, body: impl Into<Vec<u8>>) -> Self {
        let mut r = Response::new(status);
        r.headers.insert("Content-Type", content_type);
        r.body = body.into();
        r
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.encode_head(Some(self.body.len()));
        out.extend_from_slice(&self.body);
        out
    }

    /// Status line and headers only. `None` omits `Content-Length`, for
    /// responses whose body runs until the connection closes.
    pub fn encode_head(&self, content_length: Option<usize>) -> Vec<u8> {
        let mut out = Vec::with_capacity(96);
        out.extend_from_slice(format!("HTTP/1.1 {} {}\r\n", self.status, reason_phrase(self.status)).as_bytes());
        let mut headers = self.headers.clone();
        if let Some(n) = content_length {
            headers.insert("Content-Length", n.to_string());
        }
        headers.write(&mut out);
        out.extend_from_slice(b"\r\n");
        out
    }
}

fn find_head_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n").map(|i| i + 4)
}

struct Head<'a> {
    start_line: &'a str,
    headers: Headers,
    len: usize,
}

fn parse_head(buf: &[u8]) -> Result<Option<Head<'_>>, HttpError> {
    let Some(len) = find_head_end(buf) else {
        if buf.len() > MAX_HEAD_LEN {
            return Err(HttpError::BadRequest("head exceeds 8 KiB"));
        }
        return Ok(None);
    };
    let text = core::str::from_utf8(&buf[..len - 4]).map_err(|_| HttpError::BadRequest("head is not UTF-8"))?;
    let mut lines = text.split("\r\n");
    let start_line = lines.next().unwrap_or_default();
    let mut headers = Headers::new();
    for line in lines {
        let (name, value) = line.split_once(':').ok_or(HttpError::BadRequest("header line without ':'"))?;
        let name = name.trim();
        if name.is_empty() || name.contains(' ') {
            return Err(HttpError::BadRequest("invalid header name"));
        }
        headers.0.push((name.to_string(), value.trim().to_string()));
    }
    Ok(Some(Head { start_line, headers, len }))
}

fn content_length(headers: &Headers) -> Result<usize, HttpError> {
    let mut found: Option<usize> = None;
    for (k, v) in headers.iter() {
        if k.eq_ignore_ascii_case("content-length") {
            let n: usize = v.parse().map_err(|_| HttpError::BadRequest("invalid Content-Length"))?;
            if found.is_some_and(|f| f != n) {
                return Err(HttpError::BadRequest("conflicting Content-Length headers"));
            }
            found = Some(n);
        }
        if k.eq_ignore_ascii_case("transfer-encoding") {
            return Err(HttpError::BadRequest("transfer-encoding is not supported"));
        }
    }
    let n = found.unwrap_or(0);
    if n > MAX_BODY_LEN {
        return Err(HttpError::BadRequest("body too large"));
    }
    Ok(n)
}

/// Parses one request from the front of `buf`. `Ok(None)` means more bytes
/// are needed.
pub fn parse_request(buf: &[u8]) -> Result<Option<(Request, usize)>, HttpError> {
    let Some(head) = parse_head(buf)? else {
        return Ok(None);
    };
    let mut parts = head.start_line.split(' ');
    let (Some(method), Some(target), Some(version), None) = (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(HttpError::BadRequest("malformed request line"));
    };
    let method = Method::parse(method).ok_or(HttpError::BadRequest("unsupported method"))?;
    if version != "HTTP/1.1" && version != "HTTP/1.0" {
        return Err(HttpError::BadRequest("unsupported HTTP version"));
    }
    if !target.starts_with('/') {
        return Err(HttpError::BadRequest("request target must be origin-form"));
    }
    let body_len = content_length(&head.headers)?;
    let total = head.len + body_len;
    if buf.len() < total {
        return Ok(None);
    }
    let req = Request {
        method,
        target: target.to_string(),
        headers: head.headers,
        body: buf[head.len..total].to_vec(),
    };
    Ok(Some((req, total)))
}

/// Parses a status line and headers, returning the response with an empty
/// body and the head length.
pub fn parse_response_head(buf: &[u8]) -> Result<Option<(Response, usize)>, HttpError> {
    let Some(head) = parse_head(buf)? else {
        return Ok(None);
    };
    let mut parts = head.start_line.splitn(3, ' ');
    let (Some(version), Some(status)) = (parts.next(), parts.next()) else {
        return Err(HttpError::BadRequest("malformed status line"));
    };
    if !version.starts_with("HTTP/1.") {
        return Err(HttpError::BadRequest("unsupported HTTP version"));
    }
    let status: u16 = status.parse().map_err(|_| HttpError::BadRequest("invalid status code"))?;
    Ok(Some((Response { status, headers: head.headers, body: Vec::new() }, head.len)))
}

pub fn parse_response(buf: &[u8]) -> Result<Option<(Response, usize)>, HttpError> {
    let Some((mut resp, head_len)) = parse_response_head(buf)? else {
        return Ok(None);
    };
    let body_len = content_length(&resp.headers)?;
    let total = head_len + body_len;
    if buf.len() < total {
        return Ok(None);
    }
    resp.body = buf[head_len..total].to_vec();
    Ok(Some((resp, total)))
}

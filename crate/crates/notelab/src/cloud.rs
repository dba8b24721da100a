//! Mock real-time cloud database: a path-keyed JSON tree behind a REST API
//! with an auth key, plus a line-delimited change stream.
//!
//! Routes, all relative to the project root:
//!
//! - `GET|PUT|PATCH|DELETE /<path>.json?auth=<key>`
//! - `GET /<prefix>.json?stream=true&auth=<key>`: one JSON line
//!   `{"path":..,"value":..,"server_ts":..}` per committed write at or under
//!   the prefix, in commit order.
//!
//! The snapshot file is the whole tree as one JSON document, replaced via
//! write-to-temp and rename.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use notelab_core::http::{Method, Request, Response};
use notelab_core::record::{cloud_value_text, wrap_base64};
use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, CONTROLS};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use tokio::sync::mpsc;

use crate::clock::now_monotonic_ns;
use crate::http::{handler, HttpServer, Reply};
use crate::shim::ShimError;

pub const DEFAULT_HOST: &str = "firebaseio.com";

/// Characters escaped in one path segment of a request target.
const SEGMENT: &AsciiSet = &CONTROLS.add(b' ').add(b'"').add(b'#').add(b'%').add(b'/').add(b'?').add(b'<').add(b'>').add(b'`').add(b'{').add(b'}').add(b'.');

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectConfig {
    pub project_id: String,
    pub auth_key: String,
    /// Locked mode rejects requests without the key; test mode accepts all.
    #[serde(default = "locked")]
    pub require_auth: bool,
}

fn locked() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProjectError {
    #[error("project id must be non-empty lowercase letters, digits and '-'")]
    BadProjectId,
    #[error("auth key must be non-empty")]
    EmptyKey,
}

impl ProjectConfig {
    pub fn new(project_id: impl Into<String>, auth_key: impl Into<String>) -> Self {
        ProjectConfig { project_id: project_id.into(), auth_key: auth_key.into(), require_auth: true }
    }

    pub fn validate(&self) -> Result<(), ProjectError> {
        let id_ok = !self.project_id.is_empty()
            && self.project_id.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-');
        if !id_ok {
            return Err(ProjectError::BadProjectId);
        }
        if self.auth_key.is_empty() {
            return Err(ProjectError::EmptyKey);
        }
        Ok(())
    }

    /// The project's public URL label; traffic actually goes to the
    /// loopback endpoint recorded next to it in the manifest.
    pub fn base_url(&self) -> String {
        format!("https://{}.{}", self.project_id, DEFAULT_HOST)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PathError {
    #[error("path segment {0:?} contains a forbidden character")]
    BadSegment(String),
}

/// Splits `/a/b/c` into segments, ignoring empty ones.
pub fn split_path(path: &str) -> Result<Vec<String>, PathError> {
    path.split('/')
        .filter(|s| !s.is_empty())
        .map(|s| {
            if s.chars().any(|c| c.is_control() || ".$#[]".contains(c)) {
                Err(PathError::BadSegment(s.to_string()))
            } else {
                Ok(s.to_string())
            }
        })
        .collect()
}

pub fn join_path(segments: &[String]) -> String {
    let mut out = String::new();
    for s in segments {
        out.push('/');
        out.push_str(s);
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

/// Encodes a tree path as a request target path (before `.json`).
pub fn encode_target_path(path: &str) -> String {
    let mut out = String::new();
    for s in path.split('/').filter(|s| !s.is_empty()) {
        out.push('/');
        out.extend(utf8_percent_encode(s, SEGMENT));
    }
    out
}

/// Tree key for one topic level: characters the tree forbids, and '%'
/// itself, become `%XX` so distinct levels stay distinct.
pub fn cloud_key(level: &str) -> String {
    let mut out = String::with_capacity(level.len());
    for c in level.chars() {
        if c.is_control() || ".$#[]%".contains(c) {
            let mut b = [0u8; 4];
            for byte in c.encode_utf8(&mut b).bytes() {
                out.push_str(&format!("%{byte:02X}"));
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Tree path holding a topic's records. Empty topic levels collapse.
pub fn topic_cloud_path(topic: &str) -> String {
    let mut out = String::new();
    for level in topic.split('/').filter(|l| !l.is_empty()) {
        out.push('/');
        out.push_str(&cloud_key(level));
    }
    out
}

/// JSON tree addressed by '/'-separated paths. Absent paths read as null;
/// writing null deletes and prunes empty parents.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct JsonTree {
    root: Value,
}

impl JsonTree {
    pub fn new() -> Self {
        JsonTree { root: Value::Null }
    }

    pub fn from_value(root: Value) -> Self {
        JsonTree { root }
    }

    pub fn root(&self) -> &Value {
        &self.root
    }

    pub fn get(&self, path: &[String]) -> Value {
        let mut node = &self.root;
        for seg in path {
            match node.get(seg) {
                Some(child) => node = child,
                None => return Value::Null,
            }
        }
        node.clone()
    }

    pub fn set(&mut self, path: &[String], value: Value) {
        if value.is_null() {
            Self::remove(&mut self.root, path);
            return;
        }
        let mut node = &mut self.root;
        for seg in path {
            if !node.is_object() {
                *node = Value::Object(Map::new());
            }
            node = node.as_object_mut().expect("just made an object").entry(seg.clone()).or_insert(Value::Null);
        }
        *node = value;
    }

    /// Returns true when the subtree at `node` became empty.
    fn remove(node: &mut Value, path: &[String]) -> bool {
        match path.split_first() {
            None => {
                *node = Value::Null;
                true
            }
            Some((head, rest)) => {
                let Some(obj) = node.as_object_mut() else { return node.is_null() };
                if let Some(child) = obj.get_mut(head) {
                    if Self::remove(child, rest) {
                        obj.shift_remove(head);
                    }
                }
                if obj.is_empty() {
                    *node = Value::Null;
                    true
                } else {
                    false
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeEvent {
    pub path: String,
    pub value: Value,
    pub server_ts: u64,
}

struct Watcher {
    prefix: Vec<String>,
    tx: mpsc::UnboundedSender<Vec<u8>>,
}

impl Watcher {
    fn wants(&self, path: &[String]) -> bool {
        let n = self.prefix.len().min(path.len());
        self.prefix[..n] == path[..n]
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CloudError {
    #[error("auth key rejected")]
    AuthRejected,
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct Inner {
    tree: JsonTree,
    auth_key: String,
    require_auth: bool,
    commits: u64,
    watchers: Vec<Watcher>,
    snapshot: Option<PathBuf>,
}

/// The database state shared by all request handlers. Every mutation runs
/// under one lock, which also orders the change stream.
#[derive(Clone)]
pub struct CloudStore {
    inner: Arc<Mutex<Inner>>,
}

impl CloudStore {
    /// Loads the snapshot at `snapshot` when present; with a path set, every
    /// commit is persisted before it is acknowledged.
    pub fn open(project: &ProjectConfig, snapshot: Option<PathBuf>) -> Result<CloudStore, CloudError> {
        let tree = match &snapshot {
            Some(p) if p.exists() => {
                let bytes = std::fs::read(p)?;
                JsonTree::from_value(serde_json::from_slice(&bytes).map_err(|e| CloudError::BadRequest(e.to_string()))?)
            }
            _ => JsonTree::new(),
        };
        Ok(CloudStore {
            inner: Arc::new(Mutex::new(Inner {
                tree,
                auth_key: project.auth_key.clone(),
                require_auth: project.require_auth,
                commits: 0,
                watchers: Vec::new(),
                snapshot,
            })),
        })
    }

    pub fn check_auth(&self, key: Option<&str>) -> Result<(), CloudError> {
        let inner = self.inner.lock().unwrap();
        if !inner.require_auth || key == Some(inner.auth_key.as_str()) {
            Ok(())
        } else {
            Err(CloudError::AuthRejected)
        }
    }

    /// Replaces the key and closes every open change stream.
    pub fn rotate_auth_key(&self, key: impl Into<String>) {
        let mut inner = self.inner.lock().unwrap();
        inner.auth_key = key.into();
        inner.watchers.clear();
    }

    pub fn get(&self, path: &[String]) -> Value {
        self.inner.lock().unwrap().tree.get(path)
    }

    pub fn root(&self) -> Value {
        self.inner.lock().unwrap().tree.root().clone()
    }

    pub fn commits(&self) -> u64 {
        self.inner.lock().unwrap().commits
    }

    /// Applies the writes as one commit; emits one event per write.
    pub fn commit(&self, writes: Vec<(Vec<String>, Value)>) -> Result<(), CloudError> {
        let mut inner = self.inner.lock().unwrap();
        let mut tree = inner.tree.clone();
        for (path, value) in &writes {
            tree.set(path, value.clone());
        }
        if let Some(p) = &inner.snapshot {
            write_snapshot(p, tree.root())?;
        }
        inner.tree = tree;
        inner.commits += 1;
        let server_ts = now_monotonic_ns();
        for (path, value) in writes {
            let ev = ChangeEvent { path: join_path(&path), value, server_ts };
            let mut line = serde_json::to_vec(&ev).expect("event serializes");
            line.push(b'\n');
            inner.watchers.retain(|w| !w.wants(&path) || w.tx.send(line.clone()).is_ok());
        }
        Ok(())
    }

    pub fn watch(&self, prefix: Vec<String>) -> mpsc::UnboundedReceiver<Vec<u8>> {
        let (tx, rx) = mpsc::unbounded_channel();
        self.inner.lock().unwrap().watchers.push(Watcher { prefix, tx });
        rx
    }

    pub fn watcher_count(&self) -> usize {
        let mut inner = self.inner.lock().unwrap();
        inner.watchers.retain(|w| !w.tx.is_closed());
        inner.watchers.len()
    }
}

fn write_snapshot(path: &Path, root: &Value) -> std::io::Result<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_vec(root).expect("tree serializes"))?;
    std::fs::rename(&tmp, path)
}

fn query_params(req: &Request) -> BTreeMap<String, String> {
    req.query()
        .map(|q| url::form_urlencoded::parse(q.as_bytes()).into_owned().collect())
        .unwrap_or_default()
}

fn json_response(status: u16, body: Vec<u8>) -> Response {
    Response::with_body(status, "application/json", body)
}

fn error_response(status: u16, msg: &str) -> Response {
    json_response(status, serde_json::to_vec(&serde_json::json!({ "error": msg })).expect("serializes"))
}

fn route(store: &CloudStore, req: Request) -> Reply {
    let params = query_params(&req);
    if store.check_auth(params.get("auth").map(String::as_str)).is_err() {
        return error_response(403, "Permission denied").into();
    }
    let Some(raw) = req.path().strip_suffix(".json") else {
        return error_response(404, "paths end in .json").into();
    };
    let decoded = percent_decode_str(raw).decode_utf8_lossy();
    let path = match split_path(&decoded) {
        Ok(p) => p,
        Err(e) => return error_response(400, &e.to_string()).into(),
    };
    let parse_body = || serde_json::from_slice::<Value>(&req.body).map_err(|e| error_response(400, &e.to_string()));
    let result = match req.method {
        Method::Get if params.get("stream").is_some_and(|v| v == "true") => {
            let rx = store.watch(path);
            let mut head = Response::new(200);
            head.headers.insert("Content-Type", "application/x-ndjson");
            return Reply::Stream { head, body: rx };
        }
        Method::Get => Ok(store.get(&path)),
        Method::Put => parse_body().and_then(|v| {
            store.commit(vec![(path, v.clone())]).map(|_| v).map_err(|e| error_response(500, &e.to_string()))
        }),
        Method::Patch => parse_body().and_then(|v| {
            let Value::Object(children) = &v else {
                return Err(error_response(400, "PATCH body must be an object"));
            };
            let mut writes = Vec::with_capacity(children.len());
            for (k, child) in children {
                let mut p = path.clone();
                match split_path(k) {
                    Ok(rel) => p.extend(rel),
                    Err(e) => return Err(error_response(400, &e.to_string())),
                }
                writes.push((p, child.clone()));
            }
            store.commit(writes).map(|_| v).map_err(|e| error_response(500, &e.to_string()))
        }),
        Method::Delete => store
            .commit(vec![(path, Value::Null)])
            .map(|_| Value::Null)
            .map_err(|e| error_response(500, &e.to_string())),
        Method::Post => Err(error_response(405, "POST is not supported")),
    };
    match result {
        Ok(v) => json_response(200, serde_json::to_vec(&v).expect("serializes")).into(),
        Err(resp) => resp.into(),
    }
}

/// Running cloud service.
pub struct CloudServer {
    store: CloudStore,
    server: HttpServer,
    project: ProjectConfig,
}

impl CloudServer {
    pub async fn start(
        project: ProjectConfig,
        addr: SocketAddr,
        snapshot: Option<PathBuf>,
    ) -> Result<CloudServer, CloudStartError> {
        project.validate()?;
        let store = CloudStore::open(&project, snapshot)?;
        let s = store.clone();
        let h = handler(move |req: Request, _| {
            let reply = route(&s, req);
            async move { reply }
        });
        let server = HttpServer::bind(addr, h).await?;
        Ok(CloudServer { store, server, project })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.server.local_addr()
    }

    pub fn store(&self) -> &CloudStore {
        &self.store
    }

    pub fn project(&self) -> &ProjectConfig {
        &self.project
    }

    pub fn is_running(&self) -> bool {
        self.server.is_running()
    }

    /// Stops serving and drops every connection, including change streams.
    pub async fn shutdown(&mut self) {
        self.server.shutdown().await;
        self.store.inner.lock().unwrap().watchers.clear();
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CloudStartError {
    #[error(transparent)]
    Project(#[from] ProjectError),
    #[error(transparent)]
    Store(#[from] CloudError),
    #[error(transparent)]
    Bind(#[from] ShimError),
}

/// JSON text the sync engine stores for a record payload: the payload
/// itself when it survives a parse and re-serialize byte-for-byte,
/// otherwise the base64 wrapper.
pub fn encode_cloud_value(payload: &[u8]) -> String {
    let text = cloud_value_text(payload);
    if text.as_bytes() != payload {
        return text;
    }
    match serde_json::from_str::<Value>(&text) {
        Ok(v) if serde_json::to_string(&v).is_ok_and(|s| s == text) => text,
        _ => wrap_base64(payload),
    }
}

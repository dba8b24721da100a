//! Declarative topology: one JSON file describing the cloud project, the
//! connector, the proxies, the devices that feed them and the link models
//! between them.
//!
//! Components refer to each other by id. Every component may carry a
//! `label`, the logical address it has in a lab addressing plan; labels
//! are reported but never bound, and each component actually listens on
//! its `listen` socket address.
//!
//! Launch order is cloud, connector, proxies, actuators, devices; shutdown
//! runs in reverse. A component marked `external` is assumed to be running
//! already at its `listen` address (multi-process mode) and is not started.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::time::Duration;

use notelab_core::link::DelayModel;
use notelab_core::model::SensorKind;
use notelab_core::{DeviceId, ReadingKind, SizeClass, Topic, TopicFilter};
use serde::{Deserialize, Serialize};

use crate::bench::{BenchTarget, CloudAccess, Protocol};
use crate::cloud::{CloudServer, ProjectConfig};
use crate::connector::{Connector, LogConfig, SyncConfig, SyncHalt};
use crate::devices::{
    run_publisher, Actuator, ActuatorConfig, DeviceProtocol, Publisher, SensorDeviceConfig, DEFAULT_PERIOD_MS,
    DEFAULT_THRESHOLD_C, DEFAULT_TOPIC,
};
use crate::proxy::{Flavor, Proxy, ProxyConfig, DEFAULT_ACK_TIMEOUT_MS, DEFAULT_QUEUE_CAPACITY};

pub const DEFAULT_CLOUD_PORT: u16 = 9000;
pub const DEFAULT_CONNECTOR_ID: &str = "connector";
pub const CLOUD_ID: &str = "cloud";
const LOOPBACK: IpAddr = IpAddr::V4(Ipv4Addr::LOCALHOST);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub cloud: Option<CloudSection>,
    #[serde(default)]
    pub connector: Option<ConnectorSection>,
    #[serde(default)]
    pub proxies: Vec<ProxySection>,
    #[serde(default)]
    pub devices: Vec<DeviceSection>,
    #[serde(default)]
    pub actuators: Vec<ActuatorSection>,
    #[serde(default)]
    pub links: Vec<LinkSection>,
    #[serde(default)]
    pub scenario: Option<ScenarioDefaults>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudSection {
    pub project: ProjectConfig,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub listen: Option<SocketAddr>,
    /// Persist the tree under the data directory.
    #[serde(default = "yes")]
    pub snapshot: bool,
    #[serde(default)]
    pub external: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectorSection {
    #[serde(default = "connector_id")]
    pub id: String,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub listen: Option<SocketAddr>,
    /// Log directory; relative paths resolve against the data directory.
    #[serde(default)]
    pub log_dir: Option<PathBuf>,
    #[serde(default)]
    pub log: LogConfig,
    /// Synchronize to the cloud section's project, when there is one.
    #[serde(default = "yes")]
    pub sync: bool,
    #[serde(default)]
    pub sync_batch: Option<usize>,
    #[serde(default)]
    pub external: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxySection {
    pub id: String,
    pub flavor: Flavor,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub listen: Option<SocketAddr>,
    /// Id of the connector.
    pub northbound: String,
    #[serde(default)]
    pub topic_allowlist: Option<Vec<String>>,
    #[serde(default)]
    pub queue_capacity: Option<usize>,
    #[serde(default)]
    pub ack_timeout_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSection {
    pub id: DeviceId,
    #[serde(default)]
    pub label: Option<String>,
    /// Id of the proxy the device publishes to.
    pub proxy: String,
    #[serde(default)]
    pub kind: Option<SensorKind>,
    /// Defaults to the protocol of the target proxy.
    #[serde(default)]
    pub protocol: Option<DeviceProtocol>,
    #[serde(default)]
    pub topic: Option<String>,
    #[serde(default)]
    pub period_ms: Option<u64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub size_class: Option<SizeClass>,
    #[serde(default)]
    pub envelope: Option<bool>,
    #[serde(default)]
    pub initial: Option<ReadingKind>,
    #[serde(default)]
    pub max_messages: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActuatorSection {
    pub id: String,
    #[serde(default)]
    pub label: Option<String>,
    /// Id of an MQTT proxy whose broker the actuator subscribes to.
    pub proxy: String,
    #[serde(default)]
    pub topic: Option<String>,
    #[serde(default)]
    pub threshold_c: Option<f64>,
}

/// Delay model for one edge of the component graph, named by its two
/// endpoint ids in data-flow order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSection {
    pub from: String,
    pub to: String,
    pub model: DelayModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDefaults {
    #[serde(default)]
    pub n_messages: Option<u64>,
    #[serde(default)]
    pub warmup: Option<u64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub size_classes: Option<Vec<SizeClass>>,
    #[serde(default)]
    pub interval_ms: Option<u64>,
}

fn yes() -> bool {
    true
}
fn connector_id() -> String {
    DEFAULT_CONNECTOR_ID.to_string()
}

fn device_protocol(flavor: Flavor) -> DeviceProtocol {
    match flavor {
        Flavor::MqttProxy => DeviceProtocol::Mqtt,
        Flavor::CoapProxy => DeviceProtocol::Coap,
        Flavor::HttpProxy => DeviceProtocol::Http,
    }
}

/// One problem found in a config file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    /// Dotted field path such as `devices[1].proxy`; empty for syntax errors.
    pub field: String,
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl Diagnostic {
    fn at(field: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic { field: field.into(), line: None, column: None, message: message.into() }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let (Some(l), Some(c)) = (self.line, self.column) {
            write!(f, "line {l}, column {c}: ")?;
        }
        if !self.field.is_empty() {
            write!(f, "{}: ", self.field)?;
        }
        f.write_str(&self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Unreadable { path: PathBuf, source: std::io::Error },
    #[error("invalid topology config:\n{}", render(.0))]
    Invalid(Vec<Diagnostic>),
}

fn render(diags: &[Diagnostic]) -> String {
    diags.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n")
}

impl ConfigError {
    pub fn diagnostics(&self) -> &[Diagnostic] {
        match self {
            ConfigError::Invalid(d) => d,
            ConfigError::Unreadable { .. } => &[],
        }
    }
}

pub fn validate_file(path: &Path) -> Result<TopologyConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Unreadable { path: path.into(), source })?;
    validate_str(&text)
}

/// Parses, checks references and fills defaults. The result is a pure
/// function of the input text.
pub fn validate_str(text: &str) -> Result<TopologyConfig, ConfigError> {
    if text.trim().is_empty() {
        return Err(ConfigError::Invalid(vec![Diagnostic { line: Some(1), column: Some(1), ..Diagnostic::at("", "config file is empty") }]));
    }
    let located = |field: String, e: serde_json::Error| {
        let field = if field == "." { String::new() } else { field };
        ConfigError::Invalid(vec![Diagnostic {
            field,
            line: Some(e.line()),
            column: Some(e.column()),
            message: strip_location(&e.to_string()),
        }])
    };
    let mut de = serde_json::Deserializer::from_str(text);
    let mut cfg: TopologyConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        located(field, e.into_inner())
    })?;
    de.end().map_err(|e| located(String::new(), e))?;
    let diags = check(&cfg);
    if !diags.is_empty() {
        return Err(ConfigError::Invalid(diags));
    }
    normalize(&mut cfg);
    Ok(cfg)
}

fn strip_location(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

fn check(cfg: &TopologyConfig) -> Vec<Diagnostic> {
    let mut d = Vec::new();
    let mut ids: BTreeMap<String, String> = BTreeMap::new();
    let mut claim = |id: &str, field: String, d: &mut Vec<Diagnostic>| {
        if id.is_empty() {
            d.push(Diagnostic::at(field, "id must be non-empty"));
        } else if let Some(prev) = ids.insert(id.to_string(), field.clone()) {
            d.push(Diagnostic::at(field, format!("id {id:?} is already used by {prev}")));
        }
    };

    if let Some(c) = &cfg.cloud {
        claim(CLOUD_ID, "cloud".into(), &mut d);
        if let Err(e) = c.project.validate() {
            d.push(Diagnostic::at("cloud.project", e.to_string()));
        }
        if c.external && c.listen.is_none() {
            d.push(Diagnostic::at("cloud.listen", "an external cloud needs its listen address"));
        }
    }
    if let Some(c) = &cfg.connector {
        claim(&c.id, "connector.id".into(), &mut d);
        if c.external && c.listen.is_none() {
            d.push(Diagnostic::at("connector.listen", "an external connector needs its listen address"));
        }
        if c.sync_batch == Some(0) {
            d.push(Diagnostic::at("connector.sync_batch", "must be at least 1"));
        }
    }

    let mut proxies = BTreeMap::new();
    for (i, p) in cfg.proxies.iter().enumerate() {
        let f = format!("proxies[{i}]");
        claim(&p.id, format!("{f}.id"), &mut d);
        proxies.insert(p.id.as_str(), p);
        match &cfg.connector {
            Some(c) if c.id == p.northbound => {}
            Some(c) => d.push(Diagnostic::at(
                format!("{f}.northbound"),
                format!("proxy {:?} names {:?} but the connector is {:?}", p.id, p.northbound, c.id),
            )),
            None => d.push(Diagnostic::at(format!("{f}.northbound"), format!("proxy {:?} names {:?} but no connector is declared", p.id, p.northbound))),
        }
        for (j, filter) in p.topic_allowlist.iter().flatten().enumerate() {
            if TopicFilter::new(filter.as_str()).is_err() {
                d.push(Diagnostic::at(format!("{f}.topic_allowlist[{j}]"), format!("{filter:?} is not a valid topic filter")));
            }
        }
        if p.queue_capacity == Some(0) {
            d.push(Diagnostic::at(format!("{f}.queue_capacity"), "must be at least 1"));
        }
        if p.ack_timeout_ms == Some(0) {
            d.push(Diagnostic::at(format!("{f}.ack_timeout_ms"), "must be at least 1"));
        }
    }

    for (i, dev) in cfg.devices.iter().enumerate() {
        let f = format!("devices[{i}]");
        claim(&dev.id.to_string(), format!("{f}.id"), &mut d);
        let Some(p) = proxies.get(dev.proxy.as_str()) else {
            d.push(Diagnostic::at(format!("{f}.proxy"), format!("device {} targets undeclared proxy {:?}", dev.id, dev.proxy)));
            continue;
        };
        let protocol = dev.protocol.unwrap_or(device_protocol(p.flavor));
        if protocol != device_protocol(p.flavor) {
            d.push(Diagnostic::at(
                format!("{f}.protocol"),
                format!("device {} speaks {protocol:?} but proxy {:?} is a {}", dev.id, p.id, p.flavor.label()),
            ));
        }
        let mut sensor = SensorDeviceConfig::new(dev.id.clone(), protocol, SocketAddr::new(LOOPBACK, 0));
        apply_device(&mut sensor, dev);
        if let Err(e) = sensor.validate() {
            d.push(Diagnostic::at(f.clone(), format!("device {}: {e}", dev.id)));
        }
    }

    for (i, a) in cfg.actuators.iter().enumerate() {
        let f = format!("actuators[{i}]");
        claim(&a.id, format!("{f}.id"), &mut d);
        match proxies.get(a.proxy.as_str()) {
            Some(p) if p.flavor == Flavor::MqttProxy => {}
            Some(p) => d.push(Diagnostic::at(format!("{f}.proxy"), format!("actuator {:?} needs an MQTT proxy, {:?} is a {}", a.id, p.id, p.flavor.label()))),
            None => d.push(Diagnostic::at(format!("{f}.proxy"), format!("actuator {:?} targets undeclared proxy {:?}", a.id, a.proxy))),
        }
        if let Some(t) = &a.topic {
            if TopicFilter::new(t.as_str()).is_err() {
                d.push(Diagnostic::at(format!("{f}.topic"), format!("{t:?} is not a valid topic filter")));
            }
        }
        if a.threshold_c.is_some_and(|t| !t.is_finite()) {
            d.push(Diagnostic::at(format!("{f}.threshold_c"), "must be finite"));
        }
    }

    let edges = graph_edges(cfg);
    let mut seen = BTreeSet::new();
    for (i, l) in cfg.links.iter().enumerate() {
        let f = format!("links[{i}]");
        let Some(kind) = edges.get(&(l.from.clone(), l.to.clone())) else {
            d.push(Diagnostic::at(f, format!("there is no edge from {:?} to {:?}", l.from, l.to)));
            continue;
        };
        if !seen.insert((l.from.clone(), l.to.clone())) {
            d.push(Diagnostic::at(f.clone(), "edge already has a link model"));
        }
        let res = if *kind == EdgeKind::Datagram { l.model.validate() } else { l.model.validate_stream() };
        if let Err(e) = res {
            d.push(Diagnostic::at(format!("{f}.model"), e.to_string()));
        }
    }

    // TCP and UDP on the same port do not collide.
    let mut binds: BTreeMap<(SocketAddr, bool), String> = BTreeMap::new();
    let mut bind = |addr: Option<SocketAddr>, udp: bool, field: String, d: &mut Vec<Diagnostic>| {
        if let Some(a) = addr.filter(|a| a.port() != 0) {
            if let Some(prev) = binds.get(&(a, udp)) {
                d.push(Diagnostic::at(field, format!("listen address {a} is also used by {prev}")));
            } else {
                binds.insert((a, udp), field);
            }
        }
    };
    if let Some(c) = cfg.cloud.as_ref().filter(|c| !c.external) {
        bind(c.listen, false, "cloud.listen".into(), &mut d);
    }
    if let Some(c) = cfg.connector.as_ref().filter(|c| !c.external) {
        bind(c.listen, false, "connector.listen".into(), &mut d);
    }
    for (i, p) in cfg.proxies.iter().enumerate() {
        let listen = p.listen.or(Some(SocketAddr::new(LOOPBACK, p.flavor.default_port())));
        bind(listen, p.flavor == Flavor::CoapProxy, format!("proxies[{i}].listen"), &mut d);
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EdgeKind {
    Stream,
    Datagram,
}

fn graph_edges(cfg: &TopologyConfig) -> BTreeMap<(String, String), EdgeKind> {
    let mut e = BTreeMap::new();
    let flavors: BTreeMap<&str, Flavor> = cfg.proxies.iter().map(|p| (p.id.as_str(), p.flavor)).collect();
    for dev in &cfg.devices {
        if let Some(f) = flavors.get(dev.proxy.as_str()) {
            let kind = if *f == Flavor::CoapProxy { EdgeKind::Datagram } else { EdgeKind::Stream };
            e.insert((dev.id.to_string(), dev.proxy.clone()), kind);
        }
    }
    for a in &cfg.actuators {
        e.insert((a.proxy.clone(), a.id.clone()), EdgeKind::Stream);
    }
    for p in &cfg.proxies {
        e.insert((p.id.clone(), p.northbound.clone()), EdgeKind::Stream);
    }
    if let (Some(c), Some(_)) = (&cfg.connector, &cfg.cloud) {
        e.insert((c.id.clone(), CLOUD_ID.to_string()), EdgeKind::Stream);
    }
    e
}

fn apply_device(s: &mut SensorDeviceConfig, d: &DeviceSection) {
    if let Some(k) = d.kind {
        s.kind = k;
    }
    if let Some(t) = &d.topic {
        s.topic = t.clone();
    }
    if let Some(p) = d.period_ms {
        s.period_ms = p;
    }
    if let Some(seed) = d.seed {
        s.seed = seed;
    }
    s.size_class = d.size_class;
    if let Some(e) = d.envelope {
        s.envelope = e;
    }
    s.initial = d.initial.clone();
    s.max_messages = d.max_messages;
}

/// Fills every defaulted field so the normalized form is explicit.
fn normalize(cfg: &mut TopologyConfig) {
    if let Some(c) = cfg.cloud.as_mut() {
        c.listen.get_or_insert(SocketAddr::new(LOOPBACK, DEFAULT_CLOUD_PORT));
    }
    if let Some(c) = cfg.connector.as_mut() {
        c.listen.get_or_insert(SocketAddr::new(LOOPBACK, crate::connector::DEFAULT_PORT));
        c.log_dir.get_or_insert_with(|| PathBuf::from(&c.id));
        c.sync_batch.get_or_insert(SyncConfig::new(ProjectConfig::new("x", "x"), c.listen.unwrap()).batch);
        if cfg.cloud.is_none() {
            c.sync = false;
        }
    }
    let flavors: BTreeMap<String, Flavor> = cfg.proxies.iter().map(|p| (p.id.clone(), p.flavor)).collect();
    for p in &mut cfg.proxies {
        p.listen.get_or_insert(SocketAddr::new(LOOPBACK, p.flavor.default_port()));
        p.queue_capacity.get_or_insert(DEFAULT_QUEUE_CAPACITY);
        p.ack_timeout_ms.get_or_insert(DEFAULT_ACK_TIMEOUT_MS);
    }
    for d in &mut cfg.devices {
        d.kind.get_or_insert(SensorKind::TempHumidity);
        d.protocol.get_or_insert(device_protocol(flavors[&d.proxy]));
        d.topic.get_or_insert_with(|| DEFAULT_TOPIC.to_string());
        d.period_ms.get_or_insert(DEFAULT_PERIOD_MS);
        d.seed.get_or_insert(0);
        d.envelope.get_or_insert(true);
    }
    for a in &mut cfg.actuators {
        a.topic.get_or_insert_with(|| DEFAULT_TOPIC.to_string());
        a.threshold_c.get_or_insert(DEFAULT_THRESHOLD_C);
    }
}

impl TopologyConfig {
    /// Link model for the edge `from -> to`, or the ideal link.
    pub fn link(&self, from: &str, to: &str) -> DelayModel {
        self.links.iter().find(|l| l.from == from && l.to == to).map(|l| l.model).unwrap_or_default()
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Rewrites every non-external listen port to 0 so the topology can
    /// run beside others on one host.
    pub fn with_ephemeral_ports(mut self) -> Self {
        let eph = |a: &mut Option<SocketAddr>| {
            if let Some(a) = a.as_mut() {
                a.set_port(0);
            }
        };
        if let Some(c) = self.cloud.as_mut().filter(|c| !c.external) {
            eph(&mut c.listen);
        }
        if let Some(c) = self.connector.as_mut().filter(|c| !c.external) {
            eph(&mut c.listen);
        }
        for p in &mut self.proxies {
            eph(&mut p.listen);
        }
        self
    }
}

#[derive(Debug, thiserror::Error)]
#[error("launch failed at {component}: {reason}")]
pub struct LaunchFailed {
    pub component: String,
    pub reason: String,
}

fn failed(component: &str, e: impl fmt::Display) -> LaunchFailed {
    LaunchFailed { component: component.to_string(), reason: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentStatus {
    pub id: String,
    pub kind: String,
    pub label: Option<String>,
    pub addr: Option<SocketAddr>,
    pub healthy: bool,
    pub counters: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusReport {
    pub name: String,
    pub up: bool,
    pub components: Vec<ComponentStatus>,
}

impl StatusReport {
    pub fn all_healthy(&self) -> bool {
        self.up && self.components.iter().all(|c| c.healthy)
    }
}

/// A launched topology.
pub struct Running {
    config: TopologyConfig,
    cloud_addr: Option<SocketAddr>,
    cloud: Option<CloudServer>,
    connector_addr: Option<SocketAddr>,
    connector: Option<Connector>,
    proxies: Vec<Proxy>,
    actuators: Vec<Actuator>,
    devices: Vec<Publisher>,
    data_dir: PathBuf,
    up: bool,
}

const PROXY_GRACE: Duration = Duration::from_secs(2);

impl Running {
    /// Launches every non-external component in dependency order. On
    /// failure everything already started is stopped again.
    pub async fn up(config: TopologyConfig, data_dir: &Path) -> Result<Running, LaunchFailed> {
        let mut r = Running {
            cloud_addr: None,
            cloud: None,
            connector_addr: None,
            connector: None,
            proxies: Vec::new(),
            actuators: Vec::new(),
            devices: Vec::new(),
            data_dir: data_dir.to_path_buf(),
            config,
            up: true,
        };
        match r.launch().await {
            Ok(()) => Ok(r),
            Err(e) => {
                r.down().await;
                Err(e)
            }
        }
    }

    async fn launch(&mut self) -> Result<(), LaunchFailed> {
        let cfg = self.config.clone();
        std::fs::create_dir_all(&self.data_dir).map_err(|e| failed("data directory", e))?;

        if let Some(c) = &cfg.cloud {
            let listen = c.listen.expect("normalized");
            if c.external {
                self.cloud_addr = Some(listen);
            } else {
                let snapshot = c.snapshot.then(|| self.data_dir.join("cloud").join(format!("{}.json", c.project.project_id)));
                if let Some(dir) = snapshot.as_ref().and_then(|p| p.parent()) {
                    std::fs::create_dir_all(dir).map_err(|e| failed(CLOUD_ID, e))?;
                }
                let server = CloudServer::start(c.project.clone(), listen, snapshot).await.map_err(|e| failed(CLOUD_ID, e))?;
                self.cloud_addr = Some(server.local_addr());
                self.cloud = Some(server);
            }
        }

        if let Some(c) = &cfg.connector {
            let listen = c.listen.expect("normalized");
            if c.external {
                self.connector_addr = Some(listen);
            } else {
                let dir = self.data_dir.join(c.log_dir.as_ref().expect("normalized"));
                let sync = match (&cfg.cloud, self.cloud_addr) {
                    (Some(cloud), Some(addr)) if c.sync => {
                        let mut s = SyncConfig::new(cloud.project.clone(), addr);
                        s.batch = c.sync_batch.unwrap_or(s.batch);
                        s.link = cfg.link(&c.id, CLOUD_ID);
                        Some(s)
                    }
                    _ => None,
                };
                let conn = Connector::start(dir, c.log, listen, sync).await.map_err(|e| failed(&c.id, e))?;
                self.connector_addr = Some(conn.local_addr());
                self.connector = Some(conn);
            }
        }

        for p in &cfg.proxies {
            let north = self.connector_addr.ok_or_else(|| failed(&p.id, "no connector address"))?;
            let mut pc = ProxyConfig::new(p.id.clone(), p.flavor, p.listen.expect("normalized"), north);
            pc.topic_allowlist = p.topic_allowlist.clone();
            pc.queue_capacity = p.queue_capacity.unwrap_or(DEFAULT_QUEUE_CAPACITY);
            pc.ack_timeout_ms = p.ack_timeout_ms.unwrap_or(DEFAULT_ACK_TIMEOUT_MS);
            pc.northbound_link = cfg.link(&p.id, &p.northbound);
            let proxy = Proxy::start(pc).await.map_err(|e| failed(&p.id, e))?;
            self.proxies.push(proxy);
        }

        for a in &cfg.actuators {
            let broker = self.proxy(&a.proxy).expect("validated").southbound_addr();
            let ac = ActuatorConfig {
                id: a.id.clone(),
                broker,
                topic: a.topic.clone().unwrap_or_else(|| DEFAULT_TOPIC.into()),
                threshold_c: a.threshold_c.unwrap_or(DEFAULT_THRESHOLD_C),
                link: cfg.link(&a.proxy, &a.id),
            };
            let act = Actuator::start(ac).await.map_err(|e| failed(&a.id, e))?;
            self.actuators.push(act);
        }

        for d in &cfg.devices {
            let proxy = self.proxy(&d.proxy).expect("validated");
            let protocol = d.protocol.unwrap_or(device_protocol(proxy.flavor()));
            let mut sc = SensorDeviceConfig::new(d.id.clone(), protocol, proxy.southbound_addr());
            apply_device(&mut sc, d);
            sc.link = cfg.link(&d.id.to_string(), &d.proxy);
            let publisher = run_publisher(sc).map_err(|e| failed(&d.id.to_string(), e))?;
            self.devices.push(publisher);
        }
        Ok(())
    }

    pub fn config(&self) -> &TopologyConfig {
        &self.config
    }

    pub fn is_up(&self) -> bool {
        self.up
    }

    pub fn proxy(&self, id: &str) -> Option<&Proxy> {
        self.proxies.iter().find(|p| p.id() == id)
    }

    pub fn proxies(&self) -> &[Proxy] {
        &self.proxies
    }

    pub fn connector(&self) -> Option<&Connector> {
        self.connector.as_ref()
    }

    pub fn connector_addr(&self) -> Option<SocketAddr> {
        self.connector_addr
    }

    pub fn cloud(&self) -> Option<&CloudServer> {
        self.cloud.as_ref()
    }

    pub fn cloud_addr(&self) -> Option<SocketAddr> {
        self.cloud_addr
    }

    pub fn actuator(&self, id: &str) -> Option<&Actuator> {
        self.actuators.iter().find(|a| a.config().id == id)
    }

    pub fn devices(&self) -> &[Publisher] {
        &self.devices
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    /// First proxy speaking `protocol`, with cloud access when the cloud
    /// section is known.
    pub fn bench_target(&self, protocol: Protocol) -> Option<BenchTarget<'_>> {
        let proxy = self.proxies.iter().find(|p| p.flavor() == protocol.flavor())?;
        let cloud = match (&self.config.cloud, self.cloud_addr) {
            (Some(c), Some(addr)) => Some(CloudAccess { addr, project: c.project.clone() }),
            _ => None,
        };
        Some(BenchTarget { proxy, cloud })
    }

    pub fn status(&self) -> StatusReport {
        let mut components = Vec::new();
        if let Some(c) = &self.config.cloud {
            let (healthy, counters) = match &self.cloud {
                Some(s) => (s.is_running(), serde_json::json!({ "commits": s.store().commits(), "watchers": s.store().watcher_count() })),
                None => (self.up && c.external, serde_json::json!({ "external": true })),
            };
            components.push(ComponentStatus { id: CLOUD_ID.into(), kind: "cloud".into(), label: c.label.clone(), addr: self.cloud_addr, healthy, counters });
        }
        if let Some(c) = &self.config.connector {
            let (healthy, counters) = match &self.connector {
                Some(conn) => {
                    let sync = conn.sync().map(|s| {
                        let st = s.stats();
                        serde_json::json!({
                            "batches": st.batches.load(std::sync::atomic::Ordering::SeqCst),
                            "records": st.records.load(std::sync::atomic::Ordering::SeqCst),
                            "failures": st.failures.load(std::sync::atomic::Ordering::SeqCst),
                            "halted": s.halted().map(|SyncHalt::AuthRejected { topic, status }| format!("{topic}: {status}")),
                        })
                    });
                    let healthy = conn.is_running() && conn.sync().is_none_or(|s| s.halted().is_none());
                    (healthy, serde_json::json!({ "topics": conn.log().offsets(), "sync": sync }))
                }
                None => (self.up && c.external, serde_json::json!({ "external": true })),
            };
            components.push(ComponentStatus { id: c.id.clone(), kind: "connector".into(), label: c.label.clone(), addr: self.connector_addr, healthy, counters });
        }
        for (p, sec) in self.proxies.iter().zip(&self.config.proxies) {
            components.push(ComponentStatus {
                id: p.id().into(),
                kind: p.flavor().label().into(),
                label: sec.label.clone(),
                addr: Some(p.southbound_addr()),
                healthy: p.is_running(),
                counters: serde_json::to_value(p.stats()).expect("stats serialize"),
            });
        }
        for (a, sec) in self.actuators.iter().zip(&self.config.actuators) {
            let st = a.state();
            components.push(ComponentStatus {
                id: sec.id.clone(),
                kind: "actuator".into(),
                label: sec.label.clone(),
                addr: None,
                healthy: a.is_running(),
                counters: serde_json::json!({ "received": a.received(), "led": st.led, "transitions": st.transitions.len() }),
            });
        }
        for (d, sec) in self.devices.iter().zip(&self.config.devices) {
            let counts = d.counts();
            let done = sec.max_messages.is_some_and(|m| counts.attempted >= m);
            components.push(ComponentStatus {
                id: sec.id.to_string(),
                kind: "device".into(),
                label: sec.label.clone(),
                addr: None,
                healthy: d.is_running() || done,
                counters: serde_json::to_value(counts).expect("counts serialize"),
            });
        }
        StatusReport { name: self.config.name.clone(), up: self.up, components }
    }

    /// Stops everything in reverse launch order, flushing the connector
    /// log. Calling it again does nothing.
    pub async fn down(&mut self) {
        if !self.up {
            return;
        }
        self.up = false;
        for d in self.devices.iter_mut().rev() {
            d.shutdown().await;
        }
        for a in self.actuators.iter_mut().rev() {
            a.shutdown().await;
        }
        for p in self.proxies.iter_mut().rev() {
            p.shutdown(PROXY_GRACE).await;
        }
        if let Some(c) = self.connector.as_mut() {
            if let Err(e) = c.shutdown().await {
                log::error!("connector log flush failed: {e}");
            }
        }
        if let Some(c) = self.cloud.as_mut() {
            c.shutdown().await;
        }
    }
}

/// Topology used by `bench --self-contained` and the examples: one cloud,
/// one connector and one proxy per protocol on ephemeral loopback ports.
pub fn self_contained() -> TopologyConfig {
    let text = r#"{
        "name": "self-contained",
        "cloud": { "project": { "project_id": "notelab-bench", "auth_key": "bench-key" }, "listen": "127.0.0.1:0", "snapshot": false },
        "connector": { "listen": "127.0.0.1:0" },
        "proxies": [
            { "id": "mqtt", "flavor": "mqtt-proxy", "listen": "127.0.0.1:0", "northbound": "connector" },
            { "id": "coap", "flavor": "coap-proxy", "listen": "127.0.0.1:0", "northbound": "connector" },
            { "id": "http", "flavor": "http-proxy", "listen": "127.0.0.1:0", "northbound": "connector" }
        ]
    }"#;
    validate_str(text).expect("built-in topology is valid")
}

/// Checks that a publish topic is well formed, for CLI arguments.
pub fn check_topic(topic: &str) -> bool {
    Topic::new(topic).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "cloud": { "project": { "project_id": "lab", "auth_key": "k" } },
        "connector": {},
        "proxies": [ { "id": "rpi1", "flavor": "mqtt-proxy", "northbound": "connector" } ],
        "devices": [ { "id": "dev-1-1", "proxy": "rpi1" } ]
    }"#;

    fn diags(text: &str) -> Vec<Diagnostic> {
        validate_str(text).unwrap_err().diagnostics().to_vec()
    }

    #[test]
    fn defaults_are_filled() {
        let cfg = validate_str(MINIMAL).unwrap();
        assert_eq!(cfg.proxies[0].listen.unwrap().port(), 1883);
        assert_eq!(cfg.connector.as_ref().unwrap().listen.unwrap().port(), 9092);
        assert_eq!(cfg.devices[0].protocol, Some(DeviceProtocol::Mqtt));
        assert_eq!(cfg.devices[0].topic.as_deref(), Some(DEFAULT_TOPIC));
        assert_eq!(cfg.devices[0].period_ms, Some(DEFAULT_PERIOD_MS));
    }

    #[test]
    fn normalization_is_stable() {
        let a = validate_str(MINIMAL).unwrap();
        let b = validate_str(MINIMAL).unwrap();
        assert_eq!(a.to_pretty_json(), b.to_pretty_json());
        // Normalizing a normalized config changes nothing.
        assert_eq!(validate_str(&a.to_pretty_json()).unwrap(), a);
    }

    #[test]
    fn empty_file_is_a_diagnostic() {
        for text in ["", "   \n"] {
            let d = diags(text);
            assert_eq!(d.len(), 1);
            assert!(d[0].message.contains("empty"));
        }
    }

    #[test]
    fn syntax_errors_carry_line_and_column() {
        let d = diags("{\n  \"proxies\": [\n    { \"id\": 3 }\n  ]\n}");
        assert_eq!(d[0].line, Some(3));
        assert_eq!(d[0].field, "proxies[0].id");
        let d = diags("{\n  \"name\": \"x\",,\n}");
        assert_eq!(d[0].line, Some(2));
    }

    #[test]
    fn undeclared_proxy_names_the_device() {
        let text = MINIMAL.replace(r#""proxy": "rpi1""#, r#""proxy": "rpi9""#);
        let d = diags(&text);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].field, "devices[0].proxy");
        assert!(d[0].message.contains("dev-1-1") && d[0].message.contains("rpi9"), "{}", d[0]);
    }

    #[test]
    fn proxy_must_name_the_connector() {
        let text = MINIMAL.replace(r#""northbound": "connector""#, r#""northbound": "kafka""#);
        assert_eq!(diags(&text)[0].field, "proxies[0].northbound");
    }

    #[test]
    fn unknown_fields_and_duplicates_are_rejected() {
        let text = MINIMAL.replace(r#""connector": {}"#, r#""connector": { "lisen": "127.0.0.1:1" }"#);
        assert_eq!(diags(&text)[0].field, "connector.lisen");
        let text = MINIMAL.replace(
            r#""devices": [ { "id": "dev-1-1", "proxy": "rpi1" } ]"#,
            r#""devices": [ { "id": "dev-1-1", "proxy": "rpi1" }, { "id": "dev-1-1", "proxy": "rpi1" } ]"#,
        );
        assert_eq!(diags(&text)[0].field, "devices[1].id");
    }

    #[test]
    fn links_must_follow_graph_edges() {
        let ok = MINIMAL.replace(
            r#""devices""#,
            r#""links": [ { "from": "dev-1-1", "to": "rpi1", "model": { "fixed_ms": 5, "jitter_ms": 0, "drop_prob": 0, "seed": 0 } } ], "devices""#,
        );
        let cfg = validate_str(&ok).unwrap();
        assert_eq!(cfg.link("dev-1-1", "rpi1").fixed_ms, 5.0);
        let backwards = ok.replace(r#""from": "dev-1-1", "to": "rpi1""#, r#""from": "rpi1", "to": "dev-1-1""#);
        assert_eq!(diags(&backwards)[0].field, "links[0]");
        let lossy = ok.replace(r#""drop_prob": 0"#, r#""drop_prob": 0.1"#);
        assert_eq!(diags(&lossy)[0].field, "links[0].model");
    }

    #[test]
    fn port_collisions_are_reported() {
        let text = r#"{
            "connector": {},
            "proxies": [
                { "id": "a", "flavor": "mqtt-proxy", "northbound": "connector" },
                { "id": "b", "flavor": "mqtt-proxy", "northbound": "connector" },
                { "id": "c", "flavor": "coap-proxy", "northbound": "connector", "listen": "127.0.0.1:1883" }
            ]
        }"#;
        let d = diags(text);
        assert_eq!(d.len(), 1, "{d:?}");
        assert_eq!(d[0].field, "proxies[1].listen");
    }

    #[test]
    fn shipped_configs_validate() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
        let mut n = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            validate_file(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
        assert!(n >= 2);
    }

    #[tokio::test]
    async fn up_status_down() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = validate_str(MINIMAL).unwrap().with_ephemeral_ports();
        let mut cfg = cfg;
        cfg.devices[0].period_ms = Some(20);
        cfg.devices[0].max_messages = Some(5);
        let mut run = Running::up(cfg, dir.path()).await.unwrap();
        let deadline = tokio::time::Instant::now() + Duration::from_secs(5);
        loop {
            let st = run.status();
            assert!(st.all_healthy(), "{st:?}");
            let offsets = run.connector().unwrap().log().offsets();
            if offsets.get(DEFAULT_TOPIC).is_some_and(|o| o.committed == 5) {
                break;
            }
            assert!(tokio::time::Instant::now() < deadline, "{st:?}");
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
        run.down().await;
        assert!(!run.status().up);
        run.down().await;
    }

    #[tokio::test]
    async fn occupied_cloud_port_rolls_back() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let mut cfg = validate_str(MINIMAL).unwrap().with_ephemeral_ports();
        cfg.cloud.as_mut().unwrap().listen = Some(blocker.local_addr().unwrap());
        let err = Running::up(cfg, dir.path()).await.err().unwrap();
        assert_eq!(err.component, CLOUD_ID);

        // A later component failing stops the ones before it.
        let mut cfg = validate_str(MINIMAL).unwrap().with_ephemeral_ports();
        cfg.proxies[0].listen = Some(blocker.local_addr().unwrap());
        let err = Running::up(cfg, dir.path()).await.err().unwrap();
        assert_eq!(err.component, "rpi1");
        // The connector released its port and log: a fresh launch works.
        let cfg = validate_str(MINIMAL).unwrap().with_ephemeral_ports();
        let mut run = Running::up(cfg, dir.path()).await.unwrap();
        run.down().await;
    }
}

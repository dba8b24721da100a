//! Virtual sensor publishers and the LED actuator subscriber.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use notelab_core::actuator::{ActuatorState, Transition};
use notelab_core::coap::Timing;
use notelab_core::generator::ReadingGenerator;
use notelab_core::link::DelayModel;
use notelab_core::model::{pad_to_size_class, render_reading_json, SensorKind};
use notelab_core::{DeviceId, Envelope, ReadingKind, SizeClass, Topic};
use serde::{Deserialize, Serialize};
use tokio::time::{Instant, MissedTickBehavior};

use crate::clock::now_monotonic_ns;
use crate::coap::CoapClient;
use crate::http::HttpClient;
use crate::mqtt::{ClientOptions, MqttClient, MqttError};
use crate::proxy::TELEMETRY_PATH;
use crate::service::AbortOnDrop;

pub const DEFAULT_TOPIC: &str = "DHTsensor/Temp_humidity";
pub const DEFAULT_PERIOD_MS: u64 = 1000;
pub const MIN_PERIOD_MS: u64 = 10;
pub const DEFAULT_THRESHOLD_C: f64 = 22.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceProtocol {
    Mqtt,
    Coap,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorDeviceConfig {
    pub id: DeviceId,
    pub kind: SensorKind,
    pub protocol: DeviceProtocol,
    pub target: SocketAddr,
    #[serde(default = "default_topic")]
    pub topic: String,
    #[serde(default = "default_period")]
    pub period_ms: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub size_class: Option<SizeClass>,
    /// Wrap readings in the canonical envelope. Off sends the bare reading
    /// JSON, as the classroom firmware does.
    #[serde(default = "yes")]
    pub envelope: bool,
    #[serde(default)]
    pub initial: Option<ReadingKind>,
    #[serde(default)]
    pub link: DelayModel,
    /// Stop after this many messages; `None` runs until stopped.
    #[serde(default)]
    pub max_messages: Option<u64>,
}

fn default_topic() -> String {
    DEFAULT_TOPIC.to_string()
}
fn default_period() -> u64 {
    DEFAULT_PERIOD_MS
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DeviceConfigError {
    #[error("period {0} ms is below the {MIN_PERIOD_MS} ms minimum")]
    PeriodTooShort(u64),
    #[error("topic {0:?} is not a valid publish topic")]
    BadTopic(String),
    #[error("initial state does not match sensor kind")]
    InitialKindMismatch,
}

impl SensorDeviceConfig {
    pub fn new(id: DeviceId, protocol: DeviceProtocol, target: SocketAddr) -> Self {
        SensorDeviceConfig {
            id,
            kind: SensorKind::TempHumidity,
            protocol,
            target,
            topic: default_topic(),
            period_ms: DEFAULT_PERIOD_MS,
            seed: 0,
            size_class: None,
            envelope: true,
            initial: None,
            link: DelayModel::default(),
            max_messages: None,
        }
    }

    pub fn validate(&self) -> Result<(), DeviceConfigError> {
        if self.period_ms < MIN_PERIOD_MS {
            return Err(DeviceConfigError::PeriodTooShort(self.period_ms));
        }
        Topic::new(self.topic.as_str()).map_err(|_| DeviceConfigError::BadTopic(self.topic.clone()))?;
        if let Some(init) = &self.initial {
            let kind = match init {
                ReadingKind::TempHumidity { .. } => SensorKind::TempHumidity,
                ReadingKind::Distance { .. } => SensorKind::Distance,
                ReadingKind::Motion { .. } => SensorKind::Motion,
            };
            if kind != self.kind {
                return Err(DeviceConfigError::InitialKindMismatch);
            }
        }
        Ok(())
    }

    /// Wire payload for message `seq` carrying `reading`.
    pub fn payload(&self, reading: &ReadingKind, seq: u64, ts_ns: u64) -> Vec<u8> {
        let body = render_reading_json(reading);
        if self.envelope {
            let env = Envelope {
                topic: Topic::new(self.topic.as_str()).expect("validated topic"),
                payload: body.clone(),
                device: self.id.clone(),
                seq,
                publish_ts_ns: ts_ns,
                size_class: self.size_class,
            };
            // An envelope too big for its class goes out unpadded.
            env.encode().or_else(|_| Envelope { size_class: None, ..env }.encode()).expect("reading envelopes encode")
        } else {
            match self.size_class {
                Some(class) => pad_to_size_class(&body, class).unwrap_or(body),
                None => body,
            }
        }
    }

    fn path(&self) -> String {
        if self.envelope {
            TELEMETRY_PATH.to_string()
        } else {
            format!("{TELEMETRY_PATH}/{}", self.topic)
        }
    }
}

/// Publisher counters; `attempted = sent + dropped` once a send settles.
#[derive(Debug, Default)]
pub struct PublisherStats {
    pub attempted: AtomicU64,
    pub sent: AtomicU64,
    pub dropped: AtomicU64,
    pub reconnects: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PublisherCounts {
    pub attempted: u64,
    pub sent: u64,
    pub dropped: u64,
    pub reconnects: u64,
}

impl PublisherStats {
    pub fn snapshot(&self) -> PublisherCounts {
        PublisherCounts {
            attempted: self.attempted.load(Ordering::SeqCst),
            sent: self.sent.load(Ordering::SeqCst),
            dropped: self.dropped.load(Ordering::SeqCst),
            reconnects: self.reconnects.load(Ordering::SeqCst),
        }
    }
}

pub struct Publisher {
    config: SensorDeviceConfig,
    stats: Arc<PublisherStats>,
    task: Option<AbortOnDrop>,
}

impl Publisher {
    pub fn config(&self) -> &SensorDeviceConfig {
        &self.config
    }

    pub fn counts(&self) -> PublisherCounts {
        self.stats.snapshot()
    }

    /// False once `max_messages` were handled or the task was stopped.
    pub fn is_running(&self) -> bool {
        self.task.as_ref().is_some_and(|t| !t.0.is_finished())
    }

    /// Waits for a bounded publisher to finish.
    pub async fn finished(&mut self) {
        if let Some(t) = self.task.as_mut() {
            let _ = (&mut t.0).await;
        }
    }

    pub async fn shutdown(&mut self) {
        if let Some(mut t) = self.task.take() {
            t.0.abort();
            let _ = (&mut t.0).await;
        }
    }
}

/// Starts a periodic device. Seqs start at 1 and have no gaps as sent.
pub fn run_publisher(config: SensorDeviceConfig) -> Result<Publisher, DeviceConfigError> {
    config.validate()?;
    let stats = Arc::new(PublisherStats::default());
    let task = tokio::spawn(publish_loop(config.clone(), stats.clone()));
    Ok(Publisher { config, stats, task: Some(AbortOnDrop(task)) })
}

enum Transport {
    Mqtt { client: Option<MqttClient>, retry_at: Instant, backoff: Duration },
    Coap(CoapClient),
    Http(HttpClient),
}

const MQTT_BACKOFF_INITIAL: Duration = Duration::from_millis(100);
const MQTT_BACKOFF_CAP: Duration = Duration::from_secs(2);

impl Transport {
    async fn open(cfg: &SensorDeviceConfig) -> Transport {
        match cfg.protocol {
            DeviceProtocol::Mqtt => Transport::Mqtt { client: None, retry_at: Instant::now(), backoff: MQTT_BACKOFF_INITIAL },
            DeviceProtocol::Coap => loop {
                match CoapClient::open(cfg.link, Timing::default()).await {
                    Ok(c) => break Transport::Coap(c),
                    Err(e) => {
                        log::warn!("{}: cannot open datagram socket: {e}", cfg.id);
                        tokio::time::sleep(Duration::from_secs(1)).await;
                    }
                }
            },
            DeviceProtocol::Http => Transport::Http(HttpClient::new(cfg.target, cfg.link)),
        }
    }

    /// True when the message left the device (QoS 0 / NON semantics for
    /// MQTT) or was acknowledged (CoAP CON, HTTP 2xx).
    async fn send(&mut self, cfg: &SensorDeviceConfig, stats: &PublisherStats, payload: &[u8]) -> bool {
        match self {
            Transport::Mqtt { client, retry_at, backoff } => {
                if client.as_ref().is_some_and(|c| !c.is_connected()) {
                    *client = None;
                }
                if client.is_none() {
                    if Instant::now() < *retry_at {
                        return false;
                    }
                    let keepalive = (cfg.period_ms.saturating_mul(2) / 1000).clamp(60, u64::from(u16::MAX)) as u16;
                    let opts = ClientOptions::new(cfg.id.to_string()).model(cfg.link).keepalive(keepalive);
                    match MqttClient::connect(cfg.target, opts).await {
                        Ok((c, _rx)) => {
                            *client = Some(c);
                            *backoff = MQTT_BACKOFF_INITIAL;
                        }
                        Err(e) => {
                            log::debug!("{}: connect failed: {e}", cfg.id);
                            stats.reconnects.fetch_add(1, Ordering::SeqCst);
                            *retry_at = Instant::now() + *backoff;
                            *backoff = (*backoff * 2).min(MQTT_BACKOFF_CAP);
                            return false;
                        }
                    }
                }
                let c = client.as_ref().expect("connected above");
                match c.publish(&cfg.topic, payload).await {
                    Ok(()) => true,
                    Err(MqttError::NotConnected) | Err(_) => {
                        *client = None;
                        false
                    }
                }
            }
            Transport::Coap(c) => c.post_confirmable(cfg.target, &cfg.path(), payload).await.is_ok(),
            Transport::Http(c) => {
                let target = format!("/{}", cfg.path());
                for _ in 0..2 {
                    if let Ok(r) = c.post(&target, "application/json", payload).await {
                        if (200..300).contains(&r.status) {
                            return true;
                        }
                    }
                }
                false
            }
        }
    }
}

async fn publish_loop(cfg: SensorDeviceConfig, stats: Arc<PublisherStats>) {
    let mut generator = match cfg.initial {
        Some(init) => ReadingGenerator::with_initial(init, cfg.seed, cfg.period_ms),
        None => ReadingGenerator::new(cfg.kind, cfg.seed, cfg.period_ms),
    };
    let mut transport = Transport::open(&cfg).await;
    let mut ticker = tokio::time::interval(Duration::from_millis(cfg.period_ms));
    ticker.set_missed_tick_behavior(MissedTickBehavior::Delay);
    let mut seq = 0u64;
    while cfg.max_messages.is_none_or(|max| seq < max) {
        ticker.tick().await;
        seq += 1;
        let ts = now_monotonic_ns();
        let reading = generator.next_reading(ts);
        let payload = cfg.payload(&reading.kind, seq, ts);
        stats.attempted.fetch_add(1, Ordering::SeqCst);
        if transport.send(&cfg, &stats, &payload).await {
            stats.sent.fetch_add(1, Ordering::SeqCst);
        } else {
            stats.dropped.fetch_add(1, Ordering::SeqCst);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuatorConfig {
    pub id: String,
    pub broker: SocketAddr,
    #[serde(default = "default_topic")]
    pub topic: String,
    #[serde(default = "default_threshold")]
    pub threshold_c: f64,
    #[serde(default)]
    pub link: DelayModel,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD_C
}

/// LED actuator driven by an MQTT subscription.
pub struct Actuator {
    config: ActuatorConfig,
    state: Arc<Mutex<ActuatorState>>,
    received: Arc<AtomicU64>,
    task: Option<AbortOnDrop>,
}

impl Actuator {
    pub async fn start(config: ActuatorConfig) -> Result<Actuator, MqttError> {
        let opts = ClientOptions::new(config.id.clone()).model(config.link);
        let (client, mut rx) = MqttClient::connect(config.broker, opts).await?;
        let granted = client.subscribe(&[config.topic.as_str()]).await?;
        if granted.first() != Some(&0) {
            return Err(MqttError::Protocol(format!("subscription to {:?} refused", config.topic)));
        }
        let state = Arc::new(Mutex::new(ActuatorState::new(config.threshold_c)));
        let received = Arc::new(AtomicU64::new(0));
        let (s, r) = (state.clone(), received.clone());
        let client = Arc::new(client);
        client.spawn_keepalive(Duration::from_secs(30));
        let task = tokio::spawn(async move {
            let _client = client;
            while let Some(msg) = rx.recv().await {
                r.fetch_add(1, Ordering::SeqCst);
                if let Ok(Some(t)) = s.lock().unwrap().on_payload(&msg.payload, msg.recv_ts_ns) {
                    log::info!("LED {:?} at {:.2} C", t.led, t.temperature_c);
                }
            }
        });
        Ok(Actuator { config, state, received, task: Some(AbortOnDrop(task)) })
    }

    pub fn config(&self) -> &ActuatorConfig {
        &self.config
    }

    pub fn state(&self) -> ActuatorState {
        self.state.lock().unwrap().clone()
    }

    pub fn received(&self) -> u64 {
        self.received.load(Ordering::SeqCst)
    }

    pub fn is_running(&self) -> bool {
        self.task.as_ref().is_some_and(|t| !t.0.is_finished())
    }

    pub fn export_transitions(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, transitions_jsonl(&self.state().transitions))
    }

    pub async fn shutdown(&mut self) {
        if let Some(mut t) = self.task.take() {
            t.0.abort();
            let _ = (&mut t.0).await;
        }
    }
}

/// One JSON object per line, in transition order.
pub fn transitions_jsonl(transitions: &[Transition]) -> String {
    let mut out = String::new();
    for t in transitions {
        out.push_str(&serde_json::to_string(t).expect("transition serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connector::{CommitLog, ConnectorServer, LogConfig};
    use crate::mqtt::Broker;
    use crate::proxy::{Flavor, Proxy, ProxyConfig};
    use notelab_core::actuator::Led;

    fn dev(unit: u16) -> DeviceId {
        DeviceId::new(1, unit).unwrap()
    }

    fn local() -> SocketAddr {
        "127.0.0.1:0".parse().unwrap()
    }

    #[test]
    fn bare_first_payload_is_the_classroom_listing() {
        let mut cfg = SensorDeviceConfig::new(dev(1), DeviceProtocol::Mqtt, local());
        cfg.envelope = false;
        let init = ReadingKind::TempHumidity { temperature_c: 22.0, humidity_pct: 18.0 };
        let mut g = ReadingGenerator::with_initial(init, 1, 1000);
        let r = g.next_reading(0);
        assert_eq!(cfg.payload(&r.kind, 1, 0), br#"{"temperature":22.00,"humidity":18.00}"#);
    }

    #[test]
    fn config_validation() {
        let mut cfg = SensorDeviceConfig::new(dev(1), DeviceProtocol::Mqtt, local());
        assert!(cfg.validate().is_ok());
        cfg.period_ms = 5;
        assert_eq!(cfg.validate(), Err(DeviceConfigError::PeriodTooShort(5)));
        cfg.period_ms = 100;
        cfg.topic = "a/+".into();
        assert!(cfg.validate().is_err());
        cfg.topic = DEFAULT_TOPIC.into();
        cfg.initial = Some(ReadingKind::Distance { cm: 3.0 });
        assert_eq!(cfg.validate(), Err(DeviceConfigError::InitialKindMismatch));
    }

    async fn pipeline(flavor: Flavor) -> (tempfile::TempDir, Arc<CommitLog>, ConnectorServer, Proxy) {
        let dir = tempfile::tempdir().unwrap();
        let log = Arc::new(CommitLog::open(dir.path(), LogConfig::default()).unwrap());
        let srv = ConnectorServer::bind(local(), log.clone()).await.unwrap();
        let proxy = Proxy::start(ProxyConfig::new("p", flavor, local(), srv.local_addr())).await.unwrap();
        (dir, log, srv, proxy)
    }

    async fn ten_periods(protocol: DeviceProtocol, flavor: Flavor) {
        let (_dir, log, _srv, proxy) = pipeline(flavor).await;
        let mut cfg = SensorDeviceConfig::new(dev(3), protocol, proxy.southbound_addr());
        cfg.period_ms = 20;
        cfg.max_messages = Some(10);
        let mut p = run_publisher(cfg).unwrap();
        p.finished().await;
        assert_eq!(p.counts(), PublisherCounts { attempted: 10, sent: 10, dropped: 0, reconnects: 0 });
        for _ in 0..500 {
            if proxy.stats().accepted == 10 {
                break;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        assert!(proxy.drained(Duration::from_secs(5)).await);
        let recs = log.read(DEFAULT_TOPIC, 0, 100).unwrap();
        assert_eq!(recs.iter().map(|r| r.seq).collect::<Vec<_>>(), (1..=10).collect::<Vec<_>>());
        assert!(recs.iter().all(|r| r.source == "dev-1-3"));
    }

    #[tokio::test]
    async fn ten_periods_over_each_protocol() {
        ten_periods(DeviceProtocol::Mqtt, Flavor::MqttProxy).await;
        ten_periods(DeviceProtocol::Coap, Flavor::CoapProxy).await;
        ten_periods(DeviceProtocol::Http, Flavor::HttpProxy).await;
    }

    #[tokio::test]
    async fn mqtt_publisher_survives_a_late_broker() {
        // Reserve a port, then leave it closed for a while.
        let addr = {
            let b = Broker::bind(local()).await.unwrap();
            b.local_addr()
        };
        let mut cfg = SensorDeviceConfig::new(dev(2), DeviceProtocol::Mqtt, addr);
        cfg.period_ms = 50;
        let p = run_publisher(cfg).unwrap();
        tokio::time::sleep(Duration::from_millis(500)).await;
        let broker = Broker::bind(addr).await.unwrap();
        let mut rx = broker.subscribe_local(notelab_core::TopicFilter::new("#").unwrap());
        let got = tokio::time::timeout(Duration::from_secs(5), rx.recv()).await.unwrap().unwrap();
        let env = Envelope::decode(&got.payload).unwrap();
        let c = p.counts();
        assert!(c.dropped >= 5, "{c:?}");
        assert!(c.reconnects >= 1);
        assert!(env.seq > c.dropped.min(5));
    }

    #[tokio::test]
    async fn period_timer_tolerance() {
        let broker = Broker::bind(local()).await.unwrap();
        let mut cfg = SensorDeviceConfig::new(dev(1), DeviceProtocol::Mqtt, broker.local_addr());
        cfg.period_ms = 100;
        let mut p = run_publisher(cfg).unwrap();
        tokio::time::sleep(Duration::from_millis(1000)).await;
        p.shutdown().await;
        let n = p.counts().attempted;
        assert!((9..=11).contains(&n), "{n}");
    }

    #[tokio::test]
    async fn actuator_follows_the_threshold() {
        let broker = Broker::bind(local()).await.unwrap();
        let act = Actuator::start(ActuatorConfig {
            id: "ESP32-LED".into(),
            broker: broker.local_addr(),
            topic: DEFAULT_TOPIC.into(),
            threshold_c: 22.0,
            link: DelayModel::default(),
        })
        .await
        .unwrap();
        let (pubc, _rx) = MqttClient::connect(broker.local_addr(), ClientOptions::new("ESP32-1")).await.unwrap();
        for t in ["21.00", "22.00", "25.00", "26.00", "garbage", "20.00"] {
            let payload = if t == "garbage" { "not json".to_string() } else { format!("{{\"temperature\":{t},\"humidity\":18.00}}") };
            pubc.publish(DEFAULT_TOPIC, payload.as_bytes()).await.unwrap();
        }
        for _ in 0..500 {
            if act.received() == 6 {
                break;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        let st = act.state();
        let walk: Vec<(Led, f64)> = st.transitions.iter().map(|t| (t.led, t.temperature_c)).collect();
        assert_eq!(walk, [(Led::On, 25.0), (Led::Off, 20.0)]);
        assert_eq!(st.skipped, 1);
        let lines = transitions_jsonl(&st.transitions);
        assert_eq!(lines.lines().count(), 2);
        assert!(lines.lines().next().unwrap().contains("\"ON\""));
    }
}

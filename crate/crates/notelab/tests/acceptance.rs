//! Acceptance criteria for the whole testbed.
//!
//! The criteria run one after another inside a single test so that the
//! timing-sensitive ones do not compete with each other for the CPU. Each
//! prints one `PASS` or `FAIL` line straight to stderr, bypassing the test
//! harness's output capture; the test fails if any criterion does.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, ensure, Context, Result};
use notelab::bench::{run_overhead_comparison, run_scenario, Protocol, ScenarioConfig, Scope, Testbed};
use notelab::cloud::{ChangeEvent, CloudServer, ProjectConfig};
use notelab::coap::{CoapClient, CoapHandler, CoapServer};
use notelab::connector::{CommitLog, Connector, LogConfig, SyncConfig};
use notelab::devices::{Actuator, ActuatorConfig};
use notelab::http::{HttpClient, LineStream};
use notelab::mqtt::{Broker, ClientOptions, MqttClient};
use notelab::proxy::{Flavor, Proxy, ProxyConfig};
use notelab::session;
use notelab::topology::{validate_file, Running};
use notelab_core::actuator::{ActuatorState, Led, Transition};
use notelab_core::coap::{Code, Message, MessageType, Timing};
use notelab_core::frame::{encode_log_record, scan_log, Frame, FrameType};
use notelab_core::link::DelayModel;
use notelab_core::mqtt::Packet;
use notelab_core::record::StreamRecord;
use notelab_core::{compute_stats, SizeClass};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::Value;

const TOPIC: &str = "DHTsensor/Temp_humidity";
const READING: &[u8] = br#"{"temperature":22.00,"humidity":18.00}"#;

fn local() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

async fn eventually<F: FnMut() -> bool>(timeout: Duration, what: &str, mut f: F) -> Result<()> {
    let deadline = Instant::now() + timeout;
    while !f() {
        ensure!(Instant::now() < deadline, "timed out waiting for {what}");
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    Ok(())
}

fn pipeline_fidelity() -> Result<String> {
    runtime().block_on(async {
        let start = Instant::now();
        let dir = tempfile::tempdir()?;
        let mut cfg = validate_file(&configs().join("two-student.json"))?.with_ephemeral_ports();
        // The virtual sensors publish on the same topic; only the probe is wanted.
        cfg.devices.clear();
        let mut run = Running::up(cfg, dir.path()).await?;
        let broker = run.proxy("rpi1").context("rpi1")?.southbound_addr();
        let cloud = run.cloud_addr().context("cloud")?;

        let (sub, mut inbox) = MqttClient::connect(broker, ClientOptions::new("local-sub")).await?;
        sub.subscribe(&[TOPIC]).await?;
        let (head, mut stream) =
            LineStream::open(cloud, "/DHTsensor/Temp_humidity.json?stream=true&auth=lab-secret", DelayModel::default()).await?;
        ensure!(head.status == 200, "change stream answered {}", head.status);

        let (publisher, _) = MqttClient::connect(broker, ClientOptions::new("dht-pub")).await?;
        publisher.publish(TOPIC, READING).await?;

        let got = tokio::time::timeout(Duration::from_secs(5), inbox.recv()).await?.context("subscriber closed")?;
        ensure!(got.payload == READING, "(a) subscriber got {:?}", String::from_utf8_lossy(&got.payload));

        let log = run.connector().context("connector")?.log().clone();
        eventually(Duration::from_secs(5), "the connector log", || log.read(TOPIC, 0, 10).is_ok_and(|r| !r.is_empty())).await?;
        let recs = log.read(TOPIC, 0, 10)?;
        ensure!(recs.len() == 1 && recs[0].payload == READING, "(b) log holds {recs:?}");
        let offset = recs[0].offset.context("record without offset")?;

        let (line, _) = tokio::time::timeout(Duration::from_secs(5), stream.next_line()).await??.context("stream closed")?;
        let ev: ChangeEvent = serde_json::from_slice(&line)?;
        ensure!(ev.path == format!("/{TOPIC}/{offset}"), "(d) event path {}", ev.path);
        ensure!(serde_json::to_vec(&ev.value)? == READING, "(d) event value {}", ev.value);

        let mut rest = HttpClient::new(cloud, DelayModel::default());
        let resp = rest.get(&format!("/{TOPIC}/{offset}.json?auth=lab-secret")).await?;
        ensure!(resp.status == 200 && resp.body == READING, "(c) cloud tree holds {:?}", String::from_utf8_lossy(&resp.body));

        run.down().await;
        let took = start.elapsed();
        ensure!(took < Duration::from_secs(10), "took {took:?}");
        Ok(format!("byte-identical at subscriber, log, /{TOPIC}/{offset} and change stream in {:.2}s", took.as_secs_f64()))
    })
}

fn label(t: &Transition) -> String {
    let led = match t.led {
        Led::On => "ON",
        Led::Off => "OFF",
    };
    format!("{led}@{:.2}", t.temperature_c)
}

fn actuator_rule() -> Result<String> {
    let expected = vec!["ON@25.00".to_string(), "OFF@20.00".to_string()];
    let temps = [21.0, 22.0, 25.0, 20.0];

    let mut pure = ActuatorState::new(22.0);
    for (i, t) in temps.iter().enumerate() {
        pure.apply_temperature(*t, i as u64);
    }
    let pure: Vec<String> = pure.transitions.iter().map(label).collect();
    ensure!(pure == expected, "state machine gave {pure:?}");

    runtime().block_on(async {
        let mut broker = Broker::bind(local()).await?;
        let cfg = ActuatorConfig {
            id: "led".into(),
            broker: broker.local_addr(),
            topic: TOPIC.into(),
            threshold_c: 22.0,
            link: DelayModel::default(),
        };
        let mut act = Actuator::start(cfg).await?;
        let (publisher, _) = MqttClient::connect(broker.local_addr(), ClientOptions::new("dht")).await?;
        for t in temps {
            publisher.publish(TOPIC, format!(r#"{{"temperature":{t:.2},"humidity":18.00}}"#).as_bytes()).await?;
        }
        eventually(Duration::from_secs(5), "four readings", || act.received() == 4).await?;
        let log: Vec<String> = act.state().transitions.iter().map(label).collect();
        act.shutdown().await;
        broker.shutdown().await;
        ensure!(log == expected, "actuator logged {log:?}");
        Ok(format!("{log:?} from the state machine and over MQTT"))
    })
}

fn latency_ground_truth() -> Result<String> {
    runtime().block_on(async {
        let start = Instant::now();
        let dir = tempfile::tempdir()?;
        let bed = Testbed::launch(dir.path()).await?;

        let mut cfg = ScenarioConfig::new(Protocol::Mqtt, Scope::Edge);
        cfg.size_classes = vec![SizeClass::B10];
        cfg.n_messages = 100;
        cfg.delay_model = DelayModel::fixed(5.0);
        let report = run_scenario(&cfg, &bed.target(Protocol::Mqtt)).await?;
        let stats = report.results[0].stats.context("no samples")?;
        ensure!(stats.n == 100, "{} samples", stats.n);
        let mean_ms = stats.mean_s * 1e3;
        ensure!((5.0..=10.0).contains(&mean_ms), "edge mean {mean_ms:.3} ms with 5 ms injected");

        let mut cfg = ScenarioConfig::new(Protocol::Mqtt, Scope::EndToEnd);
        cfg.n_messages = 100;
        let report = run_scenario(&cfg, &bed.target(Protocol::Mqtt)).await?;
        let flags = report.end_to_end_slower();
        ensure!(flags.len() == 3, "compared {} size classes", flags.len());
        let slower: Vec<String> = flags.iter().map(|(c, s)| format!("{c}:{s}")).collect();
        ensure!(flags.iter().all(|(_, s)| *s), "end-to-end slower per class: {slower:?}");
        bed.shutdown().await;
        let took = start.elapsed();
        ensure!(took < Duration::from_secs(60), "took {took:?}");
        Ok(format!("edge mean {mean_ms:.3} ms at 5 ms injected; end-to-end > edge for 10B, 100B, 1KB ({:.1}s)", took.as_secs_f64()))
    })
}

/// Input-order sum, two-pass variance, integer nearest rank.
struct Reference {
    min: f64,
    max: f64,
    mean: f64,
    std: f64,
    p50: f64,
    p95: f64,
    p99: f64,
}

fn reference(xs: &[f64]) -> Reference {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let std = if n == 1 { 0.0 } else { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() };
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = |p: usize| sorted[((p * n).div_ceil(100)).max(1) - 1];
    Reference {
        min: sorted[0],
        max: sorted[n - 1],
        mean,
        std,
        p50: rank(50),
        p95: rank(95),
        p99: rank(99),
    }
}

fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

fn statistics_oracle() -> Result<String> {
    let mut rng = StdRng::seed_from_u64(0x5eed);
    for set in 0..1000 {
        let n = rng.random_range(1..=400);
        let scale = 10f64.powi(rng.random_range(-5..=1));
        let xs: Vec<f64> = (0..n)
            .map(|_| match set % 3 {
                0 => rng.random::<f64>() * scale,
                1 => scale * (1.0 + rng.random::<f64>() * 1e-3),
                _ => scale * (-rng.random::<f64>().max(1e-12).ln()),
            })
            .collect();
        let got = compute_stats(&xs)?;
        let want = reference(&xs);
        let pairs = [
            ("min", got.min_s, want.min),
            ("max", got.max_s, want.max),
            ("mean", got.mean_s, want.mean),
            ("std", got.std_s, want.std),
            ("p50", got.p50_s, want.p50),
            ("p95", got.p95_s, want.p95),
            ("p99", got.p99_s, want.p99),
        ];
        for (name, g, w) in pairs {
            ensure!(close(g, w), "set {set} (n={n}): {name} {g:e} vs reference {w:e}");
        }
        ensure!(got.n == n, "set {set}: n");
    }
    let one = compute_stats(&[0.042])?;
    ensure!(one.std_s == 0.0 && one.mean_s == 0.042, "n=1 gave {one:?}");
    Ok("1000 random sets within 1e-12 relative; n=1 has std 0".into())
}

fn overhead_direction() -> Result<String> {
    runtime().block_on(async {
        let rows = run_overhead_comparison(&[10]).await?;
        let bytes = |p: Protocol| rows.iter().find(|r| r.protocol == p).map(|r| r.bytes_per_message).unwrap();
        let (coap, mqtt, http) = (bytes(Protocol::Coap), bytes(Protocol::Mqtt), bytes(Protocol::Http));
        ensure!(coap < mqtt && mqtt < http, "CoAP {coap}, MQTT {mqtt}, HTTP {http}");
        for r in &rows {
            ensure!(r.bytes_per_message == r.codec_bytes, "{:?}: wire {} vs codec {}", r.protocol, r.bytes_per_message, r.codec_bytes);
        }

        let topic = "DHTsensor/Temp_humidity1";
        ensure!(topic.len() == 24);
        let encoded = Packet::Publish { topic: topic.into(), payload: vec![b'x'; 10] }.encode()?.len();
        let mut broker = Broker::bind(local()).await?;
        let (client, _) = MqttClient::connect(broker.local_addr(), ClientOptions::new("overhead")).await?;
        let before = client.counters().sent();
        client.publish(topic, &[b'x'; 10]).await?;
        let wire = client.counters().sent() - before;
        broker.shutdown().await;
        ensure!(encoded == 38 && wire == 38, "24-byte topic PUBLISH: encoded {encoded}, on the wire {wire}");
        Ok(format!("10 B payload: CoAP NON {coap} < MQTT QoS0 {mqtt} < HTTP/1.1 {http} bytes; 24-byte topic PUBLISH is {wire} bytes"))
    })
}

fn offline_sync() -> Result<String> {
    runtime().block_on(async {
        let start = Instant::now();
        let dir = tempfile::tempdir()?;
        let project = ProjectConfig::new("iot-lab", "lab-secret");
        let snapshot = dir.path().join("cloud.json");
        let mut cloud = CloudServer::start(project.clone(), local(), Some(snapshot.clone())).await?;
        let cloud_addr = cloud.local_addr();
        let mut connector =
            Connector::start(dir.path().join("log"), LogConfig::default(), local(), Some(SyncConfig::new(project.clone(), cloud_addr))).await?;
        let mut proxy = Proxy::start(ProxyConfig::new("rpi1", Flavor::MqttProxy, local(), connector.local_addr())).await?;
        let (publisher, _) = MqttClient::connect(proxy.southbound_addr(), ClientOptions::new("dht")).await?;
        let log = connector.log().clone();
        let offsets = |log: &CommitLog| log.offsets().get(TOPIC).map(|o| (o.next_offset, o.committed)).unwrap_or((0, 0));

        let payload = |i: u32| format!(r#"{{"temperature":{}.00,"seq":{i}}}"#, 20 + i % 5).into_bytes();
        let total = 120u32;
        for i in 0..40 {
            publisher.publish(TOPIC, &payload(i)).await?;
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
        eventually(Duration::from_secs(5), "first records in the log", || offsets(&log).0 >= 20).await?;
        cloud.shutdown().await;
        let killed = Instant::now();
        for i in 40..total {
            publisher.publish(TOPIC, &payload(i)).await?;
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
        eventually(Duration::from_secs(5), "every record in the log", || offsets(&log).0 == total as u64).await?;
        let (next, committed) = offsets(&log);
        let backlog = next - committed;
        ensure!(backlog >= 50, "only {backlog} undelivered records at restart");

        tokio::time::sleep(Duration::from_secs(5).saturating_sub(killed.elapsed())).await;
        let mut cloud = CloudServer::start(project.clone(), cloud_addr, Some(snapshot)).await?;
        eventually(Duration::from_secs(20), "sync to converge", || offsets(&log).1 == total as u64).await?;

        let tree = cloud.store().get(&["DHTsensor".into(), "Temp_humidity".into()]);
        let obj = tree.as_object().context("topic node is not an object")?;
        let keys: BTreeSet<u64> = obj.keys().map(|k| k.parse::<u64>()).collect::<Result<_, _>>()?;
        ensure!(keys == (0..total as u64).collect(), "cloud holds offsets {:?}..", keys.iter().take(5).collect::<Vec<_>>());
        let records = log.read(TOPIC, 0, total as usize)?;
        let mut seen = BTreeSet::new();
        for r in &records {
            let off = r.offset.unwrap();
            let stored = serde_json::to_vec(&obj[&off.to_string()])?;
            ensure!(stored == r.payload, "offset {off} differs in the cloud");
            ensure!(seen.insert(r.payload.clone()), "payload at offset {off} appears twice");
        }
        ensure!(seen.len() == total as usize, "{} distinct payloads", seen.len());

        proxy.shutdown(Duration::from_secs(1)).await;
        connector.shutdown().await?;
        cloud.shutdown().await;
        let took = start.elapsed();
        ensure!(took < Duration::from_secs(30), "took {took:?}");
        Ok(format!("{backlog} records queued during a 5 s outage; cloud holds dense offsets 0..{total} with no duplicates ({:.1}s)", took.as_secs_f64()))
    })
}

fn produce(stream: &mut TcpStream, record: &StreamRecord) -> Result<Value> {
    stream.write_all(&Frame::new(FrameType::Produce, serde_json::to_vec(record)?).encode())?;
    let mut buf = Vec::new();
    loop {
        if let Some((frame, _)) = Frame::decode(&buf)? {
            ensure!(frame.kind == FrameType::Ack, "expected ACK, got {:?}", frame.kind);
            return Ok(serde_json::from_slice(&frame.body)?);
        }
        let mut chunk = [0u8; 512];
        let n = stream.read(&mut chunk)?;
        ensure!(n > 0, "connector closed the connection");
        buf.extend_from_slice(&chunk[..n]);
    }
}

fn durability() -> Result<String> {
    let n = 200u64;
    let dir = tempfile::tempdir()?;
    let data = dir.path().join("data");
    let config = dir.path().join("connector-only.json");
    std::fs::write(&config, r#"{ "name": "connector-only", "connector": { "listen": "127.0.0.1:0" } }"#)?;
    let bin = env!("CARGO_BIN_EXE_notelab");
    let mut child = Command::new(bin)
        .args(["up", config.to_str().unwrap()])
        .env(session::DATA_DIR_ENV, &data)
        .env("RUST_LOG", "warn")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()?;
    let result = (|| -> Result<SocketAddr> {
        let deadline = Instant::now() + Duration::from_secs(10);
        while session::read_runtime(&data).is_none() {
            ensure!(Instant::now() < deadline, "`up` never became ready");
            ensure!(child.try_wait()?.is_none(), "`up` exited early");
            std::thread::sleep(Duration::from_millis(20));
        }
        let status = runtime().block_on(session::status(&data))?;
        let c = status.components.iter().find(|c| c.kind == "connector").context("no connector in status")?;
        c.addr.context("connector without address")
    })();
    let addr = match result {
        Ok(a) => a,
        Err(e) => {
            let _ = child.kill();
            return Err(e);
        }
    };

    let mut stream = TcpStream::connect(addr)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    for seq in 0..n {
        let rec = StreamRecord::from_southbound("rpi1", TOPIC, format!("{{\"n\":{seq}}}").into_bytes(), seq, "dev@1", seq);
        let ack = produce(&mut stream, &rec)?;
        ensure!(ack["offset"] == seq && ack["error"].is_null(), "append {seq} acked as {ack}");
    }
    child.kill()?;
    child.wait()?;

    // A write cut short by the kill leaves a partial record behind.
    let log_dir = data.join("connector");
    let file = std::fs::read_dir(&log_dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .find(|p| p.extension().is_some_and(|x| x == "log"))
        .ok_or_else(|| anyhow!("no log file in {}", log_dir.display()))?;
    let torn = encode_log_record(br#"{"torn":true}"#);
    std::fs::OpenOptions::new().append(true).open(&file)?.write_all(&torn[..torn.len() / 2])?;

    let out = Command::new(bin).args(["offsets", "--log-dir", log_dir.to_str().unwrap()]).env("RUST_LOG", "warn").output()?;
    ensure!(out.status.success(), "offsets failed: {}", String::from_utf8_lossy(&out.stderr));
    let printed: Value = serde_json::from_slice(&out.stdout)?;
    ensure!(printed[TOPIC]["next_offset"] == n, "recovered offsets {printed}");

    let bytes = std::fs::read(&file)?;
    let scan = scan_log(&bytes);
    ensure!(scan.records.len() as u64 == n && scan.valid_len == bytes.len(), "{} valid records, {} of {} bytes valid", scan.records.len(), scan.valid_len, bytes.len());
    let log = CommitLog::open(&log_dir, LogConfig::default())?;
    let offsets: Vec<u64> = log.read(TOPIC, 0, n as usize + 1)?.iter().map(|r| r.offset.unwrap()).collect();
    ensure!(offsets == (0..n).collect::<Vec<_>>(), "recovered {} records", offsets.len());
    Ok(format!("{n} acked appends survive SIGKILL; torn tail dropped; offsets 0..{n} with valid CRCs"))
}

fn fuzz<F: Fn(&[u8])>(seeds: &[Vec<u8>], rng: &mut StdRng, count: usize, decode: F) -> usize {
    let mut crashes = 0;
    for i in 0..count {
        let input: Vec<u8> = if i % 2 == 0 {
            let len = rng.random_range(0..64);
            (0..len).map(|_| rng.random()).collect()
        } else {
            let mut v = seeds[i % seeds.len()].clone();
            for _ in 0..rng.random_range(1..4) {
                match rng.random_range(0..3) {
                    0 if !v.is_empty() => {
                        let j = rng.random_range(0..v.len());
                        v[j] = rng.random();
                    }
                    1 if !v.is_empty() => v.truncate(rng.random_range(0..v.len())),
                    _ => {
                        let j = rng.random_range(0..=v.len());
                        v.insert(j, rng.random());
                    }
                }
            }
            v
        };
        if std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| decode(&input))).is_err() {
            crashes += 1;
        }
    }
    crashes
}

fn protocol_robustness() -> Result<String> {
    let mut rng = StdRng::seed_from_u64(8);
    let mqtt_seeds: Vec<Vec<u8>> = [
        Packet::Publish { topic: TOPIC.into(), payload: READING.to_vec() },
        Packet::Subscribe { packet_id: 1, filters: vec!["a/+/#".into()] },
        Packet::Connect { client_id: "dht".into(), keepalive_s: 60 },
        Packet::Pingreq,
        Packet::Disconnect,
    ]
    .iter()
    .map(|p| p.encode().unwrap())
    .collect();
    let mqtt_crashes = fuzz(&mqtt_seeds, &mut rng, 100_000, |b| {
        let _ = notelab_core::mqtt::decode(b);
    });
    let mut con = Message::new(MessageType::Confirmable, Code::POST, 7).with_path("telemetry/a");
    con.token = vec![1, 2];
    con.payload = READING.to_vec();
    let coap_seeds = vec![con.encode().unwrap(), Message::empty_ack(7).encode().unwrap()];
    let coap_crashes = fuzz(&coap_seeds, &mut rng, 100_000, |b| {
        let _ = Message::decode(b);
    });
    ensure!(mqtt_crashes == 0 && coap_crashes == 0, "decoder panics: MQTT {mqtt_crashes}, CoAP {coap_crashes}");

    runtime().block_on(async {
        let effects: Arc<Mutex<HashMap<Vec<u8>, u32>>> = Arc::default();
        let e = effects.clone();
        let handler: CoapHandler = Arc::new(move |req| {
            *e.lock().unwrap().entry(req.payload).or_default() += 1;
            Code::CHANGED
        });
        let lossy = |seed| DelayModel { drop_prob: 0.3, seed, ..DelayModel::default() };
        let mut server = CoapServer::bind(local(), lossy(1), handler).await?;
        let timing = Timing { ack_timeout: Duration::from_millis(30), ..Timing::default() };
        let client = CoapClient::open(lossy(2), timing).await?;
        let messages = 150;
        let mut acked = Vec::new();
        let mut gave_up = 0;
        for i in 0..messages {
            let payload = format!("m{i}").into_bytes();
            match client.post_confirmable(server.local_addr(), "telemetry", &payload).await {
                Ok(_) => acked.push(payload),
                Err(_) => gave_up += 1,
            }
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
        let effects = effects.lock().unwrap().clone();
        server.shutdown().await;
        let dupes = effects.values().filter(|&&c| c > 1).count();
        ensure!(dupes == 0, "{dupes} messages took effect more than once");
        let missing = acked.iter().filter(|p| effects.get(*p) != Some(&1)).count();
        ensure!(missing == 0, "{missing} acknowledged messages have no effect");
        ensure!(acked.len() + gave_up == messages, "unaccounted messages");
        Ok(format!(
            "2 x 100,000 fuzz inputs, 0 panics; CoAP CON at 30% loss both ways: {} exactly-once, {gave_up} reported give-ups, 0 duplicates",
            acked.len()
        ))
    })
}

fn fan_out() -> Result<String> {
    runtime().block_on(async {
        let mut broker = Broker::bind(local()).await?;
        let mut inboxes = Vec::new();
        let mut clients = Vec::new();
        for i in 0..5 {
            let (c, rx) = MqttClient::connect(broker.local_addr(), ClientOptions::new(format!("sub{i}"))).await?;
            c.subscribe(&["fan/out"]).await?;
            clients.push(c);
            inboxes.push(rx);
        }
        let (publisher, _) = MqttClient::connect(broker.local_addr(), ClientOptions::new("pub")).await?;
        for i in 0..1000u32 {
            publisher.publish("fan/out", i.to_string().as_bytes()).await?;
        }
        for (s, rx) in inboxes.iter_mut().enumerate() {
            for want in 0..1000u32 {
                let m = tokio::time::timeout(Duration::from_secs(5), rx.recv()).await?.context("inbox closed")?;
                ensure!(m.payload == want.to_string().as_bytes(), "subscriber {s} got {:?} at position {want}", String::from_utf8_lossy(&m.payload));
            }
            if let Ok(Some(extra)) = tokio::time::timeout(Duration::from_millis(200), rx.recv()).await {
                bail!("subscriber {s} got an extra copy {:?}", String::from_utf8_lossy(&extra.payload));
            }
        }
        broker.shutdown().await;
        Ok("5 subscribers x 1000 publishes, one copy each, FIFO".into())
    })
}

/// Object keys, recursively, with array elements merged.
fn schema(v: &Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(m.iter().map(|(k, v)| (k.clone(), schema(v))).collect()),
        Value::Array(items) => {
            let mut merged = BTreeMap::new();
            for s in items.iter().map(schema) {
                merged.insert(s.to_string(), s);
            }
            Value::Array(merged.into_values().collect())
        }
        Value::Null => Value::String("null".into()),
        Value::Bool(_) => Value::String("bool".into()),
        Value::Number(_) => Value::String("number".into()),
        Value::String(_) => Value::String("string".into()),
    }
}

fn determinism() -> Result<String> {
    runtime().block_on(async {
        let dir = tempfile::tempdir()?;
        let bed = Testbed::launch(dir.path()).await?;
        let mut cfg = ScenarioConfig::new(Protocol::Coap, Scope::Edge);
        cfg.n_messages = 40;
        cfg.warmup = 5;
        cfg.seed = 42;
        cfg.interval_ms = 1;
        cfg.coap_ack_timeout_ms = 50;
        cfg.delay_model = DelayModel { drop_prob: 0.2, ..DelayModel::default() };
        let a = run_scenario(&cfg, &bed.target(Protocol::Coap)).await?;
        let b = run_scenario(&cfg, &bed.target(Protocol::Coap)).await?;
        bed.shutdown().await;
        let counts = |r: &notelab::bench::BenchReport| r.results.iter().map(|c| c.counters).collect::<Vec<_>>();
        let drops = |r: &notelab::bench::BenchReport| r.results.iter().map(|c| c.link_drops.clone()).collect::<Vec<_>>();
        ensure!(counts(&a) == counts(&b), "counts differ: {:?} vs {:?}", counts(&a), counts(&b));
        ensure!(drops(&a) == drops(&b), "drop decisions differ");
        let total_drops: usize = drops(&a).iter().map(|d| d.iter().filter(|x| **x).count()).sum();
        ensure!(total_drops > 0, "the loss model never dropped anything");
        let (sa, sb) = (schema(&serde_json::to_value(&a)?), schema(&serde_json::to_value(&b)?));
        ensure!(sa == sb, "report schemas differ");
        Ok(format!("identical counts, {total_drops} identical drop decisions and report schema across two seeded CoAP runs"))
    })
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Result<String>); 10] = [
        ("pipeline fidelity", pipeline_fidelity),
        ("actuator rule", actuator_rule),
        ("latency ground truth", latency_ground_truth),
        ("statistics oracle", statistics_oracle),
        ("overhead direction", overhead_direction),
        ("offline sync", offline_sync),
        ("durability", durability),
        ("protocol robustness", protocol_robustness),
        ("fan-out", fan_out),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(anyhow!("panicked: {}", msg.unwrap_or_default()))
        });
        let line = match &outcome {
            Ok(detail) => format!("PASS {:>2} {name}: {detail}\n", i + 1),
            Err(e) => format!("FAIL {:>2} {name}: {e:#}\n", i + 1),
        };
        let _ = std::io::stderr().write_all(line.as_bytes());
        if outcome.is_err() {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}

//! The `notelab` binary: exit codes, session lifecycle and bench output.

use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_notelab");

fn notelab(data: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("NOTELAB_DATA_DIR", data).env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn spawn_up(data: &Path, config: &Path) -> Child {
    Command::new(BIN)
        .args(["up", config.to_str().unwrap()])
        .env("NOTELAB_DATA_DIR", data)
        .env("RUST_LOG", "warn")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap()
}

fn wait_ready(data: &Path, child: &mut Child) {
    let deadline = Instant::now() + Duration::from_secs(10);
    while !data.join("runtime.json").exists() {
        assert!(child.try_wait().unwrap().is_none(), "up exited early");
        assert!(Instant::now() < deadline, "up never became ready");
        std::thread::sleep(Duration::from_millis(20));
    }
}

fn wait_exit(child: &mut Child) -> i32 {
    let deadline = Instant::now() + Duration::from_secs(15);
    loop {
        if let Some(s) = child.try_wait().unwrap() {
            return s.code().unwrap_or(-1);
        }
        assert!(Instant::now() < deadline, "up did not exit");
        std::thread::sleep(Duration::from_millis(20));
    }
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let ok = notelab(dir.path(), &["validate", configs.join("two-student.json").to_str().unwrap()]);
    assert_eq!(code(&ok), 0);
    let cfg: Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(cfg["connector"]["label"], "192.168.5.2");
    assert_eq!(cfg["proxies"][1]["label"], "192.168.5.4");
    // Same file, same normalized output.
    let again = notelab(dir.path(), &["validate", configs.join("two-student.json").to_str().unwrap()]);
    assert_eq!(ok.stdout, again.stdout);

    let empty = dir.path().join("empty.json");
    std::fs::write(&empty, "").unwrap();
    let o = notelab(dir.path(), &["validate", empty.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty"));

    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{ "connector": {}, "proxies": [ { "id": "rpi1", "flavor": "mqtt-proxy", "northbound": "connector" } ],
            "devices": [ { "id": "dev-3-1", "proxy": "rpi7" } ] }"#,
    )
    .unwrap();
    let o = notelab(dir.path(), &["validate", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("devices[0].proxy") && err.contains("dev-3-1"), "{err}");

    assert_eq!(code(&notelab(dir.path(), &["bench", "--protocol", "zigbee"])), 2);
    assert_eq!(code(&notelab(dir.path(), &["frobnicate"])), 2);
}

#[test]
fn up_status_down_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let config = dir.path().join("topology.json");
    std::fs::write(
        &config,
        r#"{
            "name": "smoke",
            "cloud": { "project": { "project_id": "smoke", "auth_key": "k" }, "listen": "127.0.0.1:0" },
            "connector": { "listen": "127.0.0.1:0" },
            "proxies": [ { "id": "rpi1", "flavor": "mqtt-proxy", "listen": "127.0.0.1:0", "northbound": "connector" } ],
            "devices": [ { "id": "dev-1-1", "proxy": "rpi1", "period_ms": 10 } ],
            "actuators": [ { "id": "led-1", "proxy": "rpi1" } ]
        }"#,
    )
    .unwrap();

    assert_eq!(code(&notelab(&data, &["status"])), 1);
    let mut child = spawn_up(&data, &config);
    wait_ready(&data, &mut child);

    let status = notelab(&data, &["status"]);
    assert_eq!(code(&status), 0, "{}", String::from_utf8_lossy(&status.stderr));
    let st: Value = serde_json::from_slice(&status.stdout).unwrap();
    let kinds: Vec<&str> = st["components"].as_array().unwrap().iter().map(|c| c["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds, ["cloud", "connector", "mqtt-proxy", "actuator", "device"]);

    let twice = notelab(&data, &["up", config.to_str().unwrap()]);
    assert_eq!(code(&twice), 1);
    assert!(String::from_utf8_lossy(&twice.stderr).contains("already up"));

    // Stop while the device is still publishing.
    std::thread::sleep(Duration::from_millis(300));
    let down = notelab(&data, &["down"]);
    assert_eq!(code(&down), 0, "{}", String::from_utf8_lossy(&down.stderr));
    assert_eq!(wait_exit(&mut child), 0);
    assert!(!data.join("runtime.json").exists());
    assert_eq!(code(&notelab(&data, &["down"])), 0);

    let offsets = notelab(&data, &["offsets"]);
    assert_eq!(code(&offsets), 0);
    let o: Value = serde_json::from_slice(&offsets.stdout).unwrap();
    let topic = &o["DHTsensor/Temp_humidity"];
    let (next, committed) = (topic["next_offset"].as_u64().unwrap(), topic["committed"].as_u64().unwrap());
    assert!(next > 0 && committed <= next, "{o}");

    // Every committed offset is in the cloud snapshot.
    let snap: Value = serde_json::from_slice(&std::fs::read(data.join("cloud/smoke.json")).unwrap()).unwrap();
    let stored = snap["DHTsensor"]["Temp_humidity"].as_object().map_or(0, |m| m.len()) as u64;
    assert!(stored >= committed, "cloud has {stored}, committed {committed}");
}

#[test]
fn bench_prints_the_table_and_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = notelab(
        dir.path(),
        &["bench", "--self-contained", "--protocol", "http", "--sizes", "10,100,1024", "--scope", "edge", "--n", "20", "--warmup", "2", "--out", out.to_str().unwrap()],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8_lossy(&o.stdout);
    let rows: Vec<&str> = table.lines().filter(|l| l.starts_with("http ")).collect();
    assert_eq!(rows.len(), 3 + 3, "{table}");
    for f in ["report.json", "samples.csv", "boxplot.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let again = notelab(dir.path(), &["report", out.to_str().unwrap()]);
    assert_eq!(code(&again), 0);
    assert_eq!(String::from_utf8_lossy(&again.stdout).lines().next(), table.lines().next());

    let none = notelab(dir.path(), &["bench", "--protocol", "mqtt"]);
    assert_eq!(code(&none), 1);
    assert!(String::from_utf8_lossy(&none.stderr).contains("no topology is up"));
}

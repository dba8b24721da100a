//! Telemetry data model: device identities, sensor readings, size-class
//! padding and the canonical JSON envelope.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::topic::{Topic, TopicError};

/// Largest application payload an envelope may carry.
pub const MAX_PAYLOAD_LEN: usize = 256 * 1024;

/// Separator written between a payload and its size-class filler.
pub const PAD_SEPARATOR: u8 = 0x00;
/// Filler byte used to reach the size-class target.
pub const PAD_FILLER: u8 = 0x20;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DeviceId {
    pub group: u16,
    pub unit: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DeviceIdError {
    #[error("device id must look like dev-<group>-<unit>, got {0:?}")]
    Syntax(String),
    #[error("device group and unit must both be >= 1")]
    Zero,
}

impl DeviceId {
    pub fn new(group: u16, unit: u16) -> Result<Self, DeviceIdError> {
        if group == 0 || unit == 0 {
            return Err(DeviceIdError::Zero);
        }
        Ok(DeviceId { group, unit })
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dev-{}-{}", self.group, self.unit)
    }
}

impl FromStr for DeviceId {
    type Err = DeviceIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let syntax = || DeviceIdError::Syntax(s.to_string());
        let rest = s.strip_prefix("dev-").ok_or_else(syntax)?;
        let (group, unit) = rest.split_once('-').ok_or_else(syntax)?;
        let group = group.parse().map_err(|_| syntax())?;
        let unit = unit.parse().map_err(|_| syntax())?;
        DeviceId::new(group, unit)
    }
}

impl TryFrom<String> for DeviceId {
    type Error = DeviceIdError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<DeviceId> for String {
    fn from(d: DeviceId) -> String {
        d.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReadingKind {
    TempHumidity { temperature_c: f64, humidity_pct: f64 },
    Distance { cm: f64 },
    Motion { detected: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorKind {
    TempHumidity,
    Distance,
    Motion,
}

/// DHT11 operating envelope.
pub const TEMPERATURE_RANGE_C: (f64, f64) = (0.0, 50.0);
pub const HUMIDITY_RANGE_PCT: (f64, f64) = (20.0, 90.0);
/// HC-SR04 ranging envelope.
pub const DISTANCE_RANGE_CM: (f64, f64) = (2.0, 400.0);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReadingError {
    #[error("{field} is not finite")]
    NonFinite { field: &'static str },
    #[error("{field} = {value} outside [{min}, {max}]")]
    OutOfRange { field: &'static str, value: f64, min: f64, max: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorReading {
    pub kind: ReadingKind,
    pub sampled_at_ns: u64,
}

fn check_range(field: &'static str, value: f64, (min, max): (f64, f64)) -> Result<(), ReadingError> {
    if !value.is_finite() {
        return Err(ReadingError::NonFinite { field });
    }
    if value < min || value > max {
        return Err(ReadingError::OutOfRange { field, value, min, max });
    }
    Ok(())
}

impl SensorReading {
    pub fn new(kind: ReadingKind, sampled_at_ns: u64) -> Self {
        SensorReading { kind, sampled_at_ns }
    }

    pub fn sensor_kind(&self) -> SensorKind {
        match self.kind {
            ReadingKind::TempHumidity { .. } => SensorKind::TempHumidity,
            ReadingKind::Distance { .. } => SensorKind::Distance,
            ReadingKind::Motion { .. } => SensorKind::Motion,
        }
    }

    pub fn validate(&self) -> Result<(), ReadingError> {
        match self.kind {
            ReadingKind::TempHumidity { temperature_c, humidity_pct } => {
                check_range("temperature", temperature_c, TEMPERATURE_RANGE_C)?;
                check_range("humidity", humidity_pct, HUMIDITY_RANGE_PCT)
            }
            ReadingKind::Distance { cm } => check_range("distance_cm", cm, DISTANCE_RANGE_CM),
            ReadingKind::Motion { .. } => Ok(()),
        }
    }

    /// Renders the reading the way the publisher sketches print it: fixed
    /// two-decimal numbers, `temperature` before `humidity`, no whitespace.
    pub fn render_json(&self) -> Vec<u8> {
        render_reading_json(&self.kind)
    }
}

pub fn render_reading_json(kind: &ReadingKind) -> Vec<u8> {
    match *kind {
        ReadingKind::TempHumidity { temperature_c, humidity_pct } => {
            format!("{{\"temperature\":{temperature_c:.2},\"humidity\":{humidity_pct:.2}}}")
        }
        ReadingKind::Distance { cm } => format!("{{\"distance_cm\":{cm:.2}}}"),
        ReadingKind::Motion { detected } => format!("{{\"motion\":{detected}}}"),
    }
    .into_bytes()
}

/// Benchmark payload sizes. `KB1` is 1024 bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SizeClass {
    #[serde(rename = "10B")]
    B10,
    #[serde(rename = "100B")]
    B100,
    #[serde(rename = "1KB")]
    KB1,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::B10, SizeClass::B100, SizeClass::KB1];

    pub const fn target_len(self) -> usize {
        match self {
            SizeClass::B10 => 10,
            SizeClass::B100 => 100,
            SizeClass::KB1 => 1024,
        }
    }

    pub const fn label(self) -> &'static str {
        match self {
            SizeClass::B10 => "10B",
            SizeClass::B100 => "100B",
            SizeClass::KB1 => "1KB",
        }
    }

    pub fn from_len(len: usize) -> Option<SizeClass> {
        SizeClass::ALL.into_iter().find(|c| c.target_len() == len)
    }

    pub fn from_label(label: &str) -> Option<SizeClass> {
        SizeClass::ALL.into_iter().find(|c| c.label() == label)
    }
}

impl fmt::Display for SizeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PaddingError {
    #[error("payload of {len} bytes does not fit size class {class} ({target} bytes)")]
    PayloadTooLarge { len: usize, class: SizeClass, target: usize },
}

/// Pads `payload` to exactly the class length: payload, one `0x00`
/// separator, then `0x20` filler. A payload already at the target length is
/// returned unchanged.
pub fn pad_to_size_class(payload: &[u8], class: SizeClass) -> Result<Vec<u8>, PaddingError> {
    let target = class.target_len();
    if payload.len() > target {
        return Err(PaddingError::PayloadTooLarge { len: payload.len(), class, target });
    }
    let mut out = Vec::with_capacity(target);
    out.extend_from_slice(payload);
    if payload.len() < target {
        out.push(PAD_SEPARATOR);
        out.resize(target, PAD_FILLER);
    }
    Ok(out)
}

/// Inverse of [`pad_to_size_class`]: drops a trailing `0x00 0x20*` run.
/// Payloads that are not padded come back untouched.
pub fn strip_padding(bytes: &[u8]) -> &[u8] {
    let mut end = bytes.len();
    while end > 0 && bytes[end - 1] == PAD_FILLER {
        end -= 1;
    }
    if end > 0 && bytes[end - 1] == PAD_SEPARATOR {
        &bytes[..end - 1]
    } else {
        bytes
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvelopeError {
    #[error("payload of {0} bytes exceeds the 256 KiB limit")]
    PayloadTooLong(usize),
    #[error(transparent)]
    Padding(#[from] PaddingError),
    #[error("malformed envelope: {0}")]
    Malformed(String),
    #[error("envelope declares size class {declared} but is {actual} bytes on the wire")]
    SizeMismatch { declared: SizeClass, actual: usize },
    #[error(transparent)]
    Topic(#[from] TopicError),
}

/// The unit of telemetry. On the wire it travels as
/// `{"meta":{"dev":..,"seq":..,"ts":..,"topic":..[,"cls":..]},"data":<payload>}`
/// where `data` embeds a JSON payload verbatim; non-JSON payloads go in
/// `data_b64` instead. Size-class padding is applied to the encoded bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub topic: Topic,
    pub payload: Vec<u8>,
    pub device: DeviceId,
    pub seq: u64,
    pub publish_ts_ns: u64,
    pub size_class: Option<SizeClass>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    dev: DeviceId,
    seq: u64,
    ts: u64,
    topic: Topic,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cls: Option<SizeClass>,
}

#[derive(Deserialize)]
struct WireEnvelope<'a> {
    meta: Meta,
    #[serde(borrow, default)]
    data: Option<&'a RawValue>,
    #[serde(default)]
    data_b64: Option<String>,
}

/// True when `payload` is a complete JSON document with no surrounding
/// whitespace, so it can be embedded and recovered byte-for-byte.
fn embeddable_json(payload: &[u8]) -> bool {
    let trimmed = matches!(payload.first(), Some(b) if !b.is_ascii_whitespace())
        && matches!(payload.last(), Some(b) if !b.is_ascii_whitespace());
    trimmed && serde_json::from_slice::<&RawValue>(payload).is_ok()
}

impl Envelope {
    pub fn encode(&self) -> Result<Vec<u8>, EnvelopeError> {
        if self.payload.len() > MAX_PAYLOAD_LEN {
            return Err(EnvelopeError::PayloadTooLong(self.payload.len()));
        }
        let meta = Meta {
            dev: self.device.clone(),
            seq: self.seq,
            ts: self.publish_ts_ns,
            topic: self.topic.clone(),
            cls: self.size_class,
        };
        let mut out = Vec::with_capacity(self.payload.len() + 96);
        out.extend_from_slice(b"{\"meta\":");
        out.extend_from_slice(
            &serde_json::to_vec(&meta).map_err(|e| EnvelopeError::Malformed(e.to_string()))?,
        );
        if embeddable_json(&self.payload) {
            out.extend_from_slice(b",\"data\":");
            out.extend_from_slice(&self.payload);
        } else {
            out.extend_from_slice(b",\"data_b64\":\"");
            out.extend_from_slice(
                base64::engine::general_purpose::STANDARD.encode(&self.payload).as_bytes(),
            );
            out.push(b'"');
        }
        out.push(b'}');
        match self.size_class {
            Some(class) => Ok(pad_to_size_class(&out, class)?),
            None => Ok(out),
        }
    }

    pub fn decode(wire: &[u8]) -> Result<Envelope, EnvelopeError> {
        let body = strip_padding(wire);
        let parsed: WireEnvelope<'_> =
            serde_json::from_slice(body).map_err(|e| EnvelopeError::Malformed(e.to_string()))?;
        let payload = match (parsed.data, parsed.data_b64) {
            (Some(raw), None) => raw.get().as_bytes().to_vec(),
            (None, Some(b64)) => base64::engine::general_purpose::STANDARD
                .decode(b64.as_bytes())
                .map_err(|e| EnvelopeError::Malformed(e.to_string()))?,
            _ => return Err(EnvelopeError::Malformed("exactly one of data, data_b64 required".into())),
        };
        if payload.len() > MAX_PAYLOAD_LEN {
            return Err(EnvelopeError::PayloadTooLong(payload.len()));
        }
        if let Some(declared) = parsed.meta.cls {
            if wire.len() != declared.target_len() {
                return Err(EnvelopeError::SizeMismatch { declared, actual: wire.len() });
            }
        }
        Ok(Envelope {
            topic: parsed.meta.topic,
            payload,
            device: parsed.meta.dev,
            seq: parsed.meta.seq,
            publish_ts_ns: parsed.meta.ts,
            size_class: parsed.meta.cls,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencySample {
    pub seq: u64,
    pub send_ts_ns: u64,
    pub recv_ts_ns: u64,
}

impl LatencySample {
    pub fn latency_ns(&self) -> u64 {
        self.recv_ts_ns.saturating_sub(self.send_ts_ns)
    }

    pub fn latency_s(&self) -> f64 {
        self.latency_ns() as f64 / 1e9
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn th(t: f64, h: f64) -> ReadingKind {
        ReadingKind::TempHumidity { temperature_c: t, humidity_pct: h }
    }

    #[test]
    fn renders_publisher_listing_payloads() {
        assert_eq!(render_reading_json(&th(22.0, 18.0)), br#"{"temperature":22.00,"humidity":18.00}"#);
        assert_eq!(render_reading_json(&th(25.0, 36.0)), br#"{"temperature":25.00,"humidity":36.00}"#);
        assert_eq!(render_reading_json(&ReadingKind::Motion { detected: false }), br#"{"motion":false}"#);
        assert_eq!(render_reading_json(&ReadingKind::Distance { cm: 12.345 }), br#"{"distance_cm":12.35}"#);
    }

    #[test]
    fn device_id_renders_and_parses() {
        let d = DeviceId::new(1, 2).unwrap();
        assert_eq!(d.to_string(), "dev-1-2");
        assert_eq!("dev-1-2".parse::<DeviceId>().unwrap(), d);
        assert_eq!("dev-0-2".parse::<DeviceId>(), Err(DeviceIdError::Zero));
        assert!("device-1".parse::<DeviceId>().is_err());
    }

    #[test]
    fn reading_validation_uses_dht11_ranges() {
        assert!(SensorReading::new(th(22.0, 40.0), 0).validate().is_ok());
        assert!(SensorReading::new(th(51.0, 40.0), 0).validate().is_err());
        assert!(SensorReading::new(th(22.0, 18.0), 0).validate().is_err());
        assert!(SensorReading::new(th(f64::NAN, 40.0), 0).validate().is_err());
        assert!(SensorReading::new(ReadingKind::Distance { cm: 1.0 }, 0).validate().is_err());
    }

    #[test]
    fn pads_short_payload() {
        let out = pad_to_size_class(b"ab", SizeClass::B10).unwrap();
        assert_eq!(out, [0x61, 0x62, 0x00, 0x20, 0x20, 0x20, 0x20, 0x20, 0x20, 0x20]);
        assert_eq!(strip_padding(&out), b"ab");
    }

    #[test]
    fn pad_rejects_oversized_payload() {
        let json = [b'x'; 72];
        assert_eq!(
            pad_to_size_class(&json, SizeClass::B10),
            Err(PaddingError::PayloadTooLarge { len: 72, class: SizeClass::B10, target: 10 })
        );
    }

    #[test]
    fn pad_is_identity_at_exact_length() {
        let p = [7u8; 100];
        assert_eq!(pad_to_size_class(&p, SizeClass::B100).unwrap(), p.to_vec());
    }

    #[test]
    fn envelope_embeds_json_verbatim() {
        let env = Envelope {
            topic: Topic::new("DHTsensor/Temp_humidity").unwrap(),
            payload: br#"{"temperature":22.00,"humidity":18.00}"#.to_vec(),
            device: DeviceId::new(1, 1).unwrap(),
            seq: 1,
            publish_ts_ns: 42,
            size_class: None,
        };
        let wire = env.encode().unwrap();
        let text = core::str::from_utf8(&wire).unwrap();
        assert!(text.ends_with(r#","data":{"temperature":22.00,"humidity":18.00}}"#), "{text}");
        assert_eq!(Envelope::decode(&wire).unwrap(), env);
    }

    #[test]
    fn envelope_padded_to_class() {
        let env = Envelope {
            topic: Topic::new("t").unwrap(),
            payload: b"1".to_vec(),
            device: DeviceId::new(1, 1).unwrap(),
            seq: 3,
            publish_ts_ns: 0,
            size_class: Some(SizeClass::B100),
        };
        let wire = env.encode().unwrap();
        assert_eq!(wire.len(), 100);
        assert_eq!(Envelope::decode(&wire).unwrap(), env);
        let too_small = Envelope { size_class: Some(SizeClass::B10), ..env };
        assert!(matches!(too_small.encode(), Err(EnvelopeError::Padding(_))));
    }

    fn arb_envelope() -> impl Strategy<Value = Envelope> {
        (
            "[a-zA-Z0-9_]{1,8}(/[a-zA-Z0-9_]{1,8}){0,3}",
            prop_oneof![
                proptest::collection::vec(any::<u8>(), 0..200),
                (-1e6f64..1e6, 0u32..1000).prop_map(|(a, b)| {
                    format!("{{\"v\":{a},\"n\":[{b},true,null]}}").into_bytes()
                }),
            ],
            1u16..50,
            1u16..50,
            any::<u64>(),
            any::<u64>(),
            proptest::option::of(prop_oneof![Just(SizeClass::B100), Just(SizeClass::KB1)]),
        )
            .prop_map(|(topic, payload, g, u, seq, ts, cls)| Envelope {
                topic: Topic::new(topic).unwrap(),
                payload,
                device: DeviceId::new(g, u).unwrap(),
                seq,
                publish_ts_ns: ts,
                size_class: cls,
            })
    }

    proptest! {
        #[test]
        fn envelope_round_trips(env in arb_envelope()) {
            match env.encode() {
                Ok(wire) => {
                    if let Some(c) = env.size_class {
                        prop_assert_eq!(wire.len(), c.target_len());
                    }
                    prop_assert_eq!(Envelope::decode(&wire).unwrap(), env);
                }
                Err(EnvelopeError::Padding(PaddingError::PayloadTooLarge { .. })) => {
                    prop_assert!(env.size_class.is_some());
                }
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }

        #[test]
        fn padding_hits_target(len in 0usize..=1024, cls in prop_oneof![Just(SizeClass::B10), Just(SizeClass::B100), Just(SizeClass::KB1)]) {
            let payload: Vec<u8> = (0..len).map(|i| b'a' + (i % 26) as u8).collect();
            match pad_to_size_class(&payload, cls) {
                Ok(out) => {
                    prop_assert_eq!(out.len(), cls.target_len());
                    prop_assert_eq!(strip_padding(&out), &payload[..]);
                }
                Err(_) => prop_assert!(len > cls.target_len()),
            }
        }
    }
}

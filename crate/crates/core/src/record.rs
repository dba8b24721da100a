//! Log-resident telemetry records, connector-side deduplication and the
//! mapping from record payloads to cloud JSON values.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::model::Envelope;

/// A telemetry message as it travels from a proxy into the connector log.
///
/// `source` is the device id for enveloped payloads; raw payloads are keyed
/// by the proxy-local session that accepted them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub proxy_id: String,
    pub source: String,
    pub seq: u64,
    pub topic: String,
    #[serde(with = "b64")]
    pub payload: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub publish_ts_ns: Option<u64>,
    pub arrival_ts_ns: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<u64>,
}

impl StreamRecord {
    /// Builds a record from an accepted southbound payload. Enveloped
    /// payloads contribute their own device, seq and timestamp; the payload
    /// bytes are kept exactly as received either way.
    pub fn from_southbound(
        proxy_id: &str,
        topic: &str,
        payload: Vec<u8>,
        arrival_ts_ns: u64,
        fallback_source: &str,
        fallback_seq: u64,
    ) -> StreamRecord {
        let (source, seq, publish_ts_ns) = match Envelope::decode(&payload) {
            Ok(env) => (env.device.to_string(), env.seq, Some(env.publish_ts_ns)),
            Err(_) => (fallback_source.to_string(), fallback_seq, None),
        };
        StreamRecord {
            proxy_id: proxy_id.to_string(),
            source,
            seq,
            topic: topic.to_string(),
            payload,
            publish_ts_ns,
            arrival_ts_ns,
            offset: None,
        }
    }

    pub fn dedup_key(&self) -> (String, String) {
        (self.proxy_id.clone(), self.source.clone())
    }
}

mod b64 {
    use alloc::string::String;
    use alloc::vec::Vec;

    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD
            .decode(s.as_bytes())
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DedupVerdict {
    Fresh,
    /// Already logged. `offset` is known when `seq` equals the high-water mark.
    Duplicate { offset: Option<u64> },
}

/// High-water mark of `seq` per `(proxy_id, source)`.
#[derive(Debug, Clone, Default)]
pub struct DedupTable {
    marks: BTreeMap<(String, String), (u64, u64)>,
}

impl DedupTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn check(&self, record: &StreamRecord) -> DedupVerdict {
        match self.marks.get(&record.dedup_key()) {
            Some(&(seq, offset)) if record.seq == seq => DedupVerdict::Duplicate { offset: Some(offset) },
            Some(&(seq, _)) if record.seq < seq => DedupVerdict::Duplicate { offset: None },
            _ => DedupVerdict::Fresh,
        }
    }

    pub fn observe(&mut self, record: &StreamRecord, offset: u64) {
        let entry = self.marks.entry(record.dedup_key()).or_insert((0, 0));
        if record.seq >= entry.0 {
            *entry = (record.seq, offset);
        }
    }

    pub fn len(&self) -> usize {
        self.marks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marks.is_empty()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Wrapped {
    base64: String,
}

/// JSON text stored in the cloud for a payload: the payload itself when it
/// is compact JSON, otherwise `{"base64":"..."}`.
pub fn cloud_value_text(payload: &[u8]) -> String {
    let verbatim = matches!(payload.first(), Some(b) if !b.is_ascii_whitespace())
        && matches!(payload.last(), Some(b) if !b.is_ascii_whitespace())
        && serde_json::from_slice::<&RawValue>(payload).is_ok()
        && serde_json::from_slice::<Wrapped>(payload).is_err();
    if verbatim {
        // from_slice accepted it, so it is UTF-8.
        String::from_utf8(payload.to_vec()).unwrap_or_default()
    } else {
        wrap_base64(payload)
    }
}

/// `{"base64":"..."}` carrying `payload`; always decodable by
/// [`payload_from_cloud_text`].
pub fn wrap_base64(payload: &[u8]) -> String {
    let mut s = String::from("{\"base64\":\"");
    s.push_str(&base64::engine::general_purpose::STANDARD.encode(payload));
    s.push_str("\"}");
    s
}

/// Inverse of [`cloud_value_text`] given the stored JSON text.
pub fn payload_from_cloud_text(text: &str) -> Vec<u8> {
    if let Ok(w) = serde_json::from_str::<Wrapped>(text) {
        if let Ok(bytes) = base64::engine::general_purpose::STANDARD.decode(w.base64.as_bytes()) {
            return bytes;
        }
    }
    text.as_bytes().to_vec()
}

//! MQTT 3.1.1 packet codec, restricted to the QoS 0 clean-session subset.
//!
//! `decode` is incremental: it returns `Ok(None)` until a whole packet is
//! buffered, and `MalformedPacket` (with the byte offset of the first
//! violation) for anything that can never become a valid packet.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

/// Largest value the remaining-length varint can carry.
pub const MAX_REMAINING_LENGTH: u32 = 268_435_455;
/// Client identifiers longer than this are rejected.
pub const MAX_CLIENT_ID_LEN: usize = 23;

pub const CONNACK_ACCEPTED: u8 = 0x00;
pub const CONNACK_BAD_PROTOCOL: u8 = 0x01;
pub const CONNACK_IDENTIFIER_REJECTED: u8 = 0x02;

const PROTOCOL_NAME: &[u8] = b"MQTT";
const PROTOCOL_LEVEL: u8 = 4;
const CLEAN_SESSION: u8 = 0x02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect { client_id: String, keepalive_s: u16 },
    Connack { return_code: u8 },
    Publish { topic: String, payload: Vec<u8> },
    Subscribe { packet_id: u16, filters: Vec<String> },
    Suback { packet_id: u16, granted: Vec<u8> },
    Pingreq,
    Pingresp,
    Disconnect,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EncodeError {
    #[error("remaining length {0} exceeds 268,435,455")]
    ValueOutOfRange(u64),
    #[error("client id must be 1..=23 characters")]
    InvalidClientId,
    #[error("publish topic is empty or contains wildcards")]
    InvalidTopic,
    #[error("string of {0} bytes exceeds the 65,535 byte MQTT limit")]
    StringTooLong(usize),
    #[error("subscribe needs a non-zero packet id and at least one filter")]
    InvalidSubscribe,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed packet at byte {offset}: {reason}")]
pub struct MalformedPacket {
    pub offset: usize,
    pub reason: &'static str,
}

fn malformed<T>(offset: usize, reason: &'static str) -> Result<T, MalformedPacket> {
    Err(MalformedPacket { offset, reason })
}

/// Base-128 little-endian varint with continuation bit, 1 to 4 bytes.
pub fn encode_remaining_length(n: u32) -> Result<Vec<u8>, EncodeError> {
    if n > MAX_REMAINING_LENGTH {
        return Err(EncodeError::ValueOutOfRange(u64::from(n)));
    }
    let mut out = Vec::with_capacity(4);
    let mut x = n;
    loop {
        let mut byte = (x % 128) as u8;
        x /= 128;
        if x > 0 {
            byte |= 0x80;
        }
        out.push(byte);
        if x == 0 {
            return Ok(out);
        }
    }
}

/// Returns `(value, bytes consumed)` or `None` if more bytes are needed.
pub fn decode_remaining_length(buf: &[u8]) -> Result<Option<(u32, usize)>, MalformedPacket> {
    let mut value: u32 = 0;
    let mut multiplier: u32 = 1;
    for i in 0..4 {
        let Some(&byte) = buf.get(i) else {
            return Ok(None);
        };
        value += u32::from(byte & 0x7F) * multiplier;
        if byte & 0x80 == 0 {
            return Ok(Some((value, i + 1)));
        }
        multiplier *= 128;
    }
    malformed(4, "remaining length longer than 4 bytes")
}

fn put_string(out: &mut Vec<u8>, s: &[u8]) -> Result<(), EncodeError> {
    let len = u16::try_from(s.len()).map_err(|_| EncodeError::StringTooLong(s.len()))?;
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(s);
    Ok(())
}

fn valid_publish_topic(topic: &str) -> bool {
    !topic.is_empty() && !topic.contains(['+', '#', '\0'])
}

fn valid_client_id(id: &str) -> bool {
    !id.is_empty() && id.chars().count() <= MAX_CLIENT_ID_LEN
}

impl Packet {
    pub fn encode(&self) -> Result<Vec<u8>, EncodeError> {
        let (header, body) = match self {
            Packet::Connect { client_id, keepalive_s } => {
                if !valid_client_id(client_id) {
                    return Err(EncodeError::InvalidClientId);
                }
                let mut body = Vec::with_capacity(12 + client_id.len());
                put_string(&mut body, PROTOCOL_NAME)?;
                body.push(PROTOCOL_LEVEL);
                body.push(CLEAN_SESSION);
                body.extend_from_slice(&keepalive_s.to_be_bytes());
                put_string(&mut body, client_id.as_bytes())?;
                (0x10, body)
            }
            Packet::Connack { return_code } => (0x20, alloc::vec![0x00, *return_code]),
            Packet::Publish { topic, payload } => {
                if !valid_publish_topic(topic) {
                    return Err(EncodeError::InvalidTopic);
                }
                let mut body = Vec::with_capacity(2 + topic.len() + payload.len());
                put_string(&mut body, topic.as_bytes())?;
                body.extend_from_slice(payload);
                (0x30, body)
            }
            Packet::Subscribe { packet_id, filters } => {
                if *packet_id == 0 || filters.is_empty() {
                    return Err(EncodeError::InvalidSubscribe);
                }
                let mut body = Vec::new();
                body.extend_from_slice(&packet_id.to_be_bytes());
                for f in filters {
                    put_string(&mut body, f.as_bytes())?;
                    body.push(0x00);
                }
                (0x82, body)
            }
            Packet::Suback { packet_id, granted } => {
                let mut body = Vec::with_capacity(2 + granted.len());
                body.extend_from_slice(&packet_id.to_be_bytes());
                body.extend_from_slice(granted);
                (0x90, body)
            }
            Packet::Pingreq => (0xC0, Vec::new()),
            Packet::Pingresp => (0xD0, Vec::new()),
            Packet::Disconnect => (0xE0, Vec::new()),
        };
        let len = u32::try_from(body.len()).map_err(|_| EncodeError::ValueOutOfRange(body.len() as u64))?;
        let remaining = encode_remaining_length(len)?;
        let mut out = Vec::with_capacity(1 + remaining.len() + body.len());
        out.push(header);
        out.extend_from_slice(&remaining);
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Packet::Connect { .. } => "CONNECT",
            Packet::Connack { .. } => "CONNACK",
            Packet::Publish { .. } => "PUBLISH",
            Packet::Subscribe { .. } => "SUBSCRIBE",
            Packet::Suback { .. } => "SUBACK",
            Packet::Pingreq => "PINGREQ",
            Packet::Pingresp => "PINGRESP",
            Packet::Disconnect => "DISCONNECT",
        }
    }
}

/// Cursor over one packet body; offsets are reported relative to the start
/// of the whole packet.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    fn offset(&self) -> usize {
        self.base + self.pos
    }

    fn u8(&mut self) -> Result<u8, MalformedPacket> {
        let Some(&b) = self.buf.get(self.pos) else {
            return malformed(self.offset(), "packet body truncated");
        };
        self.pos += 1;
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16, MalformedPacket> {
        let hi = self.u8()?;
        let lo = self.u8()?;
        Ok(u16::from_be_bytes([hi, lo]))
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], MalformedPacket> {
        if self.buf.len() - self.pos < n {
            return malformed(self.offset(), "field length exceeds packet body");
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn binary(&mut self) -> Result<&'a [u8], MalformedPacket> {
        let n = self.u16()? as usize;
        self.bytes(n)
    }

    fn string(&mut self) -> Result<String, MalformedPacket> {
        let at = self.offset();
        let raw = self.binary()?;
        match core::str::from_utf8(raw) {
            Ok(s) if !s.contains('\0') => Ok(s.to_string()),
            Ok(_) => malformed(at, "string contains U+0000"),
            Err(_) => malformed(at, "string is not valid UTF-8"),
        }
    }

    fn rest(&mut self) -> &'a [u8] {
        let out = &self.buf[self.pos..];
        self.pos = self.buf.len();
        out
    }

    fn finish(&self) -> Result<(), MalformedPacket> {
        if self.pos != self.buf.len() {
            return malformed(self.offset(), "trailing bytes after packet fields");
        }
        Ok(())
    }
}

/// Decodes one packet from the front of `buf`, returning it with the number
/// of bytes consumed.
pub fn decode(buf: &[u8]) -> Result<Option<(Packet, usize)>, MalformedPacket> {
    let Some(&header) = buf.first() else {
        return Ok(None);
    };
    let Some((remaining, len_bytes)) = decode_remaining_length(&buf[1..]).map_err(|e| MalformedPacket {
        offset: e.offset + 1,
        reason: e.reason,
    })?
    else {
        return Ok(None);
    };
    let start = 1 + len_bytes;
    let total = start + remaining as usize;
    if buf.len() < total {
        return Ok(None);
    }
    let packet_type = header >> 4;
    let flags = header & 0x0F;
    let mut r = Reader { buf: &buf[start..total], pos: 0, base: start };

    let packet = match packet_type {
        1 => {
            if flags != 0 {
                return malformed(0, "CONNECT flags must be zero");
            }
            let name_at = r.offset();
            if r.binary()? != PROTOCOL_NAME {
                return malformed(name_at, "protocol name is not MQTT");
            }
            let level_at = r.offset();
            if r.u8()? != PROTOCOL_LEVEL {
                return malformed(level_at, "unsupported protocol level");
            }
            let flags_at = r.offset();
            let connect_flags = r.u8()?;
            if connect_flags & 0x01 != 0 {
                return malformed(flags_at, "reserved connect flag set");
            }
            let keepalive_s = r.u16()?;
            let client_id = r.string()?;
            if connect_flags & 0x04 != 0 {
                r.string()?;
                r.binary()?;
            }
            if connect_flags & 0x80 != 0 {
                r.string()?;
            }
            if connect_flags & 0x40 != 0 {
                r.binary()?;
            }
            Packet::Connect { client_id, keepalive_s }
        }
        2 => {
            if flags != 0 || remaining != 2 {
                return malformed(0, "CONNACK must be 0x20 0x02");
            }
            let ack_at = r.offset();
            if r.u8()? & 0xFE != 0 {
                return malformed(ack_at, "reserved acknowledge flags set");
            }
            Packet::Connack { return_code: r.u8()? }
        }
        3 => {
            let qos = (flags >> 1) & 0x03;
            if qos != 0 {
                return malformed(0, "only QoS 0 publishes are supported");
            }
            let topic_at = r.offset();
            let topic = r.string()?;
            if !valid_publish_topic(&topic) {
                return malformed(topic_at, "publish topic is empty or has wildcards");
            }
            Packet::Publish { topic, payload: r.rest().to_vec() }
        }
        8 => {
            if flags != 0x02 {
                return malformed(0, "SUBSCRIBE flags must be 0x2");
            }
            let id_at = r.offset();
            let packet_id = r.u16()?;
            if packet_id == 0 {
                return malformed(id_at, "packet id must be non-zero");
            }
            let mut filters = Vec::new();
            while r.pos < r.buf.len() {
                filters.push(r.string()?);
                let qos_at = r.offset();
                if r.u8()? > 2 {
                    return malformed(qos_at, "requested QoS out of range");
                }
            }
            if filters.is_empty() {
                return malformed(r.offset(), "SUBSCRIBE carries no filters");
            }
            Packet::Subscribe { packet_id, filters }
        }
        9 => {
            if flags != 0 {
                return malformed(0, "SUBACK flags must be zero");
            }
            let packet_id = r.u16()?;
            Packet::Suback { packet_id, granted: r.rest().to_vec() }
        }
        12 | 13 | 14 => {
            if flags != 0 || remaining != 0 {
                return malformed(0, "control packet must be two bytes");
            }
            match packet_type {
                12 => Packet::Pingreq,
                13 => Packet::Pingresp,
                _ => Packet::Disconnect,
            }
        }
        _ => return malformed(0, "unsupported packet type"),
    };
    r.finish()?;
    Ok(Some((packet, total)))
}

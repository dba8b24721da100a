//! Binary framings used between edge components.
//!
//! Northbound (proxy to connector) frames:
//!
//! ```text
//! +----------------+------+----------------------+
//! | len: u32 BE    | type | JSON body            |
//! +----------------+------+----------------------+
//! ```
//!
//! `len` counts the type byte plus the body. Types: PRODUCE=1, ACK=2, HELLO=3.
//!
//! Commit-log records on disk:
//!
//! ```text
//! +----------------+----------------+-------------+
//! | len: u32 BE    | crc32: u32 BE  | JSON body   |
//! +----------------+----------------+-------------+
//! ```
//!
//! `len` counts the body only; the CRC (IEEE) covers the body.

use alloc::vec::Vec;

/// Largest northbound frame accepted.
pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;
/// Largest log record body accepted during recovery.
pub const MAX_RECORD_LEN: usize = 16 * 1024 * 1024;
pub const RECORD_HEADER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameType {
    Produce = 1,
    Ack = 2,
    Hello = 3,
}

impl FrameType {
    pub fn from_u8(b: u8) -> Option<FrameType> {
        match b {
            1 => Some(FrameType::Produce),
            2 => Some(FrameType::Ack),
            3 => Some(FrameType::Hello),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameType,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("frame length {0} is zero or exceeds the 16 MiB limit")]
    BadLength(usize),
    #[error("unknown frame type {0}")]
    UnknownType(u8),
}

impl Frame {
    pub fn new(kind: FrameType, body: impl Into<Vec<u8>>) -> Self {
        Frame { kind, body: body.into() }
    }

    pub fn encode(&self) -> Vec<u8> {
        let len = (1 + self.body.len()) as u32;
        let mut out = Vec::with_capacity(5 + self.body.len());
        out.extend_from_slice(&len.to_be_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.body);
        out
    }

    /// Decodes one frame from the front of `buf`; `Ok(None)` means more
    /// bytes are needed.
    pub fn decode(buf: &[u8]) -> Result<Option<(Frame, usize)>, FrameError> {
        if buf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
        if len == 0 || len > MAX_FRAME_LEN {
            return Err(FrameError::BadLength(len));
        }
        if buf.len() < 4 + len {
            return Ok(None);
        }
        let kind = FrameType::from_u8(buf[4]).ok_or(FrameError::UnknownType(buf[4]))?;
        Ok(Some((Frame { kind, body: buf[5..4 + len].to_vec() }, 4 + len)))
    }
}

pub fn crc32(bytes: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(bytes);
    h.finalize()
}

pub fn encode_log_record(body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(RECORD_HEADER_LEN + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&crc32(body).to_be_bytes());
    out.extend_from_slice(body);
    out
}

/// Where a record body sits inside a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordSpan {
    pub start: usize,
    pub len: usize,
}

impl RecordSpan {
    pub fn body<'a>(&self, segment: &'a [u8]) -> &'a [u8] {
        &segment[self.start..self.start + self.len]
    }
}

/// Outcome of a sequential recovery scan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogScan {
    pub records: Vec<RecordSpan>,
    /// Bytes covered by intact records; anything past this is a torn or
    /// corrupt tail.
    pub valid_len: usize,
}

impl LogScan {
    pub fn torn(&self, segment_len: usize) -> bool {
        self.valid_len < segment_len
    }
}

/// Walks the segment front to back and stops at the first record that is
/// truncated, oversized or fails its CRC.
pub fn scan_log(segment: &[u8]) -> LogScan {
    let mut records = Vec::new();
    let mut pos = 0;
    while segment.len() - pos >= RECORD_HEADER_LEN {
        let h = &segment[pos..pos + RECORD_HEADER_LEN];
        let len = u32::from_be_bytes([h[0], h[1], h[2], h[3]]) as usize;
        let crc = u32::from_be_bytes([h[4], h[5], h[6], h[7]]);
        if len > MAX_RECORD_LEN || segment.len() - pos - RECORD_HEADER_LEN < len {
            break;
        }
        let start = pos + RECORD_HEADER_LEN;
        if crc32(&segment[start..start + len]) != crc {
            break;
        }
        records.push(RecordSpan { start, len });
        pos = start + len;
    }
    LogScan { records, valid_len: pos }
}

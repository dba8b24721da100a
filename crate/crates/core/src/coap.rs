//! CoAP message codec (RFC 7252 base format) and confirmable-exchange timing.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::time::Duration;

pub const VERSION: u8 = 1;
pub const PAYLOAD_MARKER: u8 = 0xFF;
pub const MAX_TOKEN_LEN: usize = 8;

pub const OPTION_URI_PATH: u16 = 11;
pub const OPTION_CONTENT_FORMAT: u16 = 12;
pub const OPTION_URI_QUERY: u16 = 15;

pub const CONTENT_FORMAT_JSON: u16 = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageType {
    Confirmable,
    NonConfirmable,
    Acknowledgement,
    Reset,
}

impl MessageType {
    fn bits(self) -> u8 {
        match self {
            MessageType::Confirmable => 0,
            MessageType::NonConfirmable => 1,
            MessageType::Acknowledgement => 2,
            MessageType::Reset => 3,
        }
    }

    fn from_bits(bits: u8) -> MessageType {
        match bits & 0x03 {
            0 => MessageType::Confirmable,
            1 => MessageType::NonConfirmable,
            2 => MessageType::Acknowledgement,
            _ => MessageType::Reset,
        }
    }
}

/// Request method or response code, `class.detail` packed as `ccc ddddd`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Code(pub u8);

impl Code {
    pub const EMPTY: Code = Code(0x00);
    pub const GET: Code = Code(0x01);
    pub const POST: Code = Code(0x02);
    pub const PUT: Code = Code(0x03);
    pub const DELETE: Code = Code(0x04);
    pub const CREATED: Code = Code(0x41);
    pub const CHANGED: Code = Code(0x44);
    pub const CONTENT: Code = Code(0x45);
    pub const BAD_REQUEST: Code = Code(0x80);
    pub const NOT_FOUND: Code = Code(0x84);
    pub const METHOD_NOT_ALLOWED: Code = Code(0x85);
    pub const INTERNAL_SERVER_ERROR: Code = Code(0xA0);

    pub fn class(self) -> u8 {
        self.0 >> 5
    }

    pub fn detail(self) -> u8 {
        self.0 & 0x1F
    }

    pub fn is_request(self) -> bool {
        self.class() == 0 && self.0 != 0
    }

    pub fn is_success(self) -> bool {
        self.class() == 2
    }
}

impl fmt::Debug for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.class(), self.detail())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoapOption {
    pub number: u16,
    pub value: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub mtype: MessageType,
    pub code: Code,
    pub message_id: u16,
    pub token: Vec<u8>,
    /// Kept in ascending option-number order.
    pub options: Vec<CoapOption>,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EncodeError {
    #[error("token of {0} bytes exceeds 8")]
    TokenTooLong(usize),
    #[error("options are not in ascending option-number order")]
    OptionsUnordered,
    #[error("option value of {0} bytes is too long")]
    OptionTooLong(usize),
    #[error("empty message must not carry token, options or payload")]
    NonEmptyEmpty,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed CoAP message at byte {offset}: {reason}")]
pub struct MalformedMessage {
    pub offset: usize,
    pub reason: &'static str,
}

fn malformed<T>(offset: usize, reason: &'static str) -> Result<T, MalformedMessage> {
    Err(MalformedMessage { offset, reason })
}

impl Message {
    pub fn new(mtype: MessageType, code: Code, message_id: u16) -> Self {
        Message { mtype, code, message_id, token: Vec::new(), options: Vec::new(), payload: Vec::new() }
    }

    /// Empty ACK for `request`, echoing its message id.
    pub fn empty_ack(message_id: u16) -> Self {
        Message::new(MessageType::Acknowledgement, Code::EMPTY, message_id)
    }

    /// Inserts after any existing options with the same number, keeping the
    /// list sorted.
    pub fn add_option(&mut self, number: u16, value: impl Into<Vec<u8>>) {
        let at = self.options.partition_point(|o| o.number <= number);
        self.options.insert(at, CoapOption { number, value: value.into() });
    }

    pub fn with_path(mut self, path: &str) -> Self {
        for seg in path.split('/').filter(|s| !s.is_empty()) {
            self.add_option(OPTION_URI_PATH, seg.as_bytes());
        }
        self
    }

    pub fn uri_path(&self) -> Vec<String> {
        self.options
            .iter()
            .filter(|o| o.number == OPTION_URI_PATH)
            .map(|o| String::from_utf8_lossy(&o.value).into_owned())
            .collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>, EncodeError> {
        if self.token.len() > MAX_TOKEN_LEN {
            return Err(EncodeError::TokenTooLong(self.token.len()));
        }
        if self.code == Code::EMPTY
            && (!self.token.is_empty() || !self.options.is_empty() || !self.payload.is_empty())
        {
            return Err(EncodeError::NonEmptyEmpty);
        }
        if self.options.windows(2).any(|w| w[0].number > w[1].number) {
            return Err(EncodeError::OptionsUnordered);
        }
        let mut out = Vec::with_capacity(4 + self.token.len() + self.payload.len() + 16);
        out.push((VERSION << 6) | (self.mtype.bits() << 4) | self.token.len() as u8);
        out.push(self.code.0);
        out.extend_from_slice(&self.message_id.to_be_bytes());
        out.extend_from_slice(&self.token);
        let mut previous = 0u16;
        for opt in &self.options {
            let delta = opt.number - previous;
            previous = opt.number;
            let len = opt.value.len();
            if len > 65535 + 269 {
                return Err(EncodeError::OptionTooLong(len));
            }
            let (dn, dext) = nibble(u32::from(delta));
            let (ln, lext) = nibble(len as u32);
            out.push((dn << 4) | ln);
            out.extend_from_slice(&dext);
            out.extend_from_slice(&lext);
            out.extend_from_slice(&opt.value);
        }
        if !self.payload.is_empty() {
            out.push(PAYLOAD_MARKER);
            out.extend_from_slice(&self.payload);
        }
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Message, MalformedMessage> {
        if buf.len() < 4 {
            return malformed(buf.len(), "shorter than the 4-byte header");
        }
        if buf[0] >> 6 != VERSION {
            return malformed(0, "unsupported version");
        }
        let mtype = MessageType::from_bits(buf[0] >> 4);
        let tkl = (buf[0] & 0x0F) as usize;
        if tkl > MAX_TOKEN_LEN {
            return malformed(0, "token length 9-15 is reserved");
        }
        let code = Code(buf[1]);
        let message_id = u16::from_be_bytes([buf[2], buf[3]]);
        if buf.len() < 4 + tkl {
            return malformed(buf.len(), "token truncated");
        }
        let token = buf[4..4 + tkl].to_vec();
        let mut pos = 4 + tkl;
        if code == Code::EMPTY {
            if tkl != 0 || pos != buf.len() {
                return malformed(4, "empty message carries content");
            }
            return Ok(Message { mtype, code, message_id, token, options: Vec::new(), payload: Vec::new() });
        }
        let mut options = Vec::new();
        let mut number = 0u32;
        let mut payload = Vec::new();
        while pos < buf.len() {
            let head = buf[pos];
            if head == PAYLOAD_MARKER {
                if pos + 1 == buf.len() {
                    return malformed(pos, "payload marker followed by empty payload");
                }
                payload = buf[pos + 1..].to_vec();
                break;
            }
            let head_at = pos;
            pos += 1;
            let delta = read_extended(buf, &mut pos, head >> 4, head_at)?;
            let len = read_extended(buf, &mut pos, head & 0x0F, head_at)? as usize;
            number += delta;
            if number > u32::from(u16::MAX) {
                return malformed(head_at, "option number overflows 16 bits");
            }
            if buf.len() - pos < len {
                return malformed(pos, "option value truncated");
            }
            options.push(CoapOption { number: number as u16, value: buf[pos..pos + len].to_vec() });
            pos += len;
        }
        Ok(Message { mtype, code, message_id, token, options, payload })
    }
}

fn nibble(v: u32) -> (u8, Vec<u8>) {
    match v {
        0..=12 => (v as u8, Vec::new()),
        13..=268 => (13, alloc::vec![(v - 13) as u8]),
        _ => (14, ((v - 269) as u16).to_be_bytes().to_vec()),
    }
}

fn read_extended(buf: &[u8], pos: &mut usize, n: u8, head_at: usize) -> Result<u32, MalformedMessage> {
    match n {
        0..=12 => Ok(u32::from(n)),
        13 => {
            let Some(&b) = buf.get(*pos) else {
                return malformed(*pos, "extended option field truncated");
            };
            *pos += 1;
            Ok(u32::from(b) + 13)
        }
        14 => {
            if buf.len() < *pos + 2 {
                return malformed(*pos, "extended option field truncated");
            }
            let v = u16::from_be_bytes([buf[*pos], buf[*pos + 1]]);
            *pos += 2;
            Ok(u32::from(v) + 269)
        }
        _ => malformed(head_at, "option nibble 15 outside payload marker"),
    }
}

/// Confirmable retransmission parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub ack_timeout: Duration,
    pub backoff_factor: f64,
    pub max_retransmit: u32,
}

impl Default for Timing {
    fn default() -> Self {
        Timing { ack_timeout: Duration::from_secs(2), backoff_factor: 1.5, max_retransmit: 4 }
    }
}

impl Timing {
    /// Timeout armed after transmission `attempt` (0 = initial send).
    pub fn timeout_after(&self, attempt: u32) -> Duration {
        self.ack_timeout.mul_f64(libm::pow(self.backoff_factor, f64::from(attempt)))
    }

    /// Offsets from the initial send at which each retransmission goes out.
    pub fn retransmit_offsets(&self) -> Vec<Duration> {
        let mut at = Duration::ZERO;
        (0..self.max_retransmit)
            .map(|i| {
                at += self.timeout_after(i);
                at
            })
            .collect()
    }

    /// Time from the initial send until the exchange is abandoned.
    pub fn give_up_after(&self) -> Duration {
        (0..=self.max_retransmit).map(|i| self.timeout_after(i)).sum()
    }
}

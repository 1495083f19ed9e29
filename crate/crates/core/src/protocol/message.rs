use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER_LEN: usize = 12;
/// Largest accepted payload; longer declared lengths are rejected before
/// any allocation.
pub const MAX_PAYLOAD: u64 = 1 << 30;

#[repr(u32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageTag {
    BroadcastModel = 1,
    AdapterUpload = 2,
    MergedModel = 3,
    Ack = 4,
    Error = 5,
}

impl MessageTag {
    pub fn from_u32(tag: u32) -> Result<Self> {
        Ok(match tag {
            1 => Self::BroadcastModel,
            2 => Self::AdapterUpload,
            3 => Self::MergedModel,
            4 => Self::Ack,
            5 => Self::Error,
            other => return Err(Error::BadTag(other)),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::BroadcastModel => "BroadcastModel",
            Self::AdapterUpload => "AdapterUpload",
            Self::MergedModel => "MergedModel",
            Self::Ack => "Ack",
            Self::Error => "Error",
        }
    }
}

/// JSON body of `Ack` and `Error` frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Status {
    pub code: i32,
    #[serde(default)]
    pub detail: String,
}

impl Status {
    pub fn ok(detail: impl Into<String>) -> Self {
        Self {
            code: 0,
            detail: detail.into(),
        }
    }

    pub fn from_error(err: &Error) -> Self {
        Self {
            code: err.root().code() as i32,
            detail: err.to_string(),
        }
    }
}

/// One protocol frame. Container payloads are kept as raw bytes so that the
/// receiver decides how to validate them.
#[derive(Debug, Clone, PartialEq)]
pub enum ProtocolMessage {
    BroadcastModel(Vec<u8>),
    AdapterUpload(Vec<u8>),
    MergedModel(Vec<u8>),
    Ack(Status),
    Error(Status),
}

impl ProtocolMessage {
    pub fn tag(&self) -> MessageTag {
        match self {
            Self::BroadcastModel(_) => MessageTag::BroadcastModel,
            Self::AdapterUpload(_) => MessageTag::AdapterUpload,
            Self::MergedModel(_) => MessageTag::MergedModel,
            Self::Ack(_) => MessageTag::Ack,
            Self::Error(_) => MessageTag::Error,
        }
    }

    fn payload(&self) -> Vec<u8> {
        match self {
            Self::BroadcastModel(b) | Self::AdapterUpload(b) | Self::MergedModel(b) => b.clone(),
            Self::Ack(s) | Self::Error(s) => serde_json::to_vec(s).expect("status serializes"),
        }
    }

    fn from_parts(tag: MessageTag, payload: Vec<u8>) -> Result<Self> {
        Ok(match tag {
            MessageTag::BroadcastModel => Self::BroadcastModel(payload),
            MessageTag::AdapterUpload => Self::AdapterUpload(payload),
            MessageTag::MergedModel => Self::MergedModel(payload),
            MessageTag::Ack => Self::Ack(serde_json::from_slice(&payload)?),
            MessageTag::Error => Self::Error(serde_json::from_slice(&payload)?),
        })
    }
}

pub fn encode_message(msg: &ProtocolMessage) -> Vec<u8> {
    let payload = msg.payload();
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&(msg.tag() as u32).to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

fn parse_header(header: &[u8; HEADER_LEN]) -> Result<(MessageTag, u64)> {
    let tag = MessageTag::from_u32(u32::from_le_bytes(header[..4].try_into().expect("4 bytes")))?;
    let len = u64::from_le_bytes(header[4..].try_into().expect("8 bytes"));
    if len > MAX_PAYLOAD {
        return Err(Error::LengthOverflow(len));
    }
    Ok((tag, len))
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode_message(bytes: &[u8]) -> Result<ProtocolMessage> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::FrameTruncated {
            needed: HEADER_LEN as u64,
            available: bytes.len() as u64,
        });
    }
    let (tag, len) = parse_header(bytes[..HEADER_LEN].try_into().expect("header"))?;
    let body = &bytes[HEADER_LEN..];
    if (body.len() as u64) < len {
        return Err(Error::FrameTruncated {
            needed: HEADER_LEN as u64 + len,
            available: bytes.len() as u64,
        });
    }
    if body.len() as u64 > len {
        return Err(Error::LengthMismatch(format!(
            "{} bytes follow a frame declaring {len}",
            body.len()
        )));
    }
    ProtocolMessage::from_parts(tag, body.to_vec())
}

/// Fills `buf` from `reader`; a clean or mid-buffer end of stream becomes
/// `FrameTruncated` with the given frame offsets.
fn fill(reader: &mut impl Read, buf: &mut [u8], offset: u64, needed: u64) -> Result<()> {
    let mut got = 0;
    while got < buf.len() {
        match reader.read(&mut buf[got..]) {
            Ok(0) => {
                return Err(Error::FrameTruncated {
                    needed,
                    available: offset + got as u64,
                })
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
                return Err(Error::Timeout(format!("waiting for frame bytes ({e})")))
            }
            Err(e) => return Err(Error::Io(e)),
        }
    }
    Ok(())
}

/// Reads one frame from a byte stream.
pub fn read_message(reader: &mut impl Read) -> Result<ProtocolMessage> {
    let mut header = [0u8; HEADER_LEN];
    fill(reader, &mut header, 0, HEADER_LEN as u64)?;
    let (tag, len) = parse_header(&header)?;
    let total = HEADER_LEN as u64 + len;
    let mut payload = vec![0u8; len as usize];
    fill(reader, &mut payload, HEADER_LEN as u64, total)?;
    ProtocolMessage::from_parts(tag, payload)
}

//! Length-prefixed, checksummed message framing.
//!
//! ```text
//! magic    b"EYP1"
//! type     u8
//! pad      u8    always 0
//! version  u32   model version the message refers to
//! length   u32   payload bytes
//! payload
//! crc32    u32   of the payload
//! ```
//!
//! All integers are little-endian.

use std::fmt;
use std::io::{self, Read, Write};

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"EYP1";
pub const HEADER_LEN: usize = 14;
pub const TRAILER_LEN: usize = 4;
/// Size of a frame with an empty payload.
pub const MIN_FRAME_LEN: usize = HEADER_LEN + TRAILER_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    FrameUpload = 1,
    DetectRequest = 2,
    DetectResult = 3,
    WeightPush = 4,
    Ack = 5,
}

impl MessageType {
    pub const ALL: [MessageType; 5] = [
        MessageType::FrameUpload,
        MessageType::DetectRequest,
        MessageType::DetectResult,
        MessageType::WeightPush,
        MessageType::Ack,
    ];

    pub fn from_u8(b: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|t| *t as u8 == b)
    }
}

impl fmt::Display for MessageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MessageType::FrameUpload => "FRAME_UPLOAD",
            MessageType::DetectRequest => "DETECT_REQUEST",
            MessageType::DetectResult => "DETECT_RESULT",
            MessageType::WeightPush => "WEIGHT_PUSH",
            MessageType::Ack => "ACK",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: MessageType,
    pub version: u32,
    pub payload: Vec<u8>,
}

impl Message {
    pub fn new(kind: MessageType, version: u32, payload: Vec<u8>) -> Self {
        Message { kind, version, payload }
    }

    pub fn ack(version: u32, payload: Vec<u8>) -> Self {
        Message::new(MessageType::Ack, version, payload)
    }

    pub fn encoded_len(&self) -> usize {
        MIN_FRAME_LEN + self.payload.len()
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("non-zero padding byte {0}")]
    Padding(u8),
    #[error("checksum mismatch: frame says {expected:08x}, payload hashes to {actual:08x}")]
    Checksum { expected: u32, actual: u32 },
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("{0} bytes after the end of the frame")]
    TrailingBytes(usize),
    #[error("payload of {0} bytes exceeds the 32-bit length field")]
    TooLarge(usize),
    #[error("payload of {len} bytes exceeds the receive limit of {limit}")]
    OverLimit { len: usize, limit: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn encode_message(msg: &Message) -> Result<Vec<u8>, ProtocolError> {
    let len = u32::try_from(msg.payload.len()).map_err(|_| ProtocolError::TooLarge(msg.payload.len()))?;
    let mut out = Vec::with_capacity(msg.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(msg.kind as u8);
    out.push(0);
    out.extend_from_slice(&msg.version.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&msg.payload);
    out.extend_from_slice(&crc32fast::hash(&msg.payload).to_le_bytes());
    Ok(out)
}

struct Header {
    kind: MessageType,
    version: u32,
    len: usize,
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<Header, ProtocolError> {
    let magic: [u8; 4] = h[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(ProtocolError::BadMagic(magic));
    }
    let kind = MessageType::from_u8(h[4]).ok_or(ProtocolError::UnknownType(h[4]))?;
    if h[5] != 0 {
        return Err(ProtocolError::Padding(h[5]));
    }
    Ok(Header {
        kind,
        version: u32::from_le_bytes(h[6..10].try_into().expect("4 bytes")),
        len: u32::from_le_bytes(h[10..14].try_into().expect("4 bytes")) as usize,
    })
}

fn finish(header: Header, payload: Vec<u8>, crc: [u8; 4]) -> Result<Message, ProtocolError> {
    let expected = u32::from_le_bytes(crc);
    let actual = crc32fast::hash(&payload);
    if expected != actual {
        return Err(ProtocolError::Checksum { expected, actual });
    }
    Ok(Message {
        kind: header.kind,
        version: header.version,
        payload,
    })
}

/// Decodes the frame at the start of `bytes`, returning it with the number
/// of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Message, usize), ProtocolError> {
    let truncated = |needed| ProtocolError::Truncated {
        needed,
        available: bytes.len(),
    };
    let head: &[u8; HEADER_LEN] = bytes
        .get(..HEADER_LEN)
        .ok_or_else(|| truncated(HEADER_LEN))?
        .try_into()
        .expect("header length");
    let header = parse_header(head)?;
    let total = MIN_FRAME_LEN + header.len;
    if bytes.len() < total {
        return Err(truncated(total));
    }
    let payload = bytes[HEADER_LEN..HEADER_LEN + header.len].to_vec();
    let crc = bytes[total - TRAILER_LEN..total].try_into().expect("4 bytes");
    Ok((finish(header, payload, crc)?, total))
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode_message(bytes: &[u8]) -> Result<Message, ProtocolError> {
    let (msg, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(ProtocolError::TrailingBytes(bytes.len() - used));
    }
    Ok(msg)
}

pub fn write_message(sink: &mut impl Write, msg: &Message) -> Result<(), ProtocolError> {
    sink.write_all(&encode_message(msg)?)?;
    sink.flush()?;
    Ok(())
}

/// Reads one frame from a stream. Payloads larger than `limit` are refused
/// before any allocation.
pub fn read_message(source: &mut impl Read, limit: usize) -> Result<Message, ProtocolError> {
    let mut head = [0u8; HEADER_LEN];
    source.read_exact(&mut head)?;
    let header = parse_header(&head)?;
    if header.len > limit {
        return Err(ProtocolError::OverLimit {
            len: header.len,
            limit,
        });
    }
    let mut payload = vec![0u8; header.len];
    source.read_exact(&mut payload)?;
    let mut crc = [0u8; 4];
    source.read_exact(&mut crc)?;
    finish(header, payload, crc)
}

// Full frame, big-endian:
//
//  0               1               2               3
// +-+-------------+---------------+-+-------------+---------------+
// |F|   source call number        |R|   destination call number   |
// +-+-------------+---------------+-+-------------+---------------+
// |                        timestamp (ms)                         |
// +---------------+---------------+---------------+---------------+
// |    oseqno     |    iseqno     |  class 0x06   |   kind code   |
// +---------------+---------------+---------------+---------------+
// |  ie id  | len |  data ...                                     |
//
// Mini frame:
// +-+-------------+---------------+---------------+---------------+
// |0|   source call number        |      timestamp low 16         |
// +-+-------------+---------------+---------------+---------------+
// |  payload ...

use thiserror::Error;

pub const FULL_HEADER_LEN: usize = 12;
pub const MINI_HEADER_LEN: usize = 4;
/// Frame class byte carried by every overlay-control full frame.
pub const OVERLAY_CONTROL_CLASS: u8 = 0x06;
pub const MAX_CALL_NUMBER: u16 = 0x7fff;

const F_BIT: u16 = 0x8000;
const R_BIT: u16 = 0x8000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    New,
    Ping,
    Pong,
    Ack,
    Hangup,
    Accept,
    Answer,
    RegReq,
    RegAuth,
    RegAck,
    RegRej,
    RegRel,
    FindCallees,
    FindCallee,
    ReplyContacts,
    ReplyCallee,
}

impl MessageKind {
    pub const ALL: [MessageKind; 16] = [
        MessageKind::New,
        MessageKind::Ping,
        MessageKind::Pong,
        MessageKind::Ack,
        MessageKind::Hangup,
        MessageKind::Accept,
        MessageKind::Answer,
        MessageKind::RegReq,
        MessageKind::RegAuth,
        MessageKind::RegAck,
        MessageKind::RegRej,
        MessageKind::RegRel,
        MessageKind::FindCallees,
        MessageKind::FindCallee,
        MessageKind::ReplyContacts,
        MessageKind::ReplyCallee,
    ];

    pub fn code(self) -> u8 {
        match self {
            MessageKind::New => 0x01,
            MessageKind::Ping => 0x02,
            MessageKind::Pong => 0x03,
            MessageKind::Ack => 0x04,
            MessageKind::Hangup => 0x05,
            MessageKind::Accept => 0x07,
            MessageKind::Answer => 0x08,
            MessageKind::RegReq => 0x0d,
            MessageKind::RegAuth => 0x0e,
            MessageKind::RegAck => 0x0f,
            MessageKind::RegRej => 0x10,
            MessageKind::RegRel => 0x11,
            MessageKind::FindCallees => 0x20,
            MessageKind::FindCallee => 0x21,
            MessageKind::ReplyContacts => 0x22,
            MessageKind::ReplyCallee => 0x23,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        MessageKind::ALL.into_iter().find(|k| k.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::New => "NEW",
            MessageKind::Ping => "PING",
            MessageKind::Pong => "PONG",
            MessageKind::Ack => "ACK",
            MessageKind::Hangup => "HANGUP",
            MessageKind::Accept => "ACCEPT",
            MessageKind::Answer => "ANSWER",
            MessageKind::RegReq => "REGREQ",
            MessageKind::RegAuth => "REGAUTH",
            MessageKind::RegAck => "REGACK",
            MessageKind::RegRej => "REGREJ",
            MessageKind::RegRel => "REGREL",
            MessageKind::FindCallees => "FIND_CALLEES",
            MessageKind::FindCallee => "FIND_CALLEE",
            MessageKind::ReplyContacts => "REPLY_CONTACTS",
            MessageKind::ReplyCallee => "REPLY_CALLEE",
        }
    }
}

/// Information element identifiers.
pub mod ie {
    pub const PEER_ID: u8 = 0x01;
    pub const ENDPOINT: u8 = 0x02;
    pub const ADDRESS: u8 = 0x03;
    pub const CONTACT_LIST: u8 = 0x04;
    pub const TARGET_KEY: u8 = 0x05;
    pub const CAUSE: u8 = 0x06;
    pub const FLOOD_ID: u8 = 0x07;
    pub const HOP_COUNT: u8 = 0x08;
    pub const AUTH: u8 = 0x09;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InformationElement {
    pub id: u8,
    pub data: Vec<u8>,
}

impl InformationElement {
    pub fn new(id: u8, data: impl Into<Vec<u8>>) -> Self {
        InformationElement {
            id,
            data: data.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FullFrame {
    pub source_call: u16,
    pub dest_call: u16,
    pub retransmission: bool,
    pub timestamp_ms: u32,
    pub oseqno: u8,
    pub iseqno: u8,
    pub kind: MessageKind,
    pub ies: Vec<InformationElement>,
}

impl FullFrame {
    pub fn new(kind: MessageKind) -> Self {
        FullFrame {
            source_call: 0,
            dest_call: 0,
            retransmission: false,
            timestamp_ms: 0,
            oseqno: 0,
            iseqno: 0,
            kind,
            ies: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiniFrame {
    pub source_call: u16,
    pub timestamp_low: u16,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Full(FullFrame),
    Mini(MiniFrame),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("information element {id:#04x} carries {len} bytes, limit is 255")]
    IeTooLong { id: u8, len: usize },
    #[error("call number {0} exceeds 15 bits")]
    CallNumberOutOfRange(u16),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("truncated header: need {needed} bytes, got {got}")]
    TruncatedHeader { needed: usize, got: usize },
    #[error("unknown frame class {0:#04x}")]
    UnknownFrameClass(u8),
    #[error("unknown message kind {0:#04x}")]
    UnknownKind(u8),
    #[error("information element at offset {offset} overruns the buffer")]
    IeOverrun { offset: usize },
}

fn check_call(n: u16) -> Result<u16, EncodeError> {
    if n > MAX_CALL_NUMBER {
        Err(EncodeError::CallNumberOutOfRange(n))
    } else {
        Ok(n)
    }
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, EncodeError> {
    match frame {
        Frame::Full(f) => {
            let mut out = Vec::with_capacity(
                FULL_HEADER_LEN + f.ies.iter().map(|i| i.data.len() + 2).sum::<usize>(),
            );
            out.extend_from_slice(&(F_BIT | check_call(f.source_call)?).to_be_bytes());
            let r = if f.retransmission { R_BIT } else { 0 };
            out.extend_from_slice(&(r | check_call(f.dest_call)?).to_be_bytes());
            out.extend_from_slice(&f.timestamp_ms.to_be_bytes());
            out.push(f.oseqno);
            out.push(f.iseqno);
            out.push(OVERLAY_CONTROL_CLASS);
            out.push(f.kind.code());
            for e in &f.ies {
                let len = u8::try_from(e.data.len()).map_err(|_| EncodeError::IeTooLong {
                    id: e.id,
                    len: e.data.len(),
                })?;
                out.push(e.id);
                out.push(len);
                out.extend_from_slice(&e.data);
            }
            Ok(out)
        }
        Frame::Mini(m) => {
            let mut out = Vec::with_capacity(MINI_HEADER_LEN + m.payload.len());
            out.extend_from_slice(&check_call(m.source_call)?.to_be_bytes());
            out.extend_from_slice(&m.timestamp_low.to_be_bytes());
            out.extend_from_slice(&m.payload);
            Ok(out)
        }
    }
}

pub fn decode_frame(bytes: &[u8]) -> Result<Frame, DecodeError> {
    if bytes.len() < 2 {
        return Err(DecodeError::TruncatedHeader {
            needed: 2,
            got: bytes.len(),
        });
    }
    let word0 = u16::from_be_bytes([bytes[0], bytes[1]]);
    if word0 & F_BIT == 0 {
        if bytes.len() < MINI_HEADER_LEN {
            return Err(DecodeError::TruncatedHeader {
                needed: MINI_HEADER_LEN,
                got: bytes.len(),
            });
        }
        return Ok(Frame::Mini(MiniFrame {
            source_call: word0,
            timestamp_low: u16::from_be_bytes([bytes[2], bytes[3]]),
            payload: bytes[MINI_HEADER_LEN..].to_vec(),
        }));
    }
    if bytes.len() < FULL_HEADER_LEN {
        return Err(DecodeError::TruncatedHeader {
            needed: FULL_HEADER_LEN,
            got: bytes.len(),
        });
    }
    let word1 = u16::from_be_bytes([bytes[2], bytes[3]]);
    if bytes[10] != OVERLAY_CONTROL_CLASS {
        return Err(DecodeError::UnknownFrameClass(bytes[10]));
    }
    let kind = MessageKind::from_code(bytes[11]).ok_or(DecodeError::UnknownKind(bytes[11]))?;
    let mut ies = Vec::new();
    let mut pos = FULL_HEADER_LEN;
    while pos < bytes.len() {
        if pos + 2 > bytes.len() {
            return Err(DecodeError::IeOverrun { offset: pos });
        }
        let id = bytes[pos];
        let len = bytes[pos + 1] as usize;
        let end = pos + 2 + len;
        if end > bytes.len() {
            return Err(DecodeError::IeOverrun { offset: pos });
        }
        ies.push(InformationElement {
            id,
            data: bytes[pos + 2..end].to_vec(),
        });
        pos = end;
    }
    Ok(Frame::Full(FullFrame {
        source_call: word0 & !F_BIT,
        dest_call: word1 & !R_BIT,
        retransmission: word1 & R_BIT != 0,
        timestamp_ms: u32::from_be_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]),
        oseqno: bytes[8],
        iseqno: bytes[9],
        kind,
        ies,
    }))
}

/// Sets the retransmission flag on an encoded full frame in place.
pub fn mark_retransmission(bytes: &mut [u8]) {
    if bytes.len() >= FULL_HEADER_LEN && bytes[0] & 0x80 != 0 {
        bytes[2] |= 0x80;
    }
}

/// Cheap header peek used by logging and accounting.
pub fn peek_kind(bytes: &[u8]) -> Option<MessageKind> {
    if bytes.len() >= FULL_HEADER_LEN && bytes[0] & 0x80 != 0 {
        MessageKind::from_code(bytes[11])
    } else {
        None
    }
}

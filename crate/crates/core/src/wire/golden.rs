//! Reference frames whose encodings are pinned by stored fixture files.

use std::net::Ipv4Addr;

use super::body::Body;
use super::codec::{Frame, FullFrame, MessageKind, MiniFrame};
use crate::endpoint::Endpoint;
use crate::identity::PeerId;

/// Identifier width used by the fixtures.
pub const GOLDEN_BITS: u32 = 160;

/// `(file name, frame)` pairs. Encodings live in `<name>.bin`.
pub fn fixtures() -> Vec<(&'static str, Frame)> {
    let contacts = Body {
        contacts: vec![(
            PeerId::from_u64(0x0102_0304),
            Endpoint::new(Ipv4Addr::new(10, 0, 0, 7), 4569),
        )],
        ..Default::default()
    };
    vec![
        (
            "regack",
            Frame::Full(FullFrame {
                source_call: 5,
                dest_call: 9,
                iseqno: 1,
                ..FullFrame::new(MessageKind::RegAck)
            }),
        ),
        (
            "regack_contacts",
            Frame::Full(FullFrame {
                source_call: 0x1234,
                dest_call: 0x0042,
                timestamp_ms: 1000,
                oseqno: 3,
                iseqno: 7,
                ies: contacts.to_ies(GOLDEN_BITS).expect("fixture body encodes"),
                ..FullFrame::new(MessageKind::RegAck)
            }),
        ),
        (
            "mini",
            Frame::Mini(MiniFrame {
                source_call: 5,
                timestamp_low: 0x1234,
                payload: b"ab".to_vec(),
            }),
        ),
    ]
}

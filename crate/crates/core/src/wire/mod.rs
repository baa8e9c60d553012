//! Frame taxonomy, codec and delivery rules.
//!
//! Control messages travel in full frames and are delivered reliably; media
//! travels in mini frames and is never acknowledged or retransmitted.

pub mod body;
pub mod calls;
pub mod codec;
pub mod golden;
pub mod reliable;

pub use body::{Body, BodyError};
pub use calls::{CallNumberError, CallNumbers};
pub use codec::{
    decode_frame, encode_frame, ie, peek_kind, DecodeError, EncodeError, Frame, FullFrame,
    InformationElement, MessageKind, MiniFrame,
};
pub use reliable::{DeliveryKey, ReliableEvent, ReliableSender, RetryPolicy};

//! Call setup, media and teardown.

use serde::Serialize;

use super::overlay::Purpose;
use super::{
    CallError, CallStep, EngineError, Notification, OpId, Output, PeerNode, Registration, Token,
};
use crate::endpoint::Endpoint;
use crate::identity::{derive_peer_id, PeerId};
use crate::routing::Contact;
use crate::time::Timestamp;
use crate::wire::{encode_frame, Body, DeliveryKey, Frame, FullFrame, MessageKind, MiniFrame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CallPhase {
    Initiating,
    Ringing,
    Up,
    Hungup,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallState {
    pub local_call: u16,
    pub remote_call: Option<u16>,
    pub peer: Contact,
    pub phase: CallPhase,
    pub outgoing: bool,
    pub media_sent: u64,
    pub media_received: u64,
    op: Option<OpId>,
    /// A HANGUP is in flight; media is refused.
    closing: bool,
    new_key: Option<DeliveryKey>,
}

impl PeerNode {
    /// Resolves `address` and places a call to it.
    pub fn call(&mut self, address: &str, now: Timestamp) -> Result<OpId, EngineError> {
        self.advance(now);
        self.require_registered()?;
        let target = derive_peer_id(address, &self.config.params)?;
        if target == self.peer_id {
            return Err(EngineError::SelfCall);
        }
        let op = OpId(self.alloc_op());
        self.start_resolve(target, address, Purpose::Resolve { op, call: true });
        Ok(op)
    }

    pub(super) fn on_call_resolved(&mut self, op: OpId, found: Option<(PeerId, Endpoint)>) {
        let Some((peer, ep)) = found else {
            self.notify(Notification::CallFailed {
                op,
                error: CallError::NoRoute,
            });
            return;
        };
        let local_call = match self.call_numbers.allocate() {
            Ok(n) => n,
            Err(e) => {
                log::warn!("{} cannot place call: {}", self.endpoint, e);
                self.notify(Notification::CallFailed {
                    op,
                    error: CallError::Unreachable,
                });
                return;
            }
        };
        let mut body = self.own_body();
        body.address = Some(self.address.clone());
        let key = self.send_reliable(
            ep,
            MessageKind::New,
            local_call,
            0,
            &body,
            Token::Call {
                call: local_call,
                step: CallStep::New,
            },
        );
        self.sessions.insert(
            local_call,
            CallState {
                local_call,
                remote_call: None,
                peer: Contact::new(peer, ep, self.now),
                phase: CallPhase::Initiating,
                outgoing: true,
                media_sent: 0,
                media_received: 0,
                op: Some(op),
                closing: false,
                new_key: Some(key),
            },
        );
    }

    pub(super) fn on_new(&mut self, from: Endpoint, f: &FullFrame, body: Body) {
        if self.registration != Registration::Registered {
            return;
        }
        if let Some(&local) = self.by_remote.get(&(from, f.source_call)) {
            // Our ACCEPT was lost; the ANSWER is already on its retry schedule.
            self.respond(from, MessageKind::Accept, local, f, &Body::default());
            return;
        }
        let Some(peer) = body.peer_id else { return };
        if peer != self.peer_id {
            let _ = self.table.observe(peer, from, self.now);
        }
        let local = match self.call_numbers.allocate() {
            Ok(n) => n,
            Err(e) => {
                log::warn!("{} refusing call from {}: {}", self.endpoint, from, e);
                return;
            }
        };
        self.by_remote.insert((from, f.source_call), local);
        self.sessions.insert(
            local,
            CallState {
                local_call: local,
                remote_call: Some(f.source_call),
                peer: Contact::new(peer, from, self.now),
                phase: CallPhase::Ringing,
                outgoing: false,
                media_sent: 0,
                media_received: 0,
                op: None,
                closing: false,
                new_key: None,
            },
        );
        self.respond(from, MessageKind::Accept, local, f, &Body::default());
        self.send_reliable(
            from,
            MessageKind::Answer,
            local,
            f.source_call,
            &Body::default(),
            Token::Call {
                call: local,
                step: CallStep::Answer,
            },
        );
    }

    pub(super) fn on_answer(&mut self, from: Endpoint, f: &FullFrame) {
        let Some(s) = self.sessions.get_mut(&f.dest_call) else {
            return;
        };
        if s.peer.endpoint != from || s.closing {
            return;
        }
        if s.remote_call.is_none() {
            s.remote_call = Some(f.source_call);
            self.by_remote.insert((from, f.source_call), f.dest_call);
        }
        let s = self
            .sessions
            .get_mut(&f.dest_call)
            .expect("session present");
        let newly_up = s.phase != CallPhase::Up;
        s.phase = CallPhase::Up;
        let (local, remote, op, new_key) = (s.local_call, f.source_call, s.op, s.new_key.take());
        if let Some(k) = new_key {
            self.reliable.cancel(&k);
        }
        self.respond(from, MessageKind::Ack, local, f, &Body::default());
        if newly_up {
            self.notify(Notification::CallUp {
                call: local,
                remote_call: remote,
                op,
            });
        }
    }

    pub(super) fn on_call_acked(&mut self, call: u16, step: CallStep, f: &FullFrame) {
        match step {
            CallStep::New => {
                let Some(s) = self.sessions.get_mut(&call) else {
                    return;
                };
                s.new_key = None;
                if s.remote_call.is_none() {
                    s.remote_call = Some(f.source_call);
                    let ep = s.peer.endpoint;
                    self.by_remote.insert((ep, f.source_call), call);
                }
                let s = self.sessions.get_mut(&call).expect("session present");
                if s.phase == CallPhase::Initiating {
                    s.phase = CallPhase::Ringing;
                }
            }
            CallStep::Answer => {
                let Some(s) = self.sessions.get_mut(&call) else {
                    return;
                };
                if s.phase == CallPhase::Ringing {
                    s.phase = CallPhase::Up;
                    let remote = s.remote_call.expect("callee knows the caller's number");
                    self.notify(Notification::CallUp {
                        call,
                        remote_call: remote,
                        op: None,
                    });
                }
            }
            CallStep::Hangup => self.end_call(call),
        }
    }

    pub(super) fn on_call_timeout(&mut self, call: u16, step: CallStep) {
        match step {
            CallStep::New => {
                let op = self.sessions.get(&call).and_then(|s| s.op);
                self.drop_session(call);
                if let Some(op) = op {
                    self.notify(Notification::CallFailed {
                        op,
                        error: CallError::Unreachable,
                    });
                }
            }
            CallStep::Answer | CallStep::Hangup => self.end_call(call),
        }
    }

    fn drop_session(&mut self, call: u16) -> Option<CallState> {
        let s = self.sessions.remove(&call)?;
        self.call_numbers.release(call);
        if let Some(r) = s.remote_call {
            self.by_remote.remove(&(s.peer.endpoint, r));
        }
        Some(s)
    }

    fn end_call(&mut self, call: u16) {
        if let Some(mut s) = self.drop_session(call) {
            s.phase = CallPhase::Hungup;
            s.closing = false;
            self.ended.push(s);
            self.notify(Notification::CallEnded { call });
        }
    }

    /// Sends one media payload as a mini frame.
    pub fn send_media(
        &mut self,
        call: u16,
        payload: &[u8],
        now: Timestamp,
    ) -> Result<(), EngineError> {
        self.advance(now);
        let s = self
            .sessions
            .get_mut(&call)
            .ok_or(EngineError::CallNotUp(call))?;
        if s.phase != CallPhase::Up || s.closing {
            return Err(EngineError::CallNotUp(call));
        }
        s.media_sent += 1;
        let to = s.peer.endpoint;
        let frame = MiniFrame {
            source_call: call,
            timestamp_low: self.now.0 as u16,
            payload: payload.to_vec(),
        };
        let bytes = encode_frame(&Frame::Mini(frame)).expect("call numbers are 15-bit");
        *self.stats.sent.entry("MINI".into()).or_default() += 1;
        self.outbox.push(Output::Transmit { to, bytes });
        Ok(())
    }

    pub(super) fn on_media(&mut self, from: Endpoint, m: MiniFrame) {
        let Some(&local) = self.by_remote.get(&(from, m.source_call)) else {
            return;
        };
        let Some(s) = self.sessions.get_mut(&local) else {
            return;
        };
        if !matches!(s.phase, CallPhase::Ringing | CallPhase::Up) {
            return;
        }
        s.media_received += 1;
        self.notify(Notification::MediaReceived {
            call: local,
            len: m.payload.len(),
        });
    }

    /// Tears a call down with a reliable HANGUP.
    pub fn hangup(&mut self, call: u16, now: Timestamp) -> Result<(), EngineError> {
        self.advance(now);
        let s = self
            .sessions
            .get_mut(&call)
            .ok_or(EngineError::UnknownCall(call))?;
        if s.closing {
            return Ok(());
        }
        s.closing = true;
        let (to, remote, new_key) = (
            s.peer.endpoint,
            s.remote_call.unwrap_or(0),
            s.new_key.take(),
        );
        if let Some(k) = new_key {
            self.reliable.cancel(&k);
        }
        self.send_reliable(
            to,
            MessageKind::Hangup,
            call,
            remote,
            &Body::default(),
            Token::Call {
                call,
                step: CallStep::Hangup,
            },
        );
        Ok(())
    }

    pub(super) fn on_hangup(&mut self, from: Endpoint, f: &FullFrame) {
        self.respond(from, MessageKind::Ack, f.dest_call, f, &Body::default());
        let matches = self
            .sessions
            .get(&f.dest_call)
            .is_some_and(|s| s.peer.endpoint == from);
        if matches {
            if let Some(s) = self.sessions.get(&f.dest_call) {
                if s.closing {
                    // Both sides hung up at once; our own HANGUP settles it.
                    return;
                }
            }
            self.end_call(f.dest_call);
        }
    }
}

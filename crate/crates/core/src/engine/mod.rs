//! Per-node protocol state machine.
//!
//! `PeerNode` is sans-IO: every entry point takes the current time, mutates
//! local state and queues outputs (frames to transmit, notifications for the
//! host). The host drains them with [`PeerNode::take_outputs`] and calls
//! [`PeerNode::tick`] no later than [`PeerNode::next_deadline`].

mod lookup;
mod overlay;
mod session;

use std::collections::BTreeMap;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

pub use lookup::{LookupMode, LookupState};
pub use session::{CallPhase, CallState};

use crate::endpoint::Endpoint;
use crate::identity::{derive_peer_id, normalize_address, IdentityError, KademliaParams, PeerId};
use crate::routing::RoutingTable;
use crate::time::Timestamp;
use crate::wire::{
    decode_frame, encode_frame, Body, CallNumberError, CallNumbers, DeliveryKey, Frame, FullFrame,
    MessageKind, ReliableEvent, ReliableSender, RetryPolicy,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("node is not registered")]
    NotRegistered,
    #[error("node has already joined")]
    AlreadyJoined,
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    CallNumbers(#[from] CallNumberError),
    #[error("no such call {0}")]
    UnknownCall(u16),
    #[error("call {0} is not up")]
    CallNotUp(u16),
    #[error("a node cannot call its own address")]
    SelfCall,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub params: KademliaParams,
    pub retry: RetryPolicy,
    /// How long a lookup waits for one round before dropping silent peers.
    pub round_timeout: Duration,
    pub purge_interval: Duration,
    pub flood_retention: Duration,
    /// REGREL copies are not forwarded once they have travelled this far.
    pub regrel_hop_limit: u8,
    /// Shared secret echoed in REGREQ when registration requires it.
    pub auth_secret: Option<String>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            params: KademliaParams::default(),
            retry: RetryPolicy::default(),
            round_timeout: Duration::from_secs(2),
            purge_interval: Duration::from_secs(60),
            flood_retention: Duration::from_secs(600),
            regrel_hop_limit: 3,
            auth_secret: None,
        }
    }
}

/// Handle for a locally issued lookup, resolution or call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct OpId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Registration {
    Unregistered,
    Registering,
    Registered,
    Releasing,
    Released,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CallError {
    /// The callee could not be resolved.
    NoRoute,
    /// The callee was resolved but never accepted.
    Unreachable,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Notification {
    Joined,
    JoinFailed {
        cause: String,
    },
    LookupDone {
        op: OpId,
        target: PeerId,
        contacts: Vec<(PeerId, Endpoint)>,
        rounds: u32,
        queries: u32,
    },
    Resolved {
        op: OpId,
        contact: Option<(PeerId, Endpoint)>,
        rounds: u32,
    },
    CallUp {
        call: u16,
        remote_call: u16,
        op: Option<OpId>,
    },
    CallFailed {
        op: OpId,
        error: CallError,
    },
    CallEnded {
        call: u16,
    },
    MediaReceived {
        call: u16,
        len: usize,
    },
    Released {
        unacknowledged: usize,
    },
    Purged {
        removed: Vec<PeerId>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Output {
    Transmit { to: Endpoint, bytes: Vec<u8> },
    Notify(Notification),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct NodeStats {
    /// First transmissions by message kind; mini frames count as "MINI".
    pub sent: BTreeMap<String, u64>,
    pub received: BTreeMap<String, u64>,
    pub retransmissions: u64,
    pub timeouts: u64,
    pub malformed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum CallStep {
    New,
    Answer,
    Hangup,
}

/// What a reliable delivery was for; consulted on response and timeout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Token {
    Query { lookup: u64, peer: PeerId },
    Verify { lookup: u64 },
    Forward,
    ReleaseNotice,
    Call { call: u16, step: CallStep },
}

pub struct PeerNode {
    config: EngineConfig,
    peer_id: PeerId,
    address: String,
    endpoint: Endpoint,
    table: RoutingTable,
    registration: Registration,
    rng: ChaCha8Rng,
    now: Timestamp,
    outbox: Vec<Output>,
    stats: NodeStats,
    reliable: ReliableSender<Token>,
    seqnos: BTreeMap<(Endpoint, u16), u8>,
    next_op: u64,
    lookups: BTreeMap<u64, overlay::ActiveLookup>,
    seen_floods: BTreeMap<u64, Timestamp>,
    next_purge: Option<Timestamp>,
    join: Option<overlay::JoinProgress>,
    release_pending: usize,
    release_unacked: usize,
    call_numbers: CallNumbers,
    sessions: BTreeMap<u16, CallState>,
    by_remote: BTreeMap<(Endpoint, u16), u16>,
    ended: Vec<CallState>,
}

impl PeerNode {
    /// A node whose identifier is derived from its address.
    pub fn new(
        address: &str,
        endpoint: Endpoint,
        config: EngineConfig,
        seed: u64,
    ) -> Result<Self, EngineError> {
        config.params.validate()?;
        let peer_id = derive_peer_id(address, &config.params)?;
        Ok(Self::build(
            peer_id,
            normalize_address(address)?,
            endpoint,
            config,
            seed,
        ))
    }

    /// A node with an explicit identifier, for address-less peers.
    pub fn with_id(
        peer_id: PeerId,
        address: &str,
        endpoint: Endpoint,
        config: EngineConfig,
        seed: u64,
    ) -> Result<Self, EngineError> {
        config.params.validate()?;
        if !peer_id.fits(config.params.bits) {
            return Err(IdentityError::OutOfRange {
                bits: config.params.bits,
            }
            .into());
        }
        Ok(Self::build(
            peer_id,
            normalize_address(address)?,
            endpoint,
            config,
            seed,
        ))
    }

    fn build(
        peer_id: PeerId,
        address: String,
        endpoint: Endpoint,
        config: EngineConfig,
        seed: u64,
    ) -> Self {
        PeerNode {
            table: RoutingTable::new(peer_id, config.params),
            reliable: ReliableSender::new(config.retry),
            config,
            peer_id,
            address,
            endpoint,
            registration: Registration::Unregistered,
            rng: ChaCha8Rng::seed_from_u64(seed),
            now: Timestamp::ZERO,
            outbox: Vec::new(),
            stats: NodeStats::default(),
            seqnos: BTreeMap::new(),
            next_op: 1,
            lookups: BTreeMap::new(),
            seen_floods: BTreeMap::new(),
            next_purge: None,
            join: None,
            release_pending: 0,
            release_unacked: 0,
            call_numbers: CallNumbers::new(),
            sessions: BTreeMap::new(),
            by_remote: BTreeMap::new(),
            ended: Vec::new(),
        }
    }

    pub fn peer_id(&self) -> PeerId {
        self.peer_id
    }

    pub fn address(&self) -> &str {
        &self.address
    }

    pub fn endpoint(&self) -> Endpoint {
        self.endpoint
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn registration(&self) -> Registration {
        self.registration
    }

    pub fn table(&self) -> &RoutingTable {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut RoutingTable {
        &mut self.table
    }

    pub fn stats(&self) -> &NodeStats {
        &self.stats
    }

    pub fn dump_table(&self) -> String {
        self.table.dump()
    }

    pub fn session(&self, call: u16) -> Option<&CallState> {
        self.sessions.get(&call)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &CallState> {
        self.sessions.values()
    }

    /// Calls that have been torn down, oldest first.
    pub fn ended_calls(&self) -> &[CallState] {
        &self.ended
    }

    pub fn take_outputs(&mut self) -> Vec<Output> {
        std::mem::take(&mut self.outbox)
    }

    /// True when nothing is outstanding apart from the periodic sweep.
    pub fn is_idle(&self) -> bool {
        self.reliable.is_empty()
            && self.lookups.is_empty()
            && !matches!(
                self.registration,
                Registration::Registering | Registration::Releasing
            )
    }

    pub fn next_deadline(&self) -> Option<Timestamp> {
        let lookups = self.lookups.values().filter_map(|l| l.deadline).min();
        [self.reliable.next_deadline(), lookups, self.next_purge]
            .into_iter()
            .flatten()
            .min()
    }

    fn advance(&mut self, now: Timestamp) {
        if now > self.now {
            self.now = now;
        }
    }

    fn alloc_op(&mut self) -> u64 {
        let id = self.next_op;
        self.next_op += 1;
        id
    }

    fn notify(&mut self, n: Notification) {
        log::debug!("{} {:?}", self.endpoint, n);
        self.outbox.push(Output::Notify(n));
    }

    fn next_seqno(&mut self, peer: Endpoint, call: u16) -> u8 {
        let slot = self.seqnos.entry((peer, call)).or_insert(0);
        let s = *slot;
        *slot = slot.wrapping_add(1);
        s
    }

    fn transmit(&mut self, to: Endpoint, bytes: Vec<u8>, label: &str) {
        *self.stats.sent.entry(label.to_string()).or_default() += 1;
        log::trace!(
            "{} t={} send {} -> {} ({} bytes)",
            self.endpoint,
            self.now,
            label,
            to,
            bytes.len()
        );
        self.outbox.push(Output::Transmit { to, bytes });
    }

    fn encode_full(
        &mut self,
        to: Endpoint,
        kind: MessageKind,
        source_call: u16,
        dest_call: u16,
        iseqno: u8,
        body: &Body,
    ) -> (Vec<u8>, u8) {
        let oseqno = self.next_seqno(to, source_call);
        let frame = FullFrame {
            source_call,
            dest_call,
            retransmission: false,
            timestamp_ms: self.now.0 as u32,
            oseqno,
            iseqno,
            kind,
            ies: body
                .to_ies(self.config.params.bits)
                .expect("bodies built by the engine fit their elements"),
        };
        (
            encode_frame(&Frame::Full(frame)).expect("call numbers are 15-bit"),
            oseqno,
        )
    }

    /// Sends a control frame that is retransmitted until answered.
    fn send_reliable(
        &mut self,
        to: Endpoint,
        kind: MessageKind,
        source_call: u16,
        dest_call: u16,
        body: &Body,
        token: Token,
    ) -> DeliveryKey {
        let (bytes, seqno) = self.encode_full(to, kind, source_call, dest_call, 0, body);
        let key = DeliveryKey {
            peer: to,
            call: source_call,
            seqno,
        };
        self.reliable.track(key, bytes.clone(), token, self.now);
        self.transmit(to, bytes, kind.name());
        key
    }

    /// Sends an unacknowledged frame answering `request`.
    fn respond(
        &mut self,
        to: Endpoint,
        kind: MessageKind,
        source_call: u16,
        request: &FullFrame,
        body: &Body,
    ) {
        let (bytes, _) = self.encode_full(
            to,
            kind,
            source_call,
            request.source_call,
            request.oseqno,
            body,
        );
        self.transmit(to, bytes, kind.name());
    }

    /// Sends an unacknowledged frame that answers nothing in particular.
    fn send_plain(
        &mut self,
        to: Endpoint,
        kind: MessageKind,
        source_call: u16,
        dest_call: u16,
        body: &Body,
    ) {
        let (bytes, _) = self.encode_full(to, kind, source_call, dest_call, 0, body);
        self.transmit(to, bytes, kind.name());
    }

    fn own_body(&self) -> Body {
        Body {
            peer_id: Some(self.peer_id),
            endpoint: Some(self.endpoint),
            ..Default::default()
        }
    }

    /// Feeds one datagram into the node.
    pub fn receive(&mut self, from: Endpoint, bytes: &[u8], now: Timestamp) {
        self.advance(now);
        let frame = match decode_frame(bytes) {
            Ok(f) => f,
            Err(e) => {
                log::debug!(
                    "{} dropping malformed frame from {}: {}",
                    self.endpoint,
                    from,
                    e
                );
                self.stats.malformed += 1;
                return;
            }
        };
        let f = match frame {
            Frame::Mini(m) => {
                *self.stats.received.entry("MINI".into()).or_default() += 1;
                self.on_media(from, m);
                return;
            }
            Frame::Full(f) => f,
        };
        *self.stats.received.entry(f.kind.name().into()).or_default() += 1;
        log::trace!(
            "{} t={} recv {} <- {}",
            self.endpoint,
            self.now,
            f.kind.name(),
            from
        );
        let body = match Body::from_ies(&f.ies, self.config.params.bits) {
            Ok(b) => b,
            Err(e) => {
                log::debug!(
                    "{} dropping {} from {}: {}",
                    self.endpoint,
                    f.kind.name(),
                    from,
                    e
                );
                self.stats.malformed += 1;
                return;
            }
        };

        match self.registration {
            Registration::Released => {
                if f.kind == MessageKind::RegRel {
                    self.respond(from, MessageKind::RegAck, 0, &f, &Body::default());
                }
                return;
            }
            Registration::Releasing if is_request(f.kind) => {
                if f.kind == MessageKind::RegRel {
                    self.respond(from, MessageKind::RegAck, 0, &f, &Body::default());
                }
                return;
            }
            Registration::Unregistered if is_request(f.kind) && f.kind != MessageKind::RegRel => {
                return
            }
            _ => {}
        }

        match f.kind {
            MessageKind::RegReq => self.on_regreq(from, &f, body),
            MessageKind::RegRel => self.on_regrel(from, &f, body),
            MessageKind::FindCallees | MessageKind::FindCallee | MessageKind::Ping => {
                self.on_query(from, &f, body)
            }
            MessageKind::New => self.on_new(from, &f, body),
            MessageKind::Answer => self.on_answer(from, &f),
            MessageKind::Hangup => self.on_hangup(from, &f),
            MessageKind::Ack => {
                let key = DeliveryKey {
                    peer: from,
                    call: f.dest_call,
                    seqno: f.iseqno,
                };
                if let Some(token) = self.reliable.acknowledge(&key) {
                    self.on_acked(token, from, &f, body);
                }
            }
            _ => {
                let key = DeliveryKey {
                    peer: from,
                    call: f.dest_call,
                    seqno: f.iseqno,
                };
                let matches = self
                    .reliable
                    .token(&key)
                    .is_some_and(|t| self.answers(t, f.kind));
                if matches {
                    let token = self.reliable.acknowledge(&key).expect("token present");
                    self.on_acked(token, from, &f, body);
                } else if f.kind == MessageKind::RegAck && body.flood_id.is_some() {
                    self.on_unsolicited_regack(from, body);
                }
            }
        }
    }

    /// Whether a frame of `kind` is a valid answer to the delivery `token`.
    fn answers(&self, token: &Token, kind: MessageKind) -> bool {
        use MessageKind as K;
        match token {
            Token::Query { lookup, .. } => match self.lookups.get(lookup).map(|l| &l.state.mode) {
                Some(LookupMode::Register) => matches!(kind, K::RegAck | K::RegRej | K::RegAuth),
                Some(LookupMode::Callees) => kind == K::ReplyContacts,
                Some(LookupMode::Callee { .. }) => {
                    matches!(kind, K::ReplyContacts | K::ReplyCallee)
                }
                Some(LookupMode::Probe) => kind == K::Pong,
                None => true,
            },
            Token::Verify { .. } => kind == K::Pong,
            Token::Forward => kind == K::RegAck,
            Token::ReleaseNotice => kind == K::RegAck,
            Token::Call {
                step: CallStep::New,
                ..
            } => kind == K::Accept,
            Token::Call { .. } => false,
        }
    }

    /// A tracked delivery was answered by an ACK or a response frame.
    fn on_acked(&mut self, token: Token, from: Endpoint, f: &FullFrame, body: Body) {
        match token {
            Token::Query { lookup, peer } => self.on_query_reply(lookup, peer, from, f, body),
            Token::Verify { lookup } => self.on_verify_reply(lookup, from, body),
            Token::Forward => {}
            Token::ReleaseNotice => self.on_release_progress(false),
            Token::Call { call, step } => self.on_call_acked(call, step, f),
        }
    }

    fn on_timeout(&mut self, key: DeliveryKey, token: Token) {
        self.stats.timeouts += 1;
        log::debug!(
            "{} delivery to {} timed out ({:?})",
            self.endpoint,
            key.peer,
            token
        );
        match token {
            Token::Query { lookup, peer } => self.on_query_failed(lookup, peer),
            Token::Verify { lookup } => self.on_verify_failed(lookup),
            Token::Forward => {}
            Token::ReleaseNotice => self.on_release_progress(true),
            Token::Call { call, step } => self.on_call_timeout(call, step),
        }
    }

    /// Fires every timer due at or before `now`.
    pub fn tick(&mut self, now: Timestamp) {
        self.advance(now);
        for ev in self.reliable.poll(now) {
            match ev {
                ReliableEvent::Retransmit { to, bytes } => {
                    self.stats.retransmissions += 1;
                    log::trace!("{} t={} resend -> {}", self.endpoint, now, to);
                    self.outbox.push(Output::Transmit { to, bytes });
                }
                ReliableEvent::TimedOut { key, token } => self.on_timeout(key, token),
            }
        }
        self.expire_rounds(now);
        if let Some(at) = self.next_purge {
            if at <= now {
                let removed = self.table.purge_expired(now);
                let retention = self.config.flood_retention;
                self.seen_floods
                    .retain(|_, seen| now.since(*seen) <= retention);
                let mut next = at;
                while next <= now {
                    next = next + self.config.purge_interval;
                }
                self.next_purge = Some(next);
                if !removed.is_empty() {
                    self.notify(Notification::Purged { removed });
                }
            }
        }
    }
}

fn is_request(kind: MessageKind) -> bool {
    use MessageKind as K;
    matches!(
        kind,
        K::RegReq
            | K::RegRel
            | K::FindCallees
            | K::FindCallee
            | K::Ping
            | K::New
            | K::Answer
            | K::Hangup
    )
}

#[cfg(test)]
mod tests;

//! Registration, iterative lookups, query handling and release.

use rand::Rng;

use super::lookup::{LookupMode, LookupState};
use super::{EngineError, Notification, OpId, PeerNode, Registration, Token};
use crate::endpoint::Endpoint;
use crate::identity::{derive_peer_id, xor_distance, PeerId};
use crate::time::Timestamp;
use crate::wire::{Body, DeliveryKey, FullFrame, MessageKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum Purpose {
    Find(OpId),
    Resolve { op: OpId, call: bool },
    Register,
    Probe,
}

#[derive(Debug, Clone)]
pub(super) struct ActiveLookup {
    pub state: LookupState,
    pub purpose: Purpose,
    /// Round deadline; registration rounds rely on the retry schedule instead.
    pub deadline: Option<Timestamp>,
    /// Set once a peer reported the callee; the lookup then waits on a PING.
    pub verifying: Option<(PeerId, Endpoint, DeliveryKey)>,
}

#[derive(Debug, Clone)]
pub(super) struct JoinProgress {
    first_contact: PeerId,
    flood_id: u64,
    rejections: usize,
}

impl PeerNode {
    /// Starts registration. Without a first contact the node is the
    /// bootstrap peer and registers at once.
    pub fn join(
        &mut self,
        first_contact: Option<(PeerId, Endpoint)>,
        now: Timestamp,
    ) -> Result<(), EngineError> {
        self.advance(now);
        if self.registration != Registration::Unregistered {
            return Err(EngineError::AlreadyJoined);
        }
        let Some((id, ep)) = first_contact else {
            self.complete_join();
            return Ok(());
        };
        if id == self.peer_id {
            return Err(EngineError::AlreadyJoined);
        }
        self.table
            .observe(id, ep, self.now)
            .expect("first contact is not the local node");
        self.registration = Registration::Registering;
        let flood_id = self.rng.gen();
        self.seen_floods.insert(flood_id, self.now);
        self.join = Some(JoinProgress {
            first_contact: id,
            flood_id,
            rejections: 0,
        });
        self.start_lookup(self.peer_id, LookupMode::Register, Purpose::Register);
        Ok(())
    }

    fn complete_join(&mut self) {
        self.join = None;
        self.registration = Registration::Registered;
        self.next_purge = Some(self.now + self.config.purge_interval);
        self.notify(Notification::Joined);
    }

    pub(super) fn require_registered(&self) -> Result<(), EngineError> {
        if self.registration == Registration::Registered {
            Ok(())
        } else {
            Err(EngineError::NotRegistered)
        }
    }

    /// Iterative search for the k live peers closest to `target`.
    pub fn lookup(&mut self, target: PeerId, now: Timestamp) -> Result<OpId, EngineError> {
        self.advance(now);
        self.require_registered()?;
        let op = OpId(self.alloc_op());
        self.start_lookup(target, LookupMode::Callees, Purpose::Find(op));
        Ok(op)
    }

    /// Self-lookup that tops up the neighbourhood of the local identifier.
    pub fn refresh(&mut self, now: Timestamp) -> Result<OpId, EngineError> {
        self.lookup(self.peer_id, now)
    }

    /// Finds the live contact record for `address`.
    pub fn resolve(&mut self, address: &str, now: Timestamp) -> Result<OpId, EngineError> {
        self.advance(now);
        self.require_registered()?;
        let target = derive_peer_id(address, &self.config.params)?;
        let op = OpId(self.alloc_op());
        self.start_resolve(target, address, Purpose::Resolve { op, call: false });
        Ok(op)
    }

    pub(super) fn start_resolve(&mut self, target: PeerId, address: &str, purpose: Purpose) {
        if target == self.peer_id {
            let me = (self.peer_id, self.endpoint);
            let id = self.alloc_op();
            let state = LookupState::new(
                target,
                LookupMode::Callee {
                    address: address.into(),
                },
                0,
                0,
                Vec::new(),
            );
            self.lookups.insert(
                id,
                ActiveLookup {
                    state,
                    purpose,
                    deadline: None,
                    verifying: None,
                },
            );
            self.finish_lookup(id, Some(me));
            return;
        }
        let known = self
            .table
            .get(&target)
            .filter(|c| c.is_online())
            .map(|c| c.endpoint);
        let id = self.start_lookup(
            target,
            LookupMode::Callee {
                address: address.into(),
            },
            purpose,
        );
        if let Some(ep) = known {
            if self.lookups.contains_key(&id) {
                self.begin_verify(id, target, ep);
            }
        }
    }

    fn start_lookup(&mut self, target: PeerId, mode: LookupMode, purpose: Purpose) -> u64 {
        let p = self.config.params;
        let seed = self
            .table
            .closest_contacts(&target, p.alpha, false)
            .into_iter()
            .map(|c| (c.peer_id, c.endpoint))
            .collect();
        let id = self.alloc_op();
        let state = LookupState::new(target, mode, p.k, p.alpha, seed);
        self.lookups.insert(
            id,
            ActiveLookup {
                state,
                purpose,
                deadline: None,
                verifying: None,
            },
        );
        // A resolve that already knows the callee skips straight to the PING.
        let skip = matches!(purpose, Purpose::Resolve { .. })
            && self.table.get(&target).is_some_and(|c| c.is_online());
        if !skip {
            self.drive(id);
        }
        id
    }

    /// Starts the next round if the current one has drained.
    fn drive(&mut self, id: u64) {
        let now = self.now;
        let round_timeout = self.config.round_timeout;
        let Some(l) = self.lookups.get_mut(&id) else {
            return;
        };
        if l.verifying.is_some() || !l.state.round_drained() {
            return;
        }
        let Some(batch) = l.state.next_batch() else {
            self.finish_lookup(id, None);
            return;
        };
        let mode = l.state.mode.clone();
        let target = l.state.target;
        l.deadline = (mode != LookupMode::Register).then(|| now + round_timeout);
        for (peer, ep) in batch {
            let key = self.send_query(id, &mode, target, peer, ep);
            if let Some(l) = self.lookups.get_mut(&id) {
                l.state.inflight.insert(peer, Some(key));
            }
        }
    }

    fn send_query(
        &mut self,
        id: u64,
        mode: &LookupMode,
        target: PeerId,
        peer: PeerId,
        ep: Endpoint,
    ) -> DeliveryKey {
        let token = Token::Query { lookup: id, peer };
        let mut body = self.own_body();
        let kind = match mode {
            LookupMode::Callees => {
                body.target = Some(target);
                MessageKind::FindCallees
            }
            LookupMode::Callee { address } => {
                body.target = Some(target);
                body.address = Some(address.clone());
                MessageKind::FindCallee
            }
            LookupMode::Probe => {
                body.target = Some(target);
                MessageKind::Ping
            }
            LookupMode::Register => return self.send_regreq(ep, id, peer, false),
        };
        self.send_reliable(ep, kind, 0, 0, &body, token)
    }

    fn send_regreq(
        &mut self,
        ep: Endpoint,
        lookup: u64,
        peer: PeerId,
        with_auth: bool,
    ) -> DeliveryKey {
        let mut body = self.own_body();
        body.address = Some(self.address.clone());
        body.flood_id = self.join.as_ref().map(|j| j.flood_id);
        if with_auth {
            body.auth = self.config.auth_secret.clone();
        }
        self.send_reliable(
            ep,
            MessageKind::RegReq,
            0,
            0,
            &body,
            Token::Query { lookup, peer },
        )
    }

    /// Drops silent peers from lookups whose round deadline has passed.
    pub(super) fn expire_rounds(&mut self, now: Timestamp) {
        let due: Vec<u64> = self
            .lookups
            .iter()
            .filter(|(_, l)| l.verifying.is_none() && l.deadline.is_some_and(|d| d <= now))
            .map(|(id, _)| *id)
            .collect();
        for id in due {
            let l = self.lookups.get_mut(&id).expect("due lookup present");
            l.deadline = None;
            let silent: Vec<PeerId> = l.state.inflight.keys().copied().collect();
            let mut keys = Vec::new();
            for p in silent {
                keys.extend(l.state.on_failure(p));
            }
            for k in keys {
                self.reliable.cancel(&k);
            }
            self.drive(id);
        }
    }

    pub(super) fn on_query_reply(
        &mut self,
        id: u64,
        peer: PeerId,
        from: Endpoint,
        f: &FullFrame,
        body: Body,
    ) {
        let Some(l) = self.lookups.get(&id) else {
            return;
        };
        let mode = l.state.mode.clone();
        let target = l.state.target;
        match f.kind {
            MessageKind::RegRej => {
                log::debug!(
                    "{} registration rejected by {}: {:?}",
                    self.endpoint,
                    from,
                    body.cause
                );
                if let Some(j) = self.join.as_mut() {
                    j.rejections += 1;
                }
                if let Some(l) = self.lookups.get_mut(&id) {
                    l.state.on_failure(peer);
                }
                self.drive(id);
                return;
            }
            MessageKind::RegAuth => {
                if self.config.auth_secret.is_some() {
                    let key = self.send_regreq(from, id, peer, true);
                    if let Some(l) = self.lookups.get_mut(&id) {
                        l.state.inflight.insert(peer, Some(key));
                    }
                } else {
                    if let Some(l) = self.lookups.get_mut(&id) {
                        l.state.on_failure(peer);
                    }
                    self.drive(id);
                }
                return;
            }
            _ => {}
        }
        let _ = self.table.observe(peer, from, self.now);
        if mode == LookupMode::Probe {
            // Registration ends with an ACK to every peer that PONGed.
            self.respond(from, MessageKind::Ack, 0, f, &Body::default());
        }
        if f.kind == MessageKind::ReplyCallee {
            match body.contacts.first().copied() {
                Some((t, _)) if t == peer && t == target => {
                    if let Some(l) = self.lookups.get_mut(&id) {
                        l.state.on_response(peer, Vec::new(), self.peer_id);
                    }
                    self.finish_lookup(id, Some((peer, from)));
                }
                Some((t, ep)) if t == target => {
                    if let Some(l) = self.lookups.get_mut(&id) {
                        l.state.on_response(peer, Vec::new(), self.peer_id);
                    }
                    self.begin_verify(id, t, ep);
                }
                _ => {
                    if let Some(l) = self.lookups.get_mut(&id) {
                        l.state.on_failure(peer);
                    }
                    self.drive(id);
                }
            }
            return;
        }
        let me = self.peer_id;
        if let Some(l) = self.lookups.get_mut(&id) {
            l.state.on_response(peer, body.contacts, me);
        }
        self.drive(id);
    }

    pub(super) fn on_query_failed(&mut self, id: u64, peer: PeerId) {
        if let Some(l) = self.lookups.get_mut(&id) {
            l.state.on_failure(peer);
            self.drive(id);
        }
    }

    /// Stops the search and confirms the reported callee is live.
    fn begin_verify(&mut self, id: u64, target: PeerId, ep: Endpoint) {
        let Some(l) = self.lookups.get_mut(&id) else {
            return;
        };
        let pending = l.state.drain_inflight();
        l.deadline = None;
        for k in pending {
            self.reliable.cancel(&k);
        }
        let body = self.own_body();
        let key = self.send_reliable(
            ep,
            MessageKind::Ping,
            0,
            0,
            &body,
            Token::Verify { lookup: id },
        );
        if let Some(l) = self.lookups.get_mut(&id) {
            l.verifying = Some((target, ep, key));
        }
    }

    pub(super) fn on_verify_reply(&mut self, id: u64, from: Endpoint, body: Body) {
        let Some((target, _, _)) = self.lookups.get(&id).and_then(|l| l.verifying) else {
            return;
        };
        if body.peer_id != Some(target) {
            self.on_verify_failed(id);
            return;
        }
        let _ = self.table.observe(target, from, self.now);
        self.finish_lookup(id, Some((target, from)));
    }

    pub(super) fn on_verify_failed(&mut self, id: u64) {
        let Some((target, _, _)) = self.lookups.get(&id).and_then(|l| l.verifying) else {
            return;
        };
        self.table.mark_offline(&target, self.now);
        self.finish_lookup(id, None);
    }

    fn finish_lookup(&mut self, id: u64, found: Option<(PeerId, Endpoint)>) {
        let Some(mut l) = self.lookups.remove(&id) else {
            return;
        };
        for k in l.state.drain_inflight() {
            self.reliable.cancel(&k);
        }
        if let Some((_, _, key)) = l.verifying {
            self.reliable.cancel(&key);
        }
        let rounds = l.state.rounds;
        match l.purpose {
            Purpose::Find(op) => self.notify(Notification::LookupDone {
                op,
                target: l.state.target,
                contacts: l.state.results(),
                rounds,
                queries: l.state.queries,
            }),
            Purpose::Resolve { op, call: false } => self.notify(Notification::Resolved {
                op,
                contact: found,
                rounds,
            }),
            Purpose::Resolve { op, call: true } => self.on_call_resolved(op, found),
            Purpose::Register => self.on_register_done(l.state.responded_count()),
            Purpose::Probe => {
                if self.registration == Registration::Registering
                    && !self.lookups.values().any(|l| l.purpose == Purpose::Probe)
                {
                    self.complete_join();
                }
            }
        }
    }

    fn on_register_done(&mut self, accepted: usize) {
        let Some(j) = self.join.clone() else { return };
        if accepted == 0 {
            let cause = if j.rejections > 0 {
                "rejected"
            } else {
                "no answer"
            };
            self.registration = Registration::Unregistered;
            self.join = None;
            self.notify(Notification::JoinFailed {
                cause: cause.into(),
            });
            return;
        }
        let targets = self
            .table
            .refresh_targets(&j.first_contact, &mut self.rng)
            .expect("first contact is not the local node");
        if targets.is_empty() {
            self.complete_join();
            return;
        }
        for t in targets {
            self.start_lookup(t, LookupMode::Probe, Purpose::Probe);
        }
    }

    pub(super) fn on_unsolicited_regack(&mut self, from: Endpoint, body: Body) {
        let Some(j) = &self.join else { return };
        if body.flood_id != Some(j.flood_id) {
            return;
        }
        let Some(peer) = body.peer_id else { return };
        if peer == self.peer_id {
            return;
        }
        let _ = self.table.observe(peer, from, self.now);
        let me = self.peer_id;
        let id = self
            .lookups
            .iter()
            .find(|(_, l)| l.purpose == Purpose::Register)
            .map(|(id, _)| *id);
        if let Some(id) = id {
            let l = self.lookups.get_mut(&id).expect("register lookup present");
            l.state.on_unsolicited(peer, from, body.contacts, me);
        }
    }

    fn contacts_for(&self, target: &PeerId, exclude: Option<PeerId>) -> Vec<(PeerId, Endpoint)> {
        let k = self.config.params.k;
        self.table
            .closest_contacts(target, k + 1, false)
            .into_iter()
            .filter(|c| Some(c.peer_id) != exclude)
            .take(k)
            .map(|c| (c.peer_id, c.endpoint))
            .collect()
    }

    pub(super) fn on_regreq(&mut self, from: Endpoint, f: &FullFrame, body: Body) {
        let (Some(joiner), Some(joiner_ep)) = (body.peer_id, body.endpoint) else {
            return;
        };
        if joiner == self.peer_id {
            return;
        }
        let direct = from == joiner_ep;
        let reject = |node: &mut PeerNode, cause: &str| {
            if direct {
                let b = Body {
                    peer_id: Some(node.peer_id),
                    cause: Some(cause.into()),
                    ..Default::default()
                };
                node.respond(from, MessageKind::RegRej, 0, f, &b);
            } else {
                node.respond(from, MessageKind::Ack, 0, f, &Body::default());
            }
        };
        if let Some(addr) = &body.address {
            if derive_peer_id(addr, &self.config.params).ok() != Some(joiner) {
                reject(self, "identity mismatch");
                return;
            }
        }
        if direct {
            if let Some(secret) = self.config.auth_secret.clone() {
                match &body.auth {
                    None => {
                        let b = Body {
                            peer_id: Some(self.peer_id),
                            ..Default::default()
                        };
                        self.respond(from, MessageKind::RegAuth, 0, f, &b);
                        return;
                    }
                    Some(a) if *a != secret => {
                        reject(self, "authentication failed");
                        return;
                    }
                    Some(_) => {}
                }
            }
        }

        let _ = self.table.observe(joiner, joiner_ep, self.now);
        let first_sighting = match body.flood_id {
            Some(fid) => self.seen_floods.insert(fid, self.now).is_none(),
            None => true,
        };
        let mut reply = Body {
            peer_id: Some(self.peer_id),
            contacts: self.contacts_for(&joiner, Some(joiner)),
            ..Default::default()
        };
        if direct {
            self.respond(from, MessageKind::RegAck, 0, f, &reply);
        } else {
            self.respond(from, MessageKind::Ack, 0, f, &Body::default());
            if first_sighting {
                reply.flood_id = body.flood_id;
                self.send_plain(joiner_ep, MessageKind::RegAck, 0, 0, &reply);
            }
        }
        if !first_sighting {
            return;
        }

        // Pass the request on toward the joiner's key.
        let own = xor_distance(&self.peer_id, &joiner);
        let next: Vec<Endpoint> = self
            .table
            .closest_contacts(&joiner, self.config.params.k + 2, false)
            .into_iter()
            .filter(|c| {
                c.peer_id != joiner && c.endpoint != from && xor_distance(&c.peer_id, &joiner) < own
            })
            .take(self.config.params.alpha)
            .map(|c| c.endpoint)
            .collect();
        let fwd = Body {
            contacts: Vec::new(),
            ..body
        };
        for ep in next {
            self.send_reliable(ep, MessageKind::RegReq, 0, 0, &fwd, Token::Forward);
        }
    }

    pub(super) fn on_query(&mut self, from: Endpoint, f: &FullFrame, body: Body) {
        if let Some(peer) = body.peer_id {
            if peer != self.peer_id {
                let _ = self
                    .table
                    .observe(peer, body.endpoint.unwrap_or(from), self.now);
            }
        }
        let mut reply = Body {
            peer_id: Some(self.peer_id),
            ..Default::default()
        };
        let kind = match f.kind {
            MessageKind::Ping => {
                if let Some(t) = body.target {
                    reply.contacts = self.contacts_for(&t, body.peer_id);
                }
                MessageKind::Pong
            }
            MessageKind::FindCallees => {
                let Some(t) = body.target else { return };
                reply.contacts = self.contacts_for(&t, body.peer_id);
                MessageKind::ReplyContacts
            }
            MessageKind::FindCallee => {
                let Some(t) = body.target else { return };
                if t == self.peer_id {
                    reply.contacts = vec![(self.peer_id, self.endpoint)];
                    MessageKind::ReplyCallee
                } else if let Some(c) = self.table.get(&t).filter(|c| c.is_online()) {
                    reply.contacts = vec![(c.peer_id, c.endpoint)];
                    MessageKind::ReplyCallee
                } else {
                    reply.contacts = self.contacts_for(&t, body.peer_id);
                    MessageKind::ReplyContacts
                }
            }
            _ => return,
        };
        self.respond(from, kind, 0, f, &reply);
    }

    /// Leaves the overlay: tells every online contact, then goes silent.
    pub fn release(&mut self, now: Timestamp) -> Result<(), EngineError> {
        self.advance(now);
        self.require_registered()?;
        // Nothing else goes out once the node has decided to leave.
        self.reliable.clear();
        self.lookups.clear();
        let contacts = self.table.all_contacts(false);
        let flood_id: u64 = self.rng.gen();
        self.seen_floods.insert(flood_id, self.now);
        self.release_pending = contacts.len();
        self.release_unacked = 0;
        if contacts.is_empty() {
            self.finish_release();
            return Ok(());
        }
        self.registration = Registration::Releasing;
        let body = Body {
            peer_id: Some(self.peer_id),
            flood_id: Some(flood_id),
            hop_count: Some(0),
            ..Default::default()
        };
        for c in contacts {
            self.send_reliable(
                c.endpoint,
                MessageKind::RegRel,
                0,
                0,
                &body,
                Token::ReleaseNotice,
            );
        }
        Ok(())
    }

    pub(super) fn on_release_progress(&mut self, timed_out: bool) {
        if self.registration != Registration::Releasing {
            return;
        }
        self.release_pending = self.release_pending.saturating_sub(1);
        if timed_out {
            self.release_unacked += 1;
        }
        if self.release_pending == 0 {
            self.finish_release();
        }
    }

    fn finish_release(&mut self) {
        self.registration = Registration::Released;
        self.next_purge = None;
        let unacknowledged = self.release_unacked;
        if unacknowledged > 0 {
            log::info!(
                "{} released with {} unacknowledged REGREL",
                self.endpoint,
                unacknowledged
            );
        }
        self.notify(Notification::Released { unacknowledged });
    }

    pub(super) fn on_regrel(&mut self, from: Endpoint, f: &FullFrame, body: Body) {
        self.respond(from, MessageKind::RegAck, 0, f, &Body::default());
        let (Some(released), Some(flood)) = (body.peer_id, body.flood_id) else {
            return;
        };
        if released == self.peer_id || self.seen_floods.insert(flood, self.now).is_some() {
            return;
        }
        self.table.mark_offline(&released, self.now);
        let hop = body.hop_count.unwrap_or(0);
        if hop >= self.config.regrel_hop_limit || self.registration != Registration::Registered {
            return;
        }
        let next: Vec<Endpoint> = self
            .table
            .closest_contacts(&released, self.config.params.alpha + 1, false)
            .into_iter()
            .filter(|c| c.peer_id != released && c.endpoint != from)
            .take(self.config.params.alpha)
            .map(|c| c.endpoint)
            .collect();
        let fwd = Body {
            hop_count: Some(hop + 1),
            ..body
        };
        for ep in next {
            self.send_reliable(ep, MessageKind::RegRel, 0, 0, &fwd, Token::Forward);
        }
    }
}

use std::collections::VecDeque;

use super::*;
use crate::routing::ContactStatus;
use crate::wire::{ie, peek_kind, InformationElement};

fn small_config() -> EngineConfig {
    EngineConfig {
        params: KademliaParams {
            k: 4,
            bits: 16,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn node(i: u32, config: &EngineConfig) -> PeerNode {
    PeerNode::new(
        &format!("peer{i}@server.com"),
        Endpoint::simulated(i),
        config.clone(),
        i as u64,
    )
    .unwrap()
}

/// Zero-latency delivery between a handful of nodes. `drop` decides loss.
struct Mesh {
    nodes: Vec<PeerNode>,
    now: Timestamp,
    wire: VecDeque<(usize, Endpoint, Vec<u8>)>,
    log: Vec<(usize, Notification)>,
    sent: Vec<(usize, Endpoint, Vec<u8>)>,
    drop_all: bool,
}

impl Mesh {
    fn new(n: u32, config: &EngineConfig) -> Self {
        Mesh {
            nodes: (0..n).map(|i| node(i, config)).collect(),
            now: Timestamp::ZERO,
            wire: VecDeque::new(),
            log: Vec::new(),
            sent: Vec::new(),
            drop_all: false,
        }
    }

    fn index(&self, ep: Endpoint) -> Option<usize> {
        self.nodes.iter().position(|n| n.endpoint() == ep)
    }

    fn collect(&mut self, i: usize) {
        let from = self.nodes[i].endpoint();
        for out in self.nodes[i].take_outputs() {
            match out {
                Output::Transmit { to, bytes } => {
                    self.sent.push((i, to, bytes.clone()));
                    if !self.drop_all {
                        if let Some(j) = self.index(to) {
                            self.wire.push_back((j, from, bytes));
                        }
                    }
                }
                Output::Notify(n) => self.log.push((i, n)),
            }
        }
    }

    /// Delivers everything, firing timers as time moves forward.
    fn settle(&mut self) {
        for i in 0..self.nodes.len() {
            self.collect(i);
        }
        loop {
            while let Some((j, from, bytes)) = self.wire.pop_front() {
                self.nodes[j].receive(from, &bytes, self.now);
                self.collect(j);
            }
            let next = self
                .nodes
                .iter()
                .filter(|n| !n.is_idle())
                .filter_map(|n| n.next_deadline())
                .min();
            let Some(t) = next else { break };
            self.now = self.now.max(t);
            for i in 0..self.nodes.len() {
                self.nodes[i].tick(self.now);
                self.collect(i);
            }
        }
    }

    fn join_all(&mut self) {
        self.nodes[0].join(None, self.now).unwrap();
        let boot = (self.nodes[0].peer_id(), self.nodes[0].endpoint());
        for i in 1..self.nodes.len() {
            self.nodes[i].join(Some(boot), self.now).unwrap();
            self.settle();
        }
    }

    fn sent_kinds(&self, from: usize) -> Vec<MessageKind> {
        self.sent
            .iter()
            .filter(|s| s.0 == from)
            .filter_map(|s| peek_kind(&s.2))
            .collect()
    }
}

#[test]
fn bootstrap_registers_immediately_with_empty_table() {
    let mut n = node(0, &small_config());
    n.join(None, Timestamp::ZERO).unwrap();
    assert_eq!(n.registration(), Registration::Registered);
    assert!(n.table().is_empty());
    assert_eq!(n.take_outputs(), vec![Output::Notify(Notification::Joined)]);
}

#[test]
fn two_nodes_learn_each_other() {
    let mut m = Mesh::new(2, &small_config());
    m.join_all();
    let (a, b) = (m.nodes[0].peer_id(), m.nodes[1].peer_id());
    assert!(m.nodes[0].table().get(&b).is_some());
    assert!(m.nodes[1].table().get(&a).is_some());
    assert_eq!(m.nodes[1].registration(), Registration::Registered);
    assert!(m.log.contains(&(1, Notification::Joined)));
}

#[test]
fn join_under_total_loss_fails_after_retries() {
    let mut m = Mesh::new(2, &small_config());
    m.nodes[0].join(None, m.now).unwrap();
    m.drop_all = true;
    let boot = (m.nodes[0].peer_id(), m.nodes[0].endpoint());
    m.nodes[1].join(Some(boot), m.now).unwrap();
    m.settle();
    assert_eq!(m.nodes[1].registration(), Registration::Unregistered);
    assert!(matches!(
        m.log.last(),
        Some((1, Notification::JoinFailed { .. }))
    ));
    let regreqs = m
        .sent_kinds(1)
        .iter()
        .filter(|k| **k == MessageKind::RegReq)
        .count();
    assert_eq!(regreqs, 5);
    assert_eq!(m.now, Timestamp(15_500));
}

fn full_frame(kind: MessageKind, body: Body, bits: u32) -> Vec<u8> {
    let mut f = FullFrame::new(kind);
    f.ies = body.to_ies(bits).unwrap();
    encode_frame(&Frame::Full(f)).unwrap()
}

fn decode(bytes: &[u8]) -> (FullFrame, Body) {
    let Frame::Full(f) = decode_frame(bytes).unwrap() else {
        panic!("mini frame")
    };
    let body = Body::from_ies(&f.ies, 160).unwrap();
    (f, body)
}

#[test]
fn regreq_with_ten_closer_contacts_forwards_to_alpha() {
    let config = EngineConfig::default();
    let local = PeerId::from_u64(1 << 40);
    let mut n = PeerNode::with_id(
        local,
        "peer0@server.com",
        Endpoint::simulated(0),
        config.clone(),
        1,
    )
    .unwrap();
    n.join(None, Timestamp::ZERO).unwrap();
    n.take_outputs();
    // Joiner key is 0; contacts 1..=10 are all closer to it than the local node.
    for v in 1..=10u64 {
        n.table_mut()
            .observe(
                PeerId::from_u64(v),
                Endpoint::simulated(v as u32),
                Timestamp::ZERO,
            )
            .unwrap();
    }
    let joiner_ep = Endpoint::simulated(99);
    let body = Body {
        peer_id: Some(PeerId::ZERO),
        endpoint: Some(joiner_ep),
        flood_id: Some(42),
        ..Default::default()
    };
    n.receive(
        joiner_ep,
        &full_frame(MessageKind::RegReq, body, 160),
        Timestamp(1),
    );
    let out: Vec<(Endpoint, Vec<u8>)> = n
        .take_outputs()
        .into_iter()
        .filter_map(|o| match o {
            Output::Transmit { to, bytes } => Some((to, bytes)),
            _ => None,
        })
        .collect();
    let acks: Vec<_> = out
        .iter()
        .filter(|o| peek_kind(&o.1) == Some(MessageKind::RegAck))
        .collect();
    let fwd: Vec<_> = out
        .iter()
        .filter(|o| peek_kind(&o.1) == Some(MessageKind::RegReq))
        .collect();
    assert_eq!(acks.len(), 1);
    assert_eq!(acks[0].0, joiner_ep);
    assert_eq!(fwd.len(), 3);
    // The three closest to the joiner's key.
    let mut targets: Vec<Endpoint> = fwd.iter().map(|o| o.0).collect();
    targets.sort();
    assert_eq!(
        targets,
        vec![
            Endpoint::simulated(1),
            Endpoint::simulated(2),
            Endpoint::simulated(3)
        ]
    );
    let (_, reply) = decode(&acks[0].1);
    assert_eq!(reply.contacts.len(), 11 - 1);
    assert!(reply.contacts.iter().all(|c| c.0 != PeerId::ZERO));
    assert!(n.table().get(&PeerId::ZERO).is_some());

    // A repeat of the same flood is answered but not passed on.
    let again = Body {
        peer_id: Some(PeerId::ZERO),
        endpoint: Some(joiner_ep),
        flood_id: Some(42),
        ..Default::default()
    };
    n.receive(
        joiner_ep,
        &full_frame(MessageKind::RegReq, again, 160),
        Timestamp(2),
    );
    let kinds: Vec<_> = n
        .take_outputs()
        .into_iter()
        .filter_map(|o| match o {
            Output::Transmit { bytes, .. } => peek_kind(&bytes),
            _ => None,
        })
        .collect();
    assert_eq!(kinds, vec![MessageKind::RegAck]);
}

#[test]
fn regreq_at_closest_node_is_not_forwarded() {
    let mut m = Mesh::new(2, &EngineConfig::default());
    m.join_all();
    let kinds = m.sent_kinds(0);
    assert!(kinds.contains(&MessageKind::RegAck));
    assert!(!kinds.contains(&MessageKind::RegReq));
}

#[test]
fn identity_mismatch_is_rejected() {
    let mut n = node(0, &EngineConfig::default());
    n.join(None, Timestamp::ZERO).unwrap();
    n.take_outputs();
    let from = Endpoint::simulated(5);
    let body = Body {
        peer_id: Some(PeerId::from_u64(12345)),
        endpoint: Some(from),
        address: Some("peer5@server.com".into()),
        flood_id: Some(1),
        ..Default::default()
    };
    n.receive(
        from,
        &full_frame(MessageKind::RegReq, body, 160),
        Timestamp(1),
    );
    let out = n.take_outputs();
    assert_eq!(out.len(), 1);
    let Output::Transmit { bytes, .. } = &out[0] else {
        panic!()
    };
    let (f, b) = decode(bytes);
    assert_eq!(f.kind, MessageKind::RegRej);
    assert_eq!(b.cause.as_deref(), Some("identity mismatch"));
    assert!(n.table().is_empty());
}

fn reply_contacts(n: &mut PeerNode, target: PeerId) -> Vec<(PeerId, Endpoint)> {
    let from = Endpoint::simulated(900);
    let body = Body {
        target: Some(target),
        ..Default::default()
    };
    n.receive(
        from,
        &full_frame(MessageKind::FindCallees, body, 16),
        Timestamp(1),
    );
    let out = n.take_outputs();
    let Some(Output::Transmit { bytes, .. }) = out.first() else {
        panic!("no reply")
    };
    let Frame::Full(f) = decode_frame(bytes).unwrap() else {
        panic!()
    };
    assert_eq!(f.kind, MessageKind::ReplyContacts);
    Body::from_ies(&f.ies, 16).unwrap().contacts
}

#[test]
fn find_callees_returns_online_contacts_only() {
    let config = small_config();
    let mut n = node(0, &config);
    n.join(None, Timestamp::ZERO).unwrap();
    n.take_outputs();
    for v in 1..=2u64 {
        n.table_mut()
            .observe(
                PeerId::from_u64(v),
                Endpoint::simulated(v as u32),
                Timestamp::ZERO,
            )
            .unwrap();
    }
    assert_eq!(reply_contacts(&mut n, PeerId::from_u64(7)).len(), 2);
    for v in 1..=2u64 {
        n.table_mut()
            .mark_offline(&PeerId::from_u64(v), Timestamp::ZERO);
    }
    assert!(reply_contacts(&mut n, PeerId::from_u64(7)).is_empty());
    for v in 100..200u64 {
        let _ = n.table_mut().observe(
            PeerId::from_u64(v * 300),
            Endpoint::simulated(v as u32),
            Timestamp::ZERO,
        );
    }
    assert_eq!(
        reply_contacts(&mut n, PeerId::from_u64(7)).len(),
        config.params.k
    );
}

#[test]
fn release_with_empty_table_is_immediate_and_silent() {
    let mut n = node(0, &small_config());
    n.join(None, Timestamp::ZERO).unwrap();
    n.take_outputs();
    n.release(Timestamp(5)).unwrap();
    assert_eq!(n.registration(), Registration::Released);
    assert_eq!(
        n.take_outputs(),
        vec![Output::Notify(Notification::Released { unacknowledged: 0 })]
    );
    assert_eq!(
        n.lookup(PeerId::from_u64(1), Timestamp(6)),
        Err(EngineError::NotRegistered)
    );
}

#[test]
fn release_marks_releaser_offline_at_contacts() {
    let mut m = Mesh::new(6, &small_config());
    m.join_all();
    let leaver = m.nodes[3].peer_id();
    let contacts = m.nodes[3].table().online_len();
    m.sent.clear();
    m.nodes[3].release(m.now).unwrap();
    m.settle();
    let initial = m
        .sent_kinds(3)
        .iter()
        .filter(|k| **k == MessageKind::RegRel)
        .count();
    assert_eq!(initial, contacts);
    assert_eq!(m.nodes[3].registration(), Registration::Released);
    for (i, n) in m.nodes.iter().enumerate() {
        if i == 3 {
            continue;
        }
        if let Some(c) = n.table().get(&leaver) {
            assert_eq!(c.status(), ContactStatus::Offline, "node {i}");
        }
    }
    // Released nodes answer REGREL and nothing else.
    let ping = full_frame(
        MessageKind::Ping,
        Body {
            peer_id: Some(m.nodes[0].peer_id()),
            ..Default::default()
        },
        16,
    );
    let (ep0, ep1, now) = (m.nodes[0].endpoint(), m.nodes[1].endpoint(), m.now);
    m.nodes[3].receive(ep0, &ping, now);
    assert!(m.nodes[3].take_outputs().is_empty());
    let rel = full_frame(
        MessageKind::RegRel,
        Body {
            peer_id: Some(m.nodes[1].peer_id()),
            flood_id: Some(9),
            hop_count: Some(0),
            ..Default::default()
        },
        16,
    );
    m.nodes[3].receive(ep1, &rel, now);
    let out = m.nodes[3].take_outputs();
    assert_eq!(out.len(), 1);
    let Output::Transmit { bytes, .. } = &out[0] else {
        panic!()
    };
    assert_eq!(peek_kind(bytes), Some(MessageKind::RegAck));
}

fn regrel_outputs(n: &mut PeerNode, flood: u64, hop: u8, released: PeerId) -> Vec<MessageKind> {
    let body = Body {
        peer_id: Some(released),
        flood_id: Some(flood),
        hop_count: Some(hop),
        ..Default::default()
    };
    n.receive(
        Endpoint::simulated(500),
        &full_frame(MessageKind::RegRel, body, 16),
        Timestamp(10),
    );
    n.take_outputs()
        .into_iter()
        .filter_map(|o| match o {
            Output::Transmit { bytes, .. } => peek_kind(&bytes),
            _ => None,
        })
        .collect()
}

#[test]
fn regrel_forwarding_is_bounded() {
    let config = small_config();
    let mut n = node(0, &config);
    n.join(None, Timestamp::ZERO).unwrap();
    n.take_outputs();
    for v in 1..=8u64 {
        let _ = n.table_mut().observe(
            PeerId::from_u64(v * 1000),
            Endpoint::simulated(v as u32),
            Timestamp::ZERO,
        );
    }
    let released = PeerId::from_u64(1000);
    let first = regrel_outputs(&mut n, 7, 0, released);
    assert_eq!(first[0], MessageKind::RegAck);
    assert_eq!(
        first.iter().filter(|k| **k == MessageKind::RegRel).count(),
        config.params.alpha
    );
    assert_eq!(
        n.table().get(&released).unwrap().status(),
        ContactStatus::Offline
    );

    assert_eq!(
        regrel_outputs(&mut n, 7, 0, released),
        vec![MessageKind::RegAck]
    );
    assert_eq!(
        regrel_outputs(&mut n, 8, 3, PeerId::from_u64(2000)),
        vec![MessageKind::RegAck]
    );
    assert_eq!(
        n.table().get(&PeerId::from_u64(2000)).unwrap().status(),
        ContactStatus::Offline
    );
}

#[test]
fn tick_retransmits_pending_regreq_with_r_bit() {
    let mut n = node(1, &small_config());
    n.tick(Timestamp(100));
    assert!(n.take_outputs().is_empty());
    n.join(
        Some((PeerId::from_u64(3), Endpoint::simulated(0))),
        Timestamp(100),
    )
    .unwrap();
    let first = n.take_outputs();
    assert_eq!(first.len(), 1);
    assert_eq!(n.next_deadline(), Some(Timestamp(600)));
    n.tick(Timestamp(600));
    let out = n.take_outputs();
    assert_eq!(out.len(), 1);
    let (Output::Transmit { bytes: a, .. }, Output::Transmit { bytes: b, .. }) =
        (&first[0], &out[0])
    else {
        panic!()
    };
    assert_eq!(a[2] | 0x80, b[2]);
    assert_eq!(a[3..], b[3..]);
}

#[test]
fn purge_sweep_drops_contacts_offline_past_expiry() {
    let mut n = node(0, &small_config());
    n.join(None, Timestamp::ZERO).unwrap();
    n.take_outputs();
    let (old, recent) = (PeerId::from_u64(5), PeerId::from_u64(6));
    for (i, p) in [old, recent].iter().enumerate() {
        n.table_mut()
            .observe(*p, Endpoint::simulated(i as u32 + 1), Timestamp::ZERO)
            .unwrap();
    }
    n.table_mut().mark_offline(&old, Timestamp::ZERO);
    n.table_mut()
        .mark_offline(&recent, Timestamp::from_secs(2 * 3600));
    let at = Timestamp::from_secs(25 * 3600);
    while let Some(t) = n.next_deadline().filter(|t| *t <= at) {
        n.tick(t);
    }
    assert!(n.table().get(&old).is_none());
    assert!(n.table().get(&recent).is_some());
    assert!(n
        .take_outputs()
        .contains(&Output::Notify(Notification::Purged { removed: vec![old] })));
}

fn up_calls(m: &Mesh) -> Vec<(usize, u16, u16)> {
    m.log
        .iter()
        .filter_map(|(i, n)| match n {
            Notification::CallUp {
                call, remote_call, ..
            } => Some((*i, *call, *remote_call)),
            _ => None,
        })
        .collect()
}

#[test]
fn call_setup_media_and_hangup() {
    let mut m = Mesh::new(5, &small_config());
    m.join_all();
    let callee = m.nodes[4].address().to_string();
    m.nodes[1].call(&callee, m.now).unwrap();
    m.nodes[1].call(&callee, m.now).unwrap();
    m.settle();
    let ups = up_calls(&m);
    assert_eq!(ups.len(), 4);
    let caller: Vec<_> = ups.iter().filter(|u| u.0 == 1).collect();
    assert_ne!(caller[0].1, caller[1].1);
    for (_, call, remote) in &caller {
        let s = m.nodes[4].session(*remote).unwrap();
        assert_eq!(s.phase, CallPhase::Up);
        assert_eq!(s.remote_call, Some(*call));
        assert_eq!(
            m.nodes[1].session(*call).unwrap().remote_call,
            Some(*remote)
        );
    }

    let call = caller[0].1;
    let acks_before = m
        .sent
        .iter()
        .filter(|s| peek_kind(&s.2) == Some(MessageKind::Ack))
        .count();
    for i in 0..100u8 {
        m.nodes[1].send_media(call, &[i; 20], m.now).unwrap();
    }
    m.settle();
    let acks_after = m
        .sent
        .iter()
        .filter(|s| peek_kind(&s.2) == Some(MessageKind::Ack))
        .count();
    assert_eq!(acks_before, acks_after);
    let remote = m.nodes[1].session(call).unwrap().remote_call.unwrap();
    assert_eq!(m.nodes[4].session(remote).unwrap().media_received, 100);

    m.nodes[1].hangup(call, m.now).unwrap();
    m.settle();
    assert!(m.nodes[1].session(call).is_none());
    assert!(m.nodes[4].session(remote).is_none());
    assert_eq!(m.nodes[1].ended_calls()[0].phase, CallPhase::Hungup);
    assert_eq!(m.nodes[4].ended_calls()[0].phase, CallPhase::Hungup);
    assert_eq!(
        m.nodes[1].send_media(call, b"x", m.now),
        Err(EngineError::CallNotUp(call))
    );
    // The freed number is handed out again.
    m.nodes[1].call(&callee, m.now).unwrap();
    m.settle();
    assert_eq!(up_calls(&m).iter().rfind(|u| u.0 == 1).unwrap().1, call);
}

#[test]
fn unknown_callee_means_no_route_and_no_new() {
    let mut m = Mesh::new(4, &small_config());
    m.join_all();
    m.sent.clear();
    let op = m.nodes[2].call("nobody@nowhere.org", m.now).unwrap();
    m.settle();
    assert!(m.log.contains(&(
        2,
        Notification::CallFailed {
            op,
            error: CallError::NoRoute
        }
    )));
    assert!(!m.sent_kinds(2).contains(&MessageKind::New));
}

#[test]
fn resolve_finds_live_peer_and_self() {
    let mut m = Mesh::new(6, &small_config());
    m.join_all();
    let want = (m.nodes[5].peer_id(), m.nodes[5].endpoint());
    let addr = m.nodes[5].address().to_string();
    let op = m.nodes[1].resolve(&addr, m.now).unwrap();
    let own = m.nodes[1].address().to_string();
    let op_self = m.nodes[1].resolve(&own, m.now).unwrap();
    m.settle();
    let resolved = |op: OpId| {
        m.log.iter().find_map(|(_, n)| match n {
            Notification::Resolved { op: o, contact, .. } if *o == op => Some(*contact),
            _ => None,
        })
    };
    assert_eq!(resolved(op), Some(Some(want)));
    assert_eq!(
        resolved(op_self),
        Some(Some((m.nodes[1].peer_id(), m.nodes[1].endpoint())))
    );
    assert!(matches!(
        m.nodes[1].resolve("bad-address", m.now),
        Err(EngineError::Identity(_))
    ));
}

#[test]
fn lookup_on_lonely_node_is_empty() {
    let mut n = node(0, &small_config());
    n.join(None, Timestamp::ZERO).unwrap();
    n.take_outputs();
    let op = n.lookup(PeerId::from_u64(9), Timestamp(1)).unwrap();
    assert_eq!(
        n.take_outputs(),
        vec![Output::Notify(Notification::LookupDone {
            op,
            target: PeerId::from_u64(9),
            contacts: vec![],
            rounds: 0,
            queries: 0
        })]
    );
}

#[test]
fn malformed_frames_are_counted_and_dropped() {
    let mut n = node(0, &small_config());
    n.join(None, Timestamp::ZERO).unwrap();
    n.take_outputs();
    n.receive(Endpoint::simulated(3), &[0x80, 0, 0], Timestamp(1));
    let mut bad = FullFrame::new(MessageKind::FindCallees);
    bad.ies
        .push(InformationElement::new(ie::TARGET_KEY, vec![1, 2, 3]));
    n.receive(
        Endpoint::simulated(3),
        &encode_frame(&Frame::Full(bad)).unwrap(),
        Timestamp(1),
    );
    assert!(n.take_outputs().is_empty());
    assert_eq!(n.stats().malformed, 2);
}

#[test]
fn authenticated_registration() {
    let config = EngineConfig {
        auth_secret: Some("s3cret".into()),
        ..small_config()
    };
    let mut m = Mesh::new(2, &config);
    m.join_all();
    assert_eq!(m.nodes[1].registration(), Registration::Registered);
    assert!(m.sent_kinds(0).contains(&MessageKind::RegAuth));

    let wrong = EngineConfig {
        auth_secret: Some("guess".into()),
        ..small_config()
    };
    let mut intruder = node(7, &wrong);
    let boot = (m.nodes[0].peer_id(), m.nodes[0].endpoint());
    intruder.join(Some(boot), m.now).unwrap();
    m.nodes.push(intruder);
    m.settle();
    assert_eq!(m.nodes[2].registration(), Registration::Unregistered);
    assert!(m.log.contains(&(
        2,
        Notification::JoinFailed {
            cause: "rejected".into()
        }
    )));
}

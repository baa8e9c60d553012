//! Discrete-event network hosting many peer engines on one logical thread.
//!
//! Events are ordered by `(time, seq)`; `seq` is a global insertion counter,
//! so equal-time events run in the order they were scheduled. All randomness
//! (latency, loss, node seeds, workload choices) flows from one seeded
//! generator, which makes every run a pure function of its inputs.

pub mod oracle;
pub mod scaling;
pub mod scenario;
pub mod verify;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::endpoint::Endpoint;
use crate::engine::{
    EngineConfig, EngineError, Notification, OpId, Output, PeerNode, Registration,
};
use crate::identity::PeerId;
use crate::time::Timestamp;
use crate::wire::{decode_frame, Body, Frame, MessageKind};

pub use oracle::{oracle_k_closest, oracle_k_closest_excluding, oracle_resolvable};
pub use scaling::{measure_scaling, ScalingRow};
pub use scenario::{run_scenario, Metrics, Scenario};
pub use verify::{verify, VerifyReport};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("unknown peer index {0}")]
    UnknownPeer(usize),
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkModel {
    /// Bounds of the per-pair base latency, drawn once per directed pair.
    pub min_latency_ms: u64,
    pub max_latency_ms: u64,
    /// Extra per-frame delay, uniform in `[0, jitter_ms]`.
    pub jitter_ms: u64,
    pub loss: f64,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel {
            min_latency_ms: 10,
            max_latency_ms: 50,
            jitter_ms: 0,
            loss: 0.0,
        }
    }
}

/// Address used for the peer at `index`.
pub fn sim_address(index: usize) -> String {
    format!("peer{index}@server{}.com", index % 16)
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Event {
    Deliver {
        to: usize,
        from: Endpoint,
        bytes: Vec<u8>,
    },
    Wake(usize),
    Crash(usize),
}

/// Frame accounting for the whole network.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Traffic {
    /// First transmissions by kind; media frames are counted as "MINI".
    pub sent: BTreeMap<String, u64>,
    pub retransmitted: BTreeMap<String, u64>,
    pub delivered: u64,
    pub lost: u64,
    /// Delivered to a crashed peer and ignored.
    pub ignored: u64,
    pub in_flight: u64,
    /// First-transmission REGREL frames per flood identifier.
    pub regrel_by_flood: BTreeMap<u64, u64>,
}

impl Traffic {
    pub fn total_sent(&self) -> u64 {
        self.sent.values().sum::<u64>() + self.retransmitted.values().sum::<u64>()
    }

    pub fn sent_of(&self, kind: MessageKind) -> u64 {
        self.sent.get(kind.name()).copied().unwrap_or(0)
    }
}

struct SimPeer {
    node: PeerNode,
    crashed: bool,
    wake_at: Option<Timestamp>,
}

pub struct SimNet {
    config: EngineConfig,
    link: LinkModel,
    clock: Timestamp,
    seq: u64,
    queue: BTreeMap<(Timestamp, u64), Event>,
    rng: ChaCha8Rng,
    peers: Vec<SimPeer>,
    by_endpoint: BTreeMap<Endpoint, usize>,
    latency: BTreeMap<(usize, usize), u64>,
    groups: Option<Vec<u32>>,
    busy: BTreeSet<usize>,
    pending_crashes: usize,
    traffic: Traffic,
    notifications: Vec<(Timestamp, usize, Notification)>,
}

impl SimNet {
    pub fn new(config: EngineConfig, link: LinkModel, seed: u64) -> Self {
        SimNet {
            config,
            link,
            clock: Timestamp::ZERO,
            seq: 0,
            queue: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            peers: Vec::new(),
            by_endpoint: BTreeMap::new(),
            latency: BTreeMap::new(),
            groups: None,
            busy: BTreeSet::new(),
            pending_crashes: 0,
            traffic: Traffic::default(),
            notifications: Vec::new(),
        }
    }

    pub fn now(&self) -> Timestamp {
        self.clock
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn link(&self) -> &LinkModel {
        &self.link
    }

    pub fn set_loss(&mut self, loss: f64) {
        self.link.loss = loss;
    }

    pub fn traffic(&self) -> &Traffic {
        &self.traffic
    }

    pub fn len(&self) -> usize {
        self.peers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peers.is_empty()
    }

    /// Adds an unjoined peer and returns its index.
    pub fn add_peer(&mut self) -> usize {
        let i = self.peers.len();
        let seed = self.rng.gen();
        let ep = Endpoint::simulated(i as u32);
        let node = PeerNode::new(&sim_address(i), ep, self.config.clone(), seed)
            .expect("generated addresses are valid");
        self.by_endpoint.insert(ep, i);
        self.peers.push(SimPeer {
            node,
            crashed: false,
            wake_at: None,
        });
        i
    }

    pub fn node(&self, i: usize) -> &PeerNode {
        &self.peers[i].node
    }

    pub fn node_mut(&mut self, i: usize) -> &mut PeerNode {
        &mut self.peers[i].node
    }

    pub fn nodes(&self) -> impl Iterator<Item = &PeerNode> {
        self.peers.iter().map(|p| &p.node)
    }

    pub fn index_of(&self, ep: Endpoint) -> Option<usize> {
        self.by_endpoint.get(&ep).copied()
    }

    pub fn is_crashed(&self, i: usize) -> bool {
        self.peers[i].crashed
    }

    /// Registered and neither released nor crashed.
    pub fn is_live(&self, i: usize) -> bool {
        let p = &self.peers[i];
        !p.crashed && p.node.registration() == Registration::Registered
    }

    pub fn live_peers(&self) -> Vec<usize> {
        (0..self.peers.len()).filter(|&i| self.is_live(i)).collect()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn notifications(&self) -> &[(Timestamp, usize, Notification)] {
        &self.notifications
    }

    pub fn take_notifications(&mut self) -> Vec<(Timestamp, usize, Notification)> {
        std::mem::take(&mut self.notifications)
    }

    fn check(&self, i: usize) -> Result<(), SimError> {
        if i < self.peers.len() {
            Ok(())
        } else {
            Err(SimError::UnknownPeer(i))
        }
    }

    /// Splits the network; frames between different groups are dropped.
    /// Peers not listed form one extra group.
    pub fn partition(&mut self, groups: &[Vec<usize>]) {
        let mut g = vec![u32::MAX; self.peers.len()];
        for (gi, members) in groups.iter().enumerate() {
            for &m in members {
                if m < g.len() {
                    g[m] = gi as u32;
                }
            }
        }
        self.groups = Some(g);
    }

    pub fn heal(&mut self) {
        self.groups = None;
    }

    fn push(&mut self, at: Timestamp, ev: Event) {
        self.seq += 1;
        self.queue.insert((at, self.seq), ev);
    }

    fn link_latency(&mut self, from: usize, to: usize) -> u64 {
        let (lo, hi) = (
            self.link.min_latency_ms,
            self.link.max_latency_ms.max(self.link.min_latency_ms),
        );
        let base = match self.latency.get(&(from, to)) {
            Some(b) => *b,
            None => {
                let b = self.rng.gen_range(lo..=hi);
                self.latency.insert((from, to), b);
                b
            }
        };
        let jitter = if self.link.jitter_ms > 0 {
            self.rng.gen_range(0..=self.link.jitter_ms)
        } else {
            0
        };
        base + jitter
    }

    fn account(&mut self, bytes: &[u8]) {
        let Ok(frame) = decode_frame(bytes) else {
            return;
        };
        match frame {
            Frame::Mini(_) => *self.traffic.sent.entry("MINI".into()).or_default() += 1,
            Frame::Full(f) => {
                let name = f.kind.name().to_string();
                if f.retransmission {
                    *self.traffic.retransmitted.entry(name).or_default() += 1;
                } else {
                    *self.traffic.sent.entry(name).or_default() += 1;
                    if f.kind == MessageKind::RegRel {
                        let bits = self.config.params.bits;
                        if let Some(flood) =
                            Body::from_ies(&f.ies, bits).ok().and_then(|b| b.flood_id)
                        {
                            *self.traffic.regrel_by_flood.entry(flood).or_default() += 1;
                        }
                    }
                }
            }
        }
    }

    /// Moves a node's queued outputs onto the network and reschedules it.
    fn flush(&mut self, i: usize) {
        let outputs = self.peers[i].node.take_outputs();
        let from = self.peers[i].node.endpoint();
        for out in outputs {
            match out {
                Output::Notify(n) => self.notifications.push((self.clock, i, n)),
                Output::Transmit { to, bytes } => {
                    self.account(&bytes);
                    let Some(j) = self.index_of(to) else {
                        self.traffic.lost += 1;
                        continue;
                    };
                    let cut = self.groups.as_ref().is_some_and(|g| g[i] != g[j]);
                    let lost = self.link.loss > 0.0 && self.rng.gen_bool(self.link.loss.min(1.0));
                    if cut || lost {
                        self.traffic.lost += 1;
                        continue;
                    }
                    let delay = self.link_latency(i, j);
                    self.traffic.in_flight += 1;
                    self.push(
                        self.clock + Duration::from_millis(delay),
                        Event::Deliver { to: j, from, bytes },
                    );
                }
            }
        }
        let p = &mut self.peers[i];
        if p.crashed {
            self.busy.remove(&i);
            return;
        }
        if p.node.is_idle() {
            self.busy.remove(&i);
        } else {
            self.busy.insert(i);
        }
        if let Some(d) = p.node.next_deadline() {
            if p.wake_at.is_none_or(|w| d < w) {
                p.wake_at = Some(d);
                let at = d.max(self.clock);
                self.push(at, Event::Wake(i));
            }
        }
    }

    fn step(&mut self) -> bool {
        let Some(((at, _), ev)) = self.queue.pop_first() else {
            return false;
        };
        self.clock = self.clock.max(at);
        match ev {
            Event::Deliver { to, from, bytes } => {
                self.traffic.in_flight -= 1;
                self.traffic.delivered += 1;
                if self.peers[to].crashed {
                    self.traffic.ignored += 1;
                } else {
                    self.peers[to].node.receive(from, &bytes, self.clock);
                    self.flush(to);
                }
            }
            Event::Wake(i) => {
                if self.peers[i].wake_at == Some(at) && !self.peers[i].crashed {
                    self.peers[i].wake_at = None;
                    self.peers[i].node.tick(self.clock);
                    self.flush(i);
                }
            }
            Event::Crash(i) => {
                self.pending_crashes -= 1;
                self.peers[i].crashed = true;
                self.busy.remove(&i);
            }
        }
        true
    }

    /// Nothing in flight, no peer waiting on a reply, no scheduled crash.
    pub fn is_quiescent(&self) -> bool {
        self.traffic.in_flight == 0 && self.busy.is_empty() && self.pending_crashes == 0
    }

    /// Runs until quiescent or until `limit` is reached; returns whether the
    /// network went quiet.
    pub fn run_until_idle_or(&mut self, limit: Timestamp) -> bool {
        loop {
            if self.is_quiescent() {
                return true;
            }
            match self.queue.first_key_value() {
                Some(((at, _), _)) if *at <= limit => {
                    self.step();
                }
                _ => {
                    self.clock = self.clock.max(limit);
                    return self.is_quiescent();
                }
            }
        }
    }

    /// Runs until quiescent, with a generous simulated-time guard.
    pub fn run_until_idle(&mut self) -> bool {
        let limit = self.clock + Duration::from_secs(24 * 3600);
        self.run_until_idle_or(limit)
    }

    /// Processes every event up to and including `t`, then sets the clock to `t`.
    pub fn run_until(&mut self, t: Timestamp) {
        while let Some(((at, _), _)) = self.queue.first_key_value() {
            if *at > t {
                break;
            }
            self.step();
        }
        self.clock = self.clock.max(t);
    }

    pub fn run_for(&mut self, d: Duration) {
        let t = self.clock + d;
        self.run_until(t);
    }

    /// Joins peer `i`, through `via` or as the bootstrap when `via` is `None`.
    pub fn join(&mut self, i: usize, via: Option<usize>) -> Result<(), SimError> {
        self.check(i)?;
        let first = match via {
            Some(v) => {
                self.check(v)?;
                Some((self.peers[v].node.peer_id(), self.peers[v].node.endpoint()))
            }
            None => None,
        };
        let now = self.clock;
        self.peers[i].node.join(first, now)?;
        self.flush(i);
        Ok(())
    }

    fn with_node<T>(
        &mut self,
        i: usize,
        f: impl FnOnce(&mut PeerNode, Timestamp) -> Result<T, EngineError>,
    ) -> Result<T, SimError> {
        self.check(i)?;
        let now = self.clock;
        let r = f(&mut self.peers[i].node, now);
        self.flush(i);
        Ok(r?)
    }

    pub fn lookup(&mut self, i: usize, target: PeerId) -> Result<OpId, SimError> {
        self.with_node(i, |n, now| n.lookup(target, now))
    }

    pub fn refresh(&mut self, i: usize) -> Result<OpId, SimError> {
        self.with_node(i, |n, now| n.refresh(now))
    }

    pub fn resolve(&mut self, i: usize, address: &str) -> Result<OpId, SimError> {
        self.with_node(i, |n, now| n.resolve(address, now))
    }

    pub fn call(&mut self, i: usize, address: &str) -> Result<OpId, SimError> {
        self.with_node(i, |n, now| n.call(address, now))
    }

    pub fn send_media(&mut self, i: usize, call: u16, payload: &[u8]) -> Result<(), SimError> {
        self.with_node(i, |n, now| n.send_media(call, payload, now))
    }

    pub fn hangup(&mut self, i: usize, call: u16) -> Result<(), SimError> {
        self.with_node(i, |n, now| n.hangup(call, now))
    }

    pub fn release(&mut self, i: usize) -> Result<(), SimError> {
        self.with_node(i, |n, now| n.release(now))
    }

    /// Silently stops peer `i` at `at`. Frames already on the wire still
    /// arrive; nothing further is processed or sent by the peer.
    pub fn inject_crash(&mut self, i: usize, at: Timestamp) -> Result<(), SimError> {
        self.check(i)?;
        self.pending_crashes += 1;
        self.push(at.max(self.clock), Event::Crash(i));
        Ok(())
    }

    /// Adds `n` peers and joins them one at a time through peer 0, then lets
    /// every peer run one self-lookup. Returns the number of failed joins.
    pub fn bootstrap(&mut self, n: usize) -> usize {
        let start = self.peers.len();
        for _ in 0..n {
            self.add_peer();
        }
        let mut failed = 0;
        for i in start..start + n {
            let via = if i == 0 { None } else { Some(0) };
            if via.is_some() && !self.is_live(0) {
                failed += 1;
                continue;
            }
            self.join(i, via).expect("fresh peer joins once");
            self.run_until_idle();
            if !self.is_live(i) {
                failed += 1;
            }
        }
        self.settle();
        failed
    }

    /// One self-lookup per live peer, then run to quiescence.
    pub fn settle(&mut self) {
        for i in self.live_peers() {
            let _ = self.refresh(i);
        }
        self.run_until_idle();
    }
}

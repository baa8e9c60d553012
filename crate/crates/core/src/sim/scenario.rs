//! Scenario files and the metrics they produce.

use std::collections::BTreeMap;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::oracle::{oracle_k_closest_excluding, oracle_resolvable};
use super::{sim_address, LinkModel, SimError, SimNet, Traffic};
use crate::engine::{EngineConfig, Notification, OpId};
use crate::identity::{KademliaParams, PeerId};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scheduled {
    pub at_ms: u64,
    pub peer: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallSpec {
    pub at_ms: u64,
    pub caller: usize,
    pub callee: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub params: KademliaParams,
    pub n_peers: usize,
    pub seed: u64,
    pub link: LinkModel,
    /// Empty means: join every peer in index order through peer 0, then
    /// settle. Otherwise schedule times are measured from zero.
    pub join_schedule: Vec<Scheduled>,
    /// Times below are measured from the end of the initial joins.
    pub release_schedule: Vec<Scheduled>,
    pub crash_schedule: Vec<Scheduled>,
    pub call_workload: Vec<CallSpec>,
    /// Random k-closest lookups issued once the schedule has played out.
    pub lookups: usize,
    /// Random callee resolutions issued after the lookups.
    pub resolves: usize,
    pub horizon_ms: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            params: KademliaParams::default(),
            n_peers: 100,
            seed: 1,
            link: LinkModel::default(),
            join_schedule: Vec::new(),
            release_schedule: Vec::new(),
            crash_schedule: Vec::new(),
            call_workload: Vec::new(),
            lookups: 100,
            resolves: 100,
            horizon_ms: 3_600_000,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        self.params
            .validate()
            .map_err(|e| SimError::Config(e.to_string()))?;
        if self.n_peers == 0 {
            return bad("n_peers must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.link.loss) {
            return bad(format!("loss {} is outside [0, 1]", self.link.loss));
        }
        if self.link.min_latency_ms > self.link.max_latency_ms {
            return bad("min_latency_ms exceeds max_latency_ms".into());
        }
        for (name, list) in [
            ("join_schedule", &self.join_schedule),
            ("release_schedule", &self.release_schedule),
            ("crash_schedule", &self.crash_schedule),
        ] {
            if list.windows(2).any(|w| w[0].at_ms > w[1].at_ms) {
                return bad(format!("{name} is not sorted by time"));
            }
            if let Some(s) = list.iter().find(|s| s.peer >= self.n_peers) {
                return bad(format!("{name} references unknown peer {}", s.peer));
            }
        }
        if self
            .call_workload
            .windows(2)
            .any(|w| w[0].at_ms > w[1].at_ms)
        {
            return bad("call_workload is not sorted by time".into());
        }
        if let Some(c) = self
            .call_workload
            .iter()
            .find(|c| c.caller >= self.n_peers || c.callee >= self.n_peers)
        {
            return bad(format!(
                "call_workload references unknown peer {}",
                c.caller.max(c.callee)
            ));
        }
        Ok(())
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            params: self.params,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct JoinMetrics {
    pub attempted: usize,
    pub succeeded: usize,
    pub failed: usize,
    /// Simulated time from the first join until the network went quiet.
    pub convergence_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LookupMetrics {
    pub issued: usize,
    pub completed: usize,
    /// Results equal, as a set, to the oracle's k closest live peers.
    pub exact: usize,
    pub mean_rounds: f64,
    pub max_rounds: u32,
    pub mean_queries: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ResolveMetrics {
    pub issued: usize,
    /// Callees the oracle says are live.
    pub resolvable: usize,
    pub found: usize,
    /// Answers that agree with the oracle, found or not.
    pub correct: usize,
    pub success_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CallMetrics {
    pub attempted: usize,
    pub up: usize,
    pub failed: usize,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub scenario: Scenario,
    pub joins: JoinMetrics,
    pub lookups: LookupMetrics,
    pub resolves: ResolveMetrics,
    pub calls: CallMetrics,
    pub releases: usize,
    pub crashes: usize,
    pub traffic: Traffic,
    /// sent = delivered + lost + in flight, exactly.
    pub conservation_holds: bool,
    pub final_time_ms: u64,
}

impl Metrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

/// Issues `count` random lookups from random live peers, `batch` at a time,
/// and scores each against the oracle.
pub fn run_lookups(net: &mut SimNet, count: usize, batch: usize) -> LookupMetrics {
    let bits = net.config().params.bits;
    let k = net.config().params.k;
    let mut m = LookupMetrics {
        issued: count,
        ..Default::default()
    };
    let (mut rounds, mut queries) = (0u64, 0u64);
    let mut left = count;
    while left > 0 {
        let live = net.live_peers();
        if live.is_empty() {
            break;
        }
        let mut pending: BTreeMap<(usize, OpId), ()> = BTreeMap::new();
        for _ in 0..batch.min(left) {
            let who = live[net.rng().gen_range(0..live.len())];
            let target = PeerId::random(net.rng(), bits);
            if let Ok(op) = net.lookup(who, target) {
                pending.insert((who, op), ());
            }
        }
        left -= batch.min(left);
        net.run_until_idle();
        for (_, i, n) in net.take_notifications() {
            if let Notification::LookupDone {
                op,
                target,
                contacts,
                rounds: r,
                queries: q,
            } = n
            {
                if pending.remove(&(i, op)).is_none() {
                    continue;
                }
                m.completed += 1;
                rounds += r as u64;
                queries += q as u64;
                m.max_rounds = m.max_rounds.max(r);
                let me = net.node(i).peer_id();
                let mut want = oracle_k_closest_excluding(net, &target, k, &me);
                let mut got: Vec<PeerId> = contacts.iter().map(|c| c.0).collect();
                want.sort();
                got.sort();
                if want == got {
                    m.exact += 1;
                }
            }
        }
    }
    if m.completed > 0 {
        m.mean_rounds = rounds as f64 / m.completed as f64;
        m.mean_queries = queries as f64 / m.completed as f64;
    }
    m
}

/// Issues `count` resolutions of random peer addresses from random live
/// peers and scores them against the oracle.
pub fn run_resolves(net: &mut SimNet, count: usize, batch: usize) -> ResolveMetrics {
    let mut m = ResolveMetrics {
        issued: count,
        ..Default::default()
    };
    let mut left = count;
    while left > 0 {
        let live = net.live_peers();
        if live.is_empty() || net.len() < 2 {
            break;
        }
        let mut pending: BTreeMap<(usize, OpId), (String, bool)> = BTreeMap::new();
        for _ in 0..batch.min(left) {
            let who = live[net.rng().gen_range(0..live.len())];
            let n = net.len();
            let mut callee = net.rng().gen_range(0..n);
            if callee == who {
                callee = (callee + 1) % n;
            }
            let addr = sim_address(callee);
            let expected = oracle_resolvable(net, &addr);
            if let Ok(op) = net.resolve(who, &addr) {
                pending.insert((who, op), (addr, expected));
            }
        }
        left -= batch.min(left);
        net.run_until_idle();
        for (_, i, n) in net.take_notifications() {
            if let Notification::Resolved { op, contact, .. } = n {
                let Some((addr, expected)) = pending.remove(&(i, op)) else {
                    continue;
                };
                let callee = net.index_of(contact.map(|c| c.1).unwrap_or(net.node(i).endpoint()));
                let hit = contact.is_some() && callee.is_some_and(|c| sim_address(c) == addr);
                if expected {
                    m.resolvable += 1;
                }
                if hit {
                    m.found += 1;
                }
                if hit == expected {
                    m.correct += 1;
                }
            }
        }
    }
    m.success_rate = ratio(m.correct, m.issued);
    m
}

/// Runs a scenario end to end.
pub fn run_scenario(s: &Scenario) -> Result<Metrics, SimError> {
    s.validate()?;
    let mut net = SimNet::new(s.engine_config(), s.link.clone(), s.seed);
    let mut joins = JoinMetrics {
        attempted: s.n_peers,
        ..Default::default()
    };

    if s.join_schedule.is_empty() {
        joins.failed = net.bootstrap(s.n_peers);
    } else {
        for _ in 0..s.n_peers {
            net.add_peer();
        }
        for j in &s.join_schedule {
            net.run_until(Timestamp(j.at_ms));
            let via = net.live_peers().into_iter().find(|&v| v != j.peer);
            if via.is_none()
                && (0..net.len()).any(|i| {
                    net.node(i).registration() != crate::engine::Registration::Unregistered
                })
            {
                continue;
            }
            let _ = net.join(j.peer, via);
        }
        net.run_until_idle();
        net.settle();
        joins.attempted = s.join_schedule.len();
        joins.failed = joins.attempted
            - (0..net.len())
                .filter(|&i| net.is_live(i))
                .count()
                .min(joins.attempted);
    }
    joins.succeeded = joins.attempted - joins.failed;
    joins.convergence_ms = net.now().0;
    net.take_notifications();

    // Timed churn and calls, relative to the end of the joins.
    let t0 = net.now();
    let mut calls = CallMetrics::default();
    let mut call_ops: BTreeMap<(usize, OpId), ()> = BTreeMap::new();
    let mut actions: Vec<(u64, u8, usize, usize)> = Vec::new();
    actions.extend(s.release_schedule.iter().map(|r| (r.at_ms, 0, r.peer, 0)));
    actions.extend(s.crash_schedule.iter().map(|r| (r.at_ms, 1, r.peer, 0)));
    actions.extend(
        s.call_workload
            .iter()
            .map(|c| (c.at_ms, 2, c.caller, c.callee)),
    );
    actions.sort();
    let horizon = t0 + Duration::from_millis(s.horizon_ms);
    let (mut releases, mut crashes) = (0, 0);
    for (at, what, a, b) in actions {
        let when = t0 + Duration::from_millis(at);
        if when > horizon {
            continue;
        }
        net.run_until(when);
        match what {
            0 => {
                if net.release(a).is_ok() {
                    releases += 1;
                }
            }
            1 => {
                net.inject_crash(a, when)?;
                crashes += 1;
            }
            _ => {
                calls.attempted += 1;
                match net.call(a, &sim_address(b)) {
                    Ok(op) => {
                        call_ops.insert((a, op), ());
                    }
                    Err(_) => calls.failed += 1,
                }
            }
        }
    }
    net.run_until_idle_or(horizon);
    for (_, i, n) in net.take_notifications() {
        match n {
            Notification::CallUp { op: Some(op), .. } if call_ops.remove(&(i, op)).is_some() => {
                calls.up += 1
            }
            Notification::CallFailed { op, .. } if call_ops.remove(&(i, op)).is_some() => {
                calls.failed += 1
            }
            _ => {}
        }
    }
    calls.success_rate = ratio(calls.up, calls.attempted);

    let lookups = run_lookups(&mut net, s.lookups, 50);
    let resolves = run_resolves(&mut net, s.resolves, 50);
    let traffic = net.traffic().clone();
    let delivered_or_lost = traffic.delivered + traffic.lost + traffic.in_flight;
    Ok(Metrics {
        scenario: s.clone(),
        joins,
        lookups,
        resolves,
        calls,
        releases,
        crashes,
        conservation_holds: traffic.total_sent() == delivered_or_lost,
        traffic,
        final_time_ms: net.now().0,
    })
}

//! Desk-scale acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use num_bigint::BigUint;
use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use iaxkad::endpoint::Endpoint;
use iaxkad::engine::{EngineConfig, Notification, OpId};
use iaxkad::identity::{xor_distance, Distance, KademliaParams, PeerId};
use iaxkad::routing::RoutingTable;
use iaxkad::sim::scenario::{run_lookups, run_resolves, CallSpec, Scheduled};
use iaxkad::sim::{measure_scaling, run_scenario, sim_address, LinkModel, Scenario, SimNet};
use iaxkad::time::Timestamp;
use iaxkad::wire::golden::fixtures;
use iaxkad::wire::{
    decode_frame, encode_frame, Frame, FullFrame, InformationElement, MessageKind, MiniFrame,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("took {took:.1?}, limit {limit:?}"))
}

fn big(d: &Distance) -> BigUint {
    BigUint::from_bytes_be(d.as_bytes())
}

fn xor_laws() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cases = 0;
    for bits in [8u32, 160] {
        for _ in 0..10_000 {
            let (a, b, c) = (
                PeerId::random(&mut rng, bits),
                PeerId::random(&mut rng, bits),
                PeerId::random(&mut rng, bits),
            );
            let (ab, ba, bc, ac) = (
                xor_distance(&a, &b),
                xor_distance(&b, &a),
                xor_distance(&b, &c),
                xor_distance(&a, &c),
            );
            ensure(ab == ba, || format!("symmetry fails for {a:?}, {b:?}"))?;
            ensure(xor_distance(&a, &a).is_zero(), || {
                format!("d(a, a) != 0 for {a:?}")
            })?;
            ensure(ab.is_zero() == (a == b), || {
                format!("identity fails for {a:?}, {b:?}")
            })?;
            ensure(big(&ac) <= big(&ab) + big(&bc), || {
                format!("triangle fails for {a:?}, {b:?}, {c:?}")
            })?;
            // Unidirectionality: the only key at distance d(a, b) from a is b.
            let w = a.to_be_bytes(bits);
            let unique = ab.as_bytes()[32 - w.len()..]
                .iter()
                .zip(&w)
                .map(|(x, y)| x ^ y)
                .collect::<Vec<_>>();
            ensure(PeerId::from_be_bytes(&unique, bits) == Ok(b), || {
                format!("unidirectionality fails for {a:?}")
            })?;
            ensure(c == b || ac != ab, || {
                format!("two keys at one distance from {a:?}")
            })?;
            cases += 1;
        }
    }
    within(start, Duration::from_secs(5))?;
    Ok(format!("{cases} cases at B=8 and B=160, zero violations"))
}

fn routing_invariants() -> Outcome {
    let params = KademliaParams {
        k: 20,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let local = PeerId::random(&mut rng, params.bits);
    let mut table = RoutingTable::new(local, params);
    let mut known: Vec<PeerId> = Vec::new();
    let mut now = Timestamp::ZERO;
    for op in 0..10_000u32 {
        now = now + Duration::from_millis(rng.gen_range(0..20 * 60_000));
        match rng.gen_range(0..10) {
            0..=6 => {
                // Bias toward the local id so the splittable leaf keeps splitting.
                let shared = rng.gen_range(0..24);
                let mut id = PeerId::random(&mut rng, params.bits);
                for b in 0..shared {
                    id = id.with_bit(b, params.bits, local.bit(b, params.bits));
                }
                if rng.gen_bool(0.2) && !known.is_empty() {
                    id = known[rng.gen_range(0..known.len())];
                }
                if id == local {
                    continue;
                }
                let ep = Endpoint::simulated(rng.next_u32() >> 8);
                table
                    .observe(id, ep, now)
                    .map_err(|e| format!("op {op}: {e}"))?;
                known.push(id);
            }
            7..=8 => {
                if !known.is_empty() {
                    table.mark_offline(&known[rng.gen_range(0..known.len())], now);
                }
            }
            _ => {
                for gone in table.purge_expired(now) {
                    ensure(table.get(&gone).is_none(), || {
                        format!("op {op}: purged contact still present")
                    })?;
                }
            }
        }
        table
            .check_invariants()
            .map_err(|e| format!("op {op}: {e}"))?;
        for leaf in table.leaves() {
            ensure(leaf.contacts.len() <= params.k, || {
                format!("op {op}: leaf over capacity")
            })?;
        }
        ensure(table.get(&local).is_none(), || {
            format!("op {op}: table holds its own id")
        })?;
    }
    Ok(format!(
        "10000 operations, {} leaves, {} contacts, zero violations",
        table.leaf_count(),
        table.len()
    ))
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut net = SimNet::new(EngineConfig::default(), LinkModel::default(), 3);
    let failed = net.bootstrap(200);
    ensure(failed == 0, || format!("{failed} joins failed"))?;
    let m = run_lookups(&mut net, 1000, 50);
    ensure(m.exact == 1000, || {
        format!("{} of 1000 lookups matched the oracle", m.exact)
    })?;
    within(start, Duration::from_secs(60))?;
    Ok(format!(
        "1000/1000 exact, mean rounds {:.2}, {:.1?}",
        m.mean_rounds,
        start.elapsed()
    ))
}

fn resolution() -> Outcome {
    let start = Instant::now();
    let mut net = SimNet::new(EngineConfig::default(), LinkModel::default(), 4);
    let failed = net.bootstrap(500);
    ensure(failed == 0, || format!("{failed} joins failed"))?;
    let r = run_resolves(&mut net, 500, 50);
    ensure(r.found == 500 && r.resolvable == 500, || {
        format!("{} of 500 callees resolved", r.found)
    })?;

    let mut up = 0;
    for _ in 0..10 {
        let mut pending = BTreeSet::new();
        for _ in 0..50 {
            let caller = net.rng().gen_range(0..500);
            let callee = (caller + net.rng().gen_range(1..500)) % 500;
            let op = net
                .call(caller, &sim_address(callee))
                .map_err(|e| e.to_string())?;
            pending.insert((caller, op));
        }
        net.run_until_idle();
        for (_, i, n) in net.take_notifications() {
            if let Notification::CallUp { op: Some(op), .. } = n {
                if pending.remove(&(i, op)) {
                    up += 1;
                }
            }
        }
    }
    ensure(up == 500, || format!("{up} of 500 calls reached up"))?;
    within(start, Duration::from_secs(60))?;
    Ok(format!(
        "500/500 resolved, 500/500 calls up, {:.1?}",
        start.elapsed()
    ))
}

fn log_scaling() -> Outcome {
    let start = Instant::now();
    let rows =
        measure_scaling(&[256, 1024], 5, KademliaParams::default()).map_err(|e| e.to_string())?;
    let (small, large) = (&rows[0], &rows[1]);
    let ratio = large.mean_rounds / small.mean_rounds;
    let summary = format!(
        "N=256 rounds {:.2}, N=1024 rounds {:.2}, ratio {:.2}, {:.1?}",
        small.mean_rounds,
        large.mean_rounds,
        ratio,
        start.elapsed()
    );
    ensure(small.lookups == 500 && large.lookups == 500, || {
        format!("lookups did not all complete: {summary}")
    })?;
    ensure(
        small.mean_rounds <= 10.0 && large.mean_rounds <= 12.0 && ratio <= 1.8,
        || summary.clone(),
    )?;
    within(start, Duration::from_secs(120))?;
    Ok(summary)
}

fn release_semantics() -> Outcome {
    let config = EngineConfig::default();
    let alpha = config.params.alpha as u64;
    let mut net = SimNet::new(config, LinkModel::default(), 6);
    let failed = net.bootstrap(300);
    ensure(failed == 0, || format!("{failed} joins failed"))?;
    let mut leavers = sample(net.rng(), 300, 30).into_vec();
    leavers.sort();
    let leaving: BTreeSet<usize> = leavers.iter().copied().collect();
    let survivors: Vec<usize> = (0..300).filter(|i| !leaving.contains(i)).collect();

    let mut worst = 0.0f64;
    for &r in &leavers {
        let rid = net.node(r).peer_id();
        let direct: Vec<usize> = net
            .node(r)
            .table()
            .all_contacts(false)
            .iter()
            .filter_map(|c| net.index_of(c.endpoint))
            .filter(|j| net.is_live(*j))
            .collect();
        let holders: Vec<usize> = survivors
            .iter()
            .copied()
            .filter(|&j| net.node(j).table().get(&rid).is_some())
            .collect();
        let m = direct.len() as u64;
        let floods_before = net.traffic().regrel_by_flood.clone();

        net.release(r).map_err(|e| e.to_string())?;
        net.run_until_idle();

        let new: Vec<u64> = net
            .traffic()
            .regrel_by_flood
            .iter()
            .filter(|(f, _)| !floods_before.contains_key(f))
            .map(|(_, n)| *n)
            .collect();
        ensure(new.len() == 1, || {
            format!("release of {r} produced {} floods", new.len())
        })?;
        let bound = m * (1 + alpha + alpha.pow(2) + alpha.pow(3));
        ensure(new[0] <= bound, || {
            format!("release of {r}: {} REGREL frames, bound {bound}", new[0])
        })?;
        worst = worst.max(new[0] as f64 / bound.max(1) as f64);
        // Tables are asymmetric: a peer the releaser knows may never have
        // stored the releaser, and then has nothing to mark.
        for j in direct.into_iter().filter(|j| holders.contains(j)) {
            let c = net.node(j).table().get(&rid);
            ensure(c.is_some_and(|c| !c.is_online()), || {
                format!("contact {j} of {r} does not show it offline")
            })?;
        }
        for j in holders {
            ensure(net.node(j).table().get(&rid).is_some(), || {
                format!("peer {j} removed released {r}")
            })?;
        }
    }

    // Released callees must come back not_found.
    let mut pending = BTreeMap::new();
    for &r in &leavers {
        let who = survivors[net.rng().gen_range(0..survivors.len())];
        let op = net
            .resolve(who, &sim_address(r))
            .map_err(|e| e.to_string())?;
        pending.insert((who, op), r);
    }
    net.run_until_idle();
    let mut not_found = 0;
    for (_, i, n) in net.take_notifications() {
        if let Notification::Resolved { op, contact, .. } = n {
            if pending.remove(&(i, op)).is_some() && contact.is_none() {
                not_found += 1;
            }
        }
    }
    ensure(not_found == leavers.len(), || {
        format!("{not_found} of {} released peers not found", leavers.len())
    })?;

    let l = run_lookups(&mut net, 500, 50);
    let rate = l.exact as f64 / l.issued as f64;
    ensure(rate >= 0.99, || {
        format!("survivor lookups {:.3} exact", rate)
    })?;
    Ok(format!(
        "30 releases, peak REGREL use {:.0}% of bound, 30/30 not_found, survivor lookups {}/{} exact",
        worst * 100.0,
        l.exact,
        l.issued
    ))
}

fn offline_expiry() -> Outcome {
    let mut net = SimNet::new(EngineConfig::default(), LinkModel::default(), 7);
    ensure(net.bootstrap(3) == 0, || "join failed".into())?;
    let (b, c) = (net.node(1).peer_id(), net.node(2).peer_id());
    net.release(1).map_err(|e| e.to_string())?;
    net.run_until_idle();
    let gone_at = net.now();
    net.run_for(Duration::from_secs(2 * 3600));
    net.release(2).map_err(|e| e.to_string())?;
    net.run_until_idle();
    // Just past 25 h for b: the sweep at that point sees b offline over 24 h
    // and c offline 23 h.
    net.run_until(gone_at + Duration::from_secs(25 * 3600 + 60));
    let table = net.node(0).table();
    let b_offline = table.get(&b).map(|x| x.offline_since);
    let c_entry = table.get(&c);
    ensure(b_offline.is_none(), || {
        "contact offline 25 h still present".into()
    })?;
    ensure(c_entry.is_some_and(|x| !x.is_online()), || {
        "contact offline 23 h missing".into()
    })?;
    Ok("25 h offline purged, 23 h offline kept".into())
}

fn loss_resilience() -> Outcome {
    let link = LinkModel {
        loss: 0.10,
        ..Default::default()
    };
    let mut net = SimNet::new(EngineConfig::default(), link, 8);
    let failed = net.bootstrap(100);
    ensure(failed == 0, || {
        format!("{failed} of 100 joins failed at 10% loss")
    })?;

    let mut calls: Vec<(usize, OpId)> = Vec::new();
    for _ in 0..10 {
        let a = net.rng().gen_range(0..100);
        let b = (a + net.rng().gen_range(1..100)) % 100;
        calls.push((a, net.call(a, &sim_address(b)).map_err(|e| e.to_string())?));
    }
    net.run_until_idle();
    let mut up = Vec::new();
    for (_, i, n) in net.take_notifications() {
        if let Notification::CallUp {
            call, op: Some(op), ..
        } = n
        {
            if calls.contains(&(i, op)) {
                up.push((i, call));
            }
        }
    }
    ensure(!up.is_empty(), || "no call came up".into())?;

    let before = net.traffic().clone();
    let per_call = 50;
    for &(i, call) in &up {
        for _ in 0..per_call {
            net.send_media(i, call, &[0u8; 160])
                .map_err(|e| e.to_string())?;
        }
    }
    net.run_until_idle();
    let after = net.traffic();
    let minis = after.sent.get("MINI").copied().unwrap_or(0)
        - before.sent.get("MINI").copied().unwrap_or(0);
    ensure(minis == (up.len() * per_call) as u64, || {
        format!("{minis} mini frames sent")
    })?;
    ensure(
        after.sent_of(MessageKind::Ack) == before.sent_of(MessageKind::Ack),
        || "media drew ACKs".into(),
    )?;
    ensure(after.retransmitted == before.retransmitted, || {
        "media phase retransmitted frames".into()
    })?;
    ensure(!after.retransmitted.contains_key("MINI"), || {
        "mini frame retransmitted".into()
    })?;
    let retx: u64 = after.retransmitted.values().sum();
    Ok(format!(
        "100/100 joins, {retx} control retransmissions, {minis} mini frames with 0 ACKs and 0 retransmissions"
    ))
}

fn random_frame(rng: &mut ChaCha8Rng) -> Frame {
    if rng.gen_bool(0.3) {
        let mut payload = vec![0u8; rng.gen_range(0..200)];
        rng.fill_bytes(&mut payload);
        return Frame::Mini(MiniFrame {
            source_call: rng.gen_range(0..=0x7fff),
            timestamp_low: rng.gen(),
            payload,
        });
    }
    let kind = MessageKind::ALL[rng.gen_range(0..MessageKind::ALL.len())];
    let ies = (0..rng.gen_range(0..6))
        .map(|_| {
            let mut data = vec![0u8; rng.gen_range(0..=255)];
            rng.fill_bytes(&mut data);
            InformationElement::new(rng.gen(), data)
        })
        .collect();
    Frame::Full(FullFrame {
        source_call: rng.gen_range(0..=0x7fff),
        dest_call: rng.gen_range(0..=0x7fff),
        retransmission: rng.gen(),
        timestamp_ms: rng.gen(),
        oseqno: rng.gen(),
        iseqno: rng.gen(),
        kind,
        ies,
    })
}

fn codec() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for n in 0..100_000 {
        let f = random_frame(&mut rng);
        let bytes = encode_frame(&f).map_err(|e| format!("frame {n}: {e}"))?;
        let back = decode_frame(&bytes).map_err(|e| format!("frame {n}: {e}"))?;
        ensure(back == f, || format!("frame {n} decoded differently"))?;
        ensure(encode_frame(&back).as_deref() == Ok(&bytes[..]), || {
            format!("frame {n} re-encoded differently")
        })?;
    }
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let list = fixtures();
    for (name, frame) in &list {
        let stored =
            std::fs::read(dir.join(format!("{name}.bin"))).map_err(|e| format!("{name}: {e}"))?;
        let bytes = encode_frame(frame).map_err(|e| e.to_string())?;
        ensure(bytes == stored, || {
            format!("{name}: encoding differs from stored fixture")
        })?;
        ensure(decode_frame(&stored).as_ref() == Ok(frame), || {
            format!("{name}: stored fixture decodes differently")
        })?;
    }
    Ok(format!(
        "100000 round-trips byte-exact, {} fixtures match",
        list.len()
    ))
}

fn determinism() -> Outcome {
    let scenario = Scenario {
        params: KademliaParams {
            k: 10,
            ..Default::default()
        },
        n_peers: 60,
        seed: 10,
        link: LinkModel {
            loss: 0.05,
            jitter_ms: 5,
            ..Default::default()
        },
        release_schedule: vec![
            Scheduled {
                at_ms: 1_000,
                peer: 4,
            },
            Scheduled {
                at_ms: 4_000,
                peer: 9,
            },
        ],
        crash_schedule: vec![Scheduled {
            at_ms: 2_000,
            peer: 13,
        }],
        call_workload: vec![
            CallSpec {
                at_ms: 500,
                caller: 1,
                callee: 2,
            },
            CallSpec {
                at_ms: 600,
                caller: 3,
                callee: 9,
            },
        ],
        lookups: 100,
        resolves: 100,
        ..Default::default()
    };
    let a = run_scenario(&scenario)
        .map_err(|e| e.to_string())?
        .to_json();
    let b = run_scenario(&scenario)
        .map_err(|e| e.to_string())?
        .to_json();
    ensure(a == b, || "two runs with one seed differ".into())?;
    let other = run_scenario(&Scenario {
        seed: 11,
        ..scenario
    })
    .map_err(|e| e.to_string())?
    .to_json();
    ensure(other != a, || {
        "a different seed gave identical output".into()
    })?;
    Ok(format!("{} bytes identical across runs", a.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("xor metric laws", xor_laws),
        ("routing table invariants", routing_invariants),
        ("lookup matches oracle, N=200", oracle_equivalence),
        ("resolution and call setup, N=500", resolution),
        ("lookup rounds grow logarithmically", log_scaling),
        ("release semantics, N=300", release_semantics),
        ("offline expiry", offline_expiry),
        ("joins under 10% loss, N=100", loss_resilience),
        ("codec round-trips and fixtures", codec),
        ("determinism", determinism),
    ];
    let mut failures = 0;
    for (n, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        match check() {
            Ok(detail) => println!(
                "PASS {:>2} {name}: {detail} [{:.1?}]",
                n + 1,
                start.elapsed()
            ),
            Err(why) => {
                failures += 1;
                println!("FAIL {:>2} {name}: {why} [{:.1?}]", n + 1, start.elapsed());
            }
        }
    }
    println!("{} passed, {failures} failed", criteria.len() - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}

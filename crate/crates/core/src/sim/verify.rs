//! Invariant and oracle checks over a converged scenario network.

use serde::Serialize;

use super::oracle::closest_region_complete;
use super::scenario::{run_lookups, run_resolves, run_scenario, Scenario};
use super::{SimError, SimNet};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check {
        name,
        passed,
        detail,
    }
}

/// Joins `scenario.n_peers` peers, then checks table invariants, closest
/// region completeness, lookup and resolve agreement with the oracles,
/// frame conservation and run-to-run determinism.
pub fn verify(scenario: &Scenario) -> Result<VerifyReport, SimError> {
    scenario.validate()?;
    let mut net = SimNet::new(
        scenario.engine_config(),
        scenario.link.clone(),
        scenario.seed,
    );
    let failed = net.bootstrap(scenario.n_peers);
    let mut checks = vec![check(
        "joins",
        failed == 0,
        format!("{failed} of {} failed", scenario.n_peers),
    )];

    let broken: Vec<String> = (0..net.len())
        .filter_map(|i| {
            net.node(i)
                .table()
                .check_invariants()
                .err()
                .map(|e| format!("peer {i}: {e}"))
        })
        .collect();
    checks.push(check(
        "routing invariants",
        broken.is_empty(),
        broken.join("; "),
    ));

    let live = net.live_peers();
    let incomplete = live
        .iter()
        .filter(|&&i| !closest_region_complete(&net, i))
        .count();
    checks.push(check(
        "closest region",
        incomplete == 0,
        format!("{incomplete} of {} peers incomplete", live.len()),
    ));

    let l = run_lookups(&mut net, scenario.lookups, 50);
    checks.push(check(
        "lookup oracle",
        l.exact == l.issued,
        format!(
            "{} of {} exact, mean rounds {:.2}",
            l.exact, l.issued, l.mean_rounds
        ),
    ));

    let r = run_resolves(&mut net, scenario.resolves, 50);
    checks.push(check(
        "resolve oracle",
        r.correct == r.issued,
        format!("{} of {} correct", r.correct, r.issued),
    ));

    let t = net.traffic();
    let accounted = t.delivered + t.lost + t.in_flight;
    checks.push(check(
        "frame conservation",
        t.total_sent() == accounted,
        format!(
            "sent {}, delivered + lost + in flight {accounted}",
            t.total_sent()
        ),
    ));

    let a = run_scenario(scenario)?.to_json();
    let b = run_scenario(scenario)?.to_json();
    checks.push(check("determinism", a == b, format!("{} bytes", a.len())));

    Ok(VerifyReport { checks })
}

//! Lookup cost as the network grows.

use serde::Serialize;

use super::scenario::run_lookups;
use super::{LinkModel, SimError, SimNet};
use crate::engine::EngineConfig;
use crate::identity::KademliaParams;
use crate::wire::MessageKind;

pub const LOOKUPS_PER_SIZE: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub n: usize,
    pub lookups: usize,
    pub mean_rounds: f64,
    /// FIND_CALLEES requests plus replies, retransmissions included.
    pub mean_messages: f64,
    pub exact: usize,
}

/// Builds a fresh static network per size and measures random lookups.
pub fn measure_scaling(
    sizes: &[usize],
    seed: u64,
    params: KademliaParams,
) -> Result<Vec<ScalingRow>, SimError> {
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SimError::Config("sizes must be strictly ascending".into()));
    }
    params
        .validate()
        .map_err(|e| SimError::Config(e.to_string()))?;
    let config = EngineConfig {
        params,
        ..Default::default()
    };
    let mut rows = Vec::new();
    for &n in sizes {
        let mut net = SimNet::new(
            config.clone(),
            LinkModel::default(),
            seed ^ (n as u64).rotate_left(32),
        );
        net.bootstrap(n);
        net.take_notifications();
        let before = lookup_frames(&net);
        let m = run_lookups(&mut net, LOOKUPS_PER_SIZE, 50);
        let messages = lookup_frames(&net) - before;
        rows.push(ScalingRow {
            n,
            lookups: m.completed,
            mean_rounds: m.mean_rounds,
            mean_messages: if m.completed == 0 {
                0.0
            } else {
                messages as f64 / m.completed as f64
            },
            exact: m.exact,
        });
    }
    Ok(rows)
}

fn lookup_frames(net: &SimNet) -> u64 {
    let t = net.traffic();
    [MessageKind::FindCallees, MessageKind::ReplyContacts]
        .iter()
        .map(|k| t.sent_of(*k) + t.retransmitted.get(k.name()).copied().unwrap_or(0))
        .sum()
}

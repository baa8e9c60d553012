//! Ground truth computed from global knowledge, independent of any table.

use super::SimNet;
use crate::identity::{derive_peer_id, xor_distance, PeerId};

/// The `k` live peers closest to `target`, by brute-force sort.
pub fn oracle_k_closest(net: &SimNet, target: &PeerId, k: usize) -> Vec<PeerId> {
    let mut live: Vec<PeerId> = net
        .live_peers()
        .into_iter()
        .map(|i| net.node(i).peer_id())
        .collect();
    live.sort_by_key(|p| xor_distance(target, p));
    live.truncate(k);
    live
}

/// As [`oracle_k_closest`], leaving out one peer (normally the initiator,
/// which never lists itself in its own lookup results).
pub fn oracle_k_closest_excluding(
    net: &SimNet,
    target: &PeerId,
    k: usize,
    exclude: &PeerId,
) -> Vec<PeerId> {
    let mut out = oracle_k_closest(net, target, k + 1);
    out.retain(|p| p != exclude);
    out.truncate(k);
    out
}

/// Whether a live peer holds exactly this address.
pub fn oracle_resolvable(net: &SimNet, address: &str) -> bool {
    let Ok(id) = derive_peer_id(address, &net.config().params) else {
        return false;
    };
    let wanted = address.to_lowercase();
    net.live_peers()
        .into_iter()
        .any(|i| net.node(i).peer_id() == id && net.node(i).address() == wanted)
}

/// Whether peer `i` knows, as online contacts, every one of the `k` live
/// peers closest to its own identifier.
pub fn closest_region_complete(net: &SimNet, i: usize) -> bool {
    let me = net.node(i).peer_id();
    let k = net.config().params.k;
    oracle_k_closest_excluding(net, &me, k, &me)
        .iter()
        .all(|p| net.node(i).table().get(p).is_some_and(|c| c.is_online()))
}

//! Iterative lookup state.
//!
//! One instance drives a FIND_CALLEES, FIND_CALLEE, registration or refresh
//! search. It is transport-agnostic: the engine asks for the next batch of
//! peers to query, reports replies and failures, and sends the frames.
//!
//! Rounds:
//! 1. seed the searchlist with the `alpha` closest online contacts;
//! 2. query them in parallel;
//! 3. merge each reply's contacts, dropping peers that failed to answer;
//! 4. when the round drains, compare the head of the searchlist with the
//!    previous closest neighbour. If it moved, query the next `alpha`
//!    unqueried candidates; if not, query every unqueried candidate among
//!    the `k` closest;
//! 5. stop once the `k` closest known candidates have all answered.

use std::collections::{BTreeMap, BTreeSet};

use crate::endpoint::Endpoint;
use crate::identity::{xor_distance, PeerId};
use crate::wire::DeliveryKey;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LookupMode {
    /// k closest peers to a key (FIND_CALLEES).
    Callees,
    /// Contact record of one peer address (FIND_CALLEE).
    Callee { address: String },
    /// Registration toward the node's own key (REGREQ).
    Register,
    /// Bucket refresh driven by PING frames carrying the key.
    Probe,
}

#[derive(Debug, Clone)]
pub struct LookupState {
    pub target: PeerId,
    pub mode: LookupMode,
    k: usize,
    alpha: usize,
    /// Every live candidate seen, ascending by distance to `target`. Only
    /// the first `k` are ever queried or reported; the tail backfills the
    /// window when a candidate fails.
    searchlist: Vec<(PeerId, Endpoint)>,
    closest_neighbor: Option<PeerId>,
    queried: BTreeSet<PeerId>,
    pub(crate) inflight: BTreeMap<PeerId, Option<DeliveryKey>>,
    responded: BTreeSet<PeerId>,
    failed: BTreeSet<PeerId>,
    pub rounds: u32,
    pub queries: u32,
    /// Smallest distance among peers that answered, sampled after each round.
    pub progress: Vec<Option<crate::identity::Distance>>,
}

impl LookupState {
    pub fn new(
        target: PeerId,
        mode: LookupMode,
        k: usize,
        alpha: usize,
        seed: Vec<(PeerId, Endpoint)>,
    ) -> Self {
        let mut s = LookupState {
            target,
            mode,
            k,
            alpha,
            searchlist: Vec::new(),
            closest_neighbor: None,
            queried: BTreeSet::new(),
            inflight: BTreeMap::new(),
            responded: BTreeSet::new(),
            failed: BTreeSet::new(),
            rounds: 0,
            queries: 0,
            progress: Vec::new(),
        };
        s.merge(seed, None);
        s.searchlist.truncate(alpha.min(k));
        s.closest_neighbor = s.searchlist.first().map(|c| c.0);
        s
    }

    pub fn closest_neighbor(&self) -> Option<PeerId> {
        self.closest_neighbor
    }

    pub fn searchlist(&self) -> &[(PeerId, Endpoint)] {
        &self.searchlist
    }

    pub fn has_queried(&self, peer: &PeerId) -> bool {
        self.queried.contains(peer)
    }

    pub fn is_inflight(&self, peer: &PeerId) -> bool {
        self.inflight.contains_key(peer)
    }

    pub fn round_drained(&self) -> bool {
        self.inflight.is_empty()
    }

    fn merge(
        &mut self,
        contacts: impl IntoIterator<Item = (PeerId, Endpoint)>,
        local: Option<PeerId>,
    ) {
        for (id, ep) in contacts {
            if Some(id) == local
                || self.failed.contains(&id)
                || self.searchlist.iter().any(|c| c.0 == id)
            {
                continue;
            }
            self.searchlist.push((id, ep));
        }
        let target = self.target;
        self.searchlist.sort_by_key(|c| xor_distance(&target, &c.0));
    }

    fn window(&self) -> impl Iterator<Item = &(PeerId, Endpoint)> {
        self.searchlist.iter().take(self.k)
    }

    /// Picks the next batch, marking it queried and in flight. `None` means
    /// the lookup has converged.
    pub fn next_batch(&mut self) -> Option<Vec<(PeerId, Endpoint)>> {
        debug_assert!(self.inflight.is_empty());
        let fresh: Vec<(PeerId, Endpoint)> = self
            .window()
            .filter(|c| !self.queried.contains(&c.0))
            .copied()
            .collect();
        if fresh.is_empty() {
            return None;
        }
        let improved =
            self.rounds == 0 || self.searchlist.first().map(|c| c.0) != self.closest_neighbor;
        self.closest_neighbor = self.searchlist.first().map(|c| c.0);
        let batch: Vec<(PeerId, Endpoint)> = if improved {
            fresh.into_iter().take(self.alpha).collect()
        } else {
            fresh
        };
        self.rounds += 1;
        for (id, _) in &batch {
            self.queried.insert(*id);
            self.inflight.insert(*id, None);
        }
        self.queries += batch.len() as u32;
        Some(batch)
    }

    /// Folds a reply into the searchlist.
    pub fn on_response(&mut self, peer: PeerId, contacts: Vec<(PeerId, Endpoint)>, local: PeerId) {
        if self.inflight.remove(&peer).is_none() {
            return;
        }
        self.responded.insert(peer);
        self.merge(contacts, Some(local));
        if self.inflight.is_empty() {
            self.sample_progress();
        }
    }

    /// A peer that answered without being asked (registration forwarding).
    pub fn on_unsolicited(
        &mut self,
        peer: PeerId,
        endpoint: Endpoint,
        contacts: Vec<(PeerId, Endpoint)>,
        local: PeerId,
    ) {
        if self.queried.contains(&peer) || peer == local {
            return;
        }
        self.queried.insert(peer);
        self.responded.insert(peer);
        self.merge(
            std::iter::once((peer, endpoint)).chain(contacts),
            Some(local),
        );
    }

    /// Drops a non-responder from the searchlist.
    pub fn on_failure(&mut self, peer: PeerId) -> Option<DeliveryKey> {
        let key = self.inflight.remove(&peer)?;
        self.failed.insert(peer);
        self.searchlist.retain(|c| c.0 != peer);
        if self.inflight.is_empty() {
            self.sample_progress();
        }
        key
    }

    fn sample_progress(&mut self) {
        let best = self
            .responded
            .iter()
            .map(|p| xor_distance(&self.target, p))
            .min();
        self.progress.push(best);
    }

    /// Answered candidates among the k closest, nearest first.
    pub fn results(&self) -> Vec<(PeerId, Endpoint)> {
        self.window()
            .filter(|c| self.responded.contains(&c.0))
            .copied()
            .collect()
    }

    pub fn responded_count(&self) -> usize {
        self.responded.len()
    }

    /// Everything still in flight; used when the lookup is abandoned early.
    pub fn drain_inflight(&mut self) -> Vec<DeliveryKey> {
        std::mem::take(&mut self.inflight)
            .into_values()
            .flatten()
            .collect()
    }
}

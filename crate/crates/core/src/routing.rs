//! Per-node contact store.
//!
//! The table is a binary prefix tree whose leaves are k-buckets. Leaves cover
//! disjoint ranges of the key space and together cover all of it. Only the
//! leaf holding the local identifier may split, so in practice the tree is a
//! spine: one sibling leaf per shared-prefix length plus the local leaf.
//!
//! A full leaf that cannot split admits a newcomer only when the newcomer
//! belongs to the `k` closest contacts the table knows of. Otherwise an
//! offline slot-holder is replaced, or the newcomer is dropped.

use std::fmt::Write as _;

use rand::RngCore;
use thiserror::Error;

use crate::endpoint::Endpoint;
use crate::identity::{xor_distance, Distance, KademliaParams, PeerId};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RoutingError {
    #[error("the local identifier cannot be stored as a contact")]
    SelfContact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContactStatus {
    Online,
    Offline,
}

impl ContactStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            ContactStatus::Online => "online",
            ContactStatus::Offline => "offline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contact {
    pub peer_id: PeerId,
    pub endpoint: Endpoint,
    pub last_seen: Timestamp,
    /// Set exactly when the contact is offline.
    pub offline_since: Option<Timestamp>,
}

impl Contact {
    pub fn new(peer_id: PeerId, endpoint: Endpoint, now: Timestamp) -> Self {
        Contact {
            peer_id,
            endpoint,
            last_seen: now,
            offline_since: None,
        }
    }

    pub fn status(&self) -> ContactStatus {
        if self.offline_since.is_some() {
            ContactStatus::Offline
        } else {
            ContactStatus::Online
        }
    }

    pub fn is_online(&self) -> bool {
        self.offline_since.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObserveOutcome {
    Inserted,
    Updated,
    SplitInserted,
    /// A slot-holder was evicted to admit the newcomer.
    Replaced {
        evicted: PeerId,
    },
    Discarded,
}

#[derive(Debug, Clone)]
struct Leaf {
    prefix: PeerId,
    depth: u32,
    /// Least recently seen first.
    contacts: Vec<Contact>,
}

impl Leaf {
    fn covers(&self, id: &PeerId, bits: u32) -> bool {
        id.prefix(self.depth, bits) == self.prefix
    }

    /// Smallest XOR distance from `target` to any key in this leaf.
    fn min_distance(&self, target: &PeerId, bits: u32) -> Distance {
        xor_distance(&target.prefix(self.depth, bits), &self.prefix)
    }
}

/// Read-only view of one leaf, for invariant checks and diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct LeafView<'a> {
    pub prefix: PeerId,
    pub depth: u32,
    pub contacts: &'a [Contact],
}

#[derive(Debug, Clone)]
pub struct RoutingTable {
    local_id: PeerId,
    params: KademliaParams,
    /// Sorted by prefix, i.e. in key-space order.
    leaves: Vec<Leaf>,
}

impl RoutingTable {
    pub fn new(local_id: PeerId, params: KademliaParams) -> Self {
        RoutingTable {
            local_id,
            params,
            leaves: vec![Leaf {
                prefix: PeerId::ZERO,
                depth: 0,
                contacts: Vec::new(),
            }],
        }
    }

    pub fn local_id(&self) -> PeerId {
        self.local_id
    }

    pub fn params(&self) -> &KademliaParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.leaves.iter().map(|l| l.contacts.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.iter().all(|l| l.contacts.is_empty())
    }

    pub fn online_len(&self) -> usize {
        self.leaves
            .iter()
            .flat_map(|l| &l.contacts)
            .filter(|c| c.is_online())
            .count()
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    pub fn leaves(&self) -> impl Iterator<Item = LeafView<'_>> {
        self.leaves.iter().map(|l| LeafView {
            prefix: l.prefix,
            depth: l.depth,
            contacts: &l.contacts,
        })
    }

    pub fn get(&self, peer_id: &PeerId) -> Option<&Contact> {
        let leaf = &self.leaves[self.leaf_index(peer_id)];
        leaf.contacts.iter().find(|c| c.peer_id == *peer_id)
    }

    fn leaf_index(&self, id: &PeerId) -> usize {
        let bits = self.params.bits;
        self.leaves
            .iter()
            .position(|l| l.covers(id, bits))
            .expect("leaves cover the key space")
    }

    fn split(&mut self, idx: usize) {
        let bits = self.params.bits;
        let leaf = self.leaves.remove(idx);
        let depth = leaf.depth + 1;
        let mut low = Leaf {
            prefix: leaf.prefix,
            depth,
            contacts: Vec::new(),
        };
        let mut high = Leaf {
            prefix: leaf.prefix.with_bit(leaf.depth, bits, true),
            depth,
            contacts: Vec::new(),
        };
        for c in leaf.contacts {
            if c.peer_id.bit(leaf.depth, bits) {
                high.contacts.push(c);
            } else {
                low.contacts.push(c);
            }
        }
        self.leaves.insert(idx, high);
        self.leaves.insert(idx, low);
    }

    /// Records that `contact` was heard from at `now`.
    pub fn observe_contact(
        &mut self,
        contact: Contact,
        now: Timestamp,
    ) -> Result<ObserveOutcome, RoutingError> {
        if contact.peer_id == self.local_id {
            return Err(RoutingError::SelfContact);
        }
        let bits = self.params.bits;
        let k = self.params.k;

        let idx = self.leaf_index(&contact.peer_id);
        if let Some(pos) = self.leaves[idx]
            .contacts
            .iter()
            .position(|c| c.peer_id == contact.peer_id)
        {
            let mut existing = self.leaves[idx].contacts.remove(pos);
            existing.endpoint = contact.endpoint;
            existing.last_seen = now;
            existing.offline_since = None;
            self.leaves[idx].contacts.push(existing);
            return Ok(ObserveOutcome::Updated);
        }

        let fresh = Contact {
            last_seen: now,
            offline_since: None,
            ..contact
        };
        let mut split = false;
        loop {
            let idx = self.leaf_index(&fresh.peer_id);
            let leaf = &self.leaves[idx];
            if leaf.contacts.len() < k {
                self.leaves[idx].contacts.push(fresh);
                return Ok(if split {
                    ObserveOutcome::SplitInserted
                } else {
                    ObserveOutcome::Inserted
                });
            }
            if leaf.covers(&self.local_id, bits) && leaf.depth < bits {
                self.split(idx);
                split = true;
                continue;
            }

            let to_local = xor_distance(&self.local_id, &fresh.peer_id);
            let closer_known = self
                .leaves
                .iter()
                .flat_map(|l| &l.contacts)
                .filter(|c| c.is_online() && xor_distance(&self.local_id, &c.peer_id) < to_local)
                .count();

            let contacts = &self.leaves[idx].contacts;
            let oldest_offline = contacts
                .iter()
                .enumerate()
                .filter_map(|(i, c)| c.offline_since.map(|t| (t, i)))
                .min()
                .map(|(_, i)| i);
            let victim = match oldest_offline {
                Some(i) => Some(i),
                // The newcomer is inside the closest region: the farthest
                // slot-holder is outside it, so it gives way.
                None if closer_known < k => contacts
                    .iter()
                    .enumerate()
                    .max_by_key(|(_, c)| xor_distance(&self.local_id, &c.peer_id))
                    .map(|(i, _)| i),
                None => None,
            };
            return Ok(match victim {
                Some(i) => {
                    let evicted = self.leaves[idx].contacts.remove(i).peer_id;
                    self.leaves[idx].contacts.push(fresh);
                    ObserveOutcome::Replaced { evicted }
                }
                None => ObserveOutcome::Discarded,
            });
        }
    }

    pub fn observe(
        &mut self,
        peer_id: PeerId,
        endpoint: Endpoint,
        now: Timestamp,
    ) -> Result<ObserveOutcome, RoutingError> {
        self.observe_contact(Contact::new(peer_id, endpoint, now), now)
    }

    /// Marks a contact offline without removing it. The first marking wins.
    pub fn mark_offline(&mut self, peer_id: &PeerId, now: Timestamp) -> bool {
        let idx = self.leaf_index(peer_id);
        match self.leaves[idx]
            .contacts
            .iter_mut()
            .find(|c| c.peer_id == *peer_id)
        {
            Some(c) => {
                c.offline_since.get_or_insert(now);
                true
            }
            None => false,
        }
    }

    /// Drops contacts that have been offline longer than the configured expiry.
    pub fn purge_expired(&mut self, now: Timestamp) -> Vec<PeerId> {
        let expiry = self.params.offline_expiry;
        let mut removed = Vec::new();
        for leaf in &mut self.leaves {
            leaf.contacts.retain(|c| match c.offline_since {
                Some(since) if now.since(since) > expiry => {
                    removed.push(c.peer_id);
                    false
                }
                _ => true,
            });
        }
        removed
    }

    /// Up to `count` contacts ordered by XOR distance to `target`.
    ///
    /// Leaves are visited nearest range first; their distance ranges are
    /// disjoint, so the walk can stop as soon as `count` contacts are in hand.
    pub fn closest_contacts(
        &self,
        target: &PeerId,
        count: usize,
        include_offline: bool,
    ) -> Vec<Contact> {
        let bits = self.params.bits;
        let mut order: Vec<(Distance, usize)> = self
            .leaves
            .iter()
            .enumerate()
            .map(|(i, l)| (l.min_distance(target, bits), i))
            .collect();
        order.sort();

        let mut out = Vec::with_capacity(count);
        for (_, i) in order {
            if out.len() >= count {
                break;
            }
            let mut batch: Vec<&Contact> = self.leaves[i]
                .contacts
                .iter()
                .filter(|c| include_offline || c.is_online())
                .collect();
            batch.sort_by_key(|c| xor_distance(target, &c.peer_id));
            out.extend(batch.into_iter().cloned());
        }
        out.truncate(count);
        out
    }

    pub fn all_contacts(&self, include_offline: bool) -> Vec<Contact> {
        self.leaves
            .iter()
            .flat_map(|l| &l.contacts)
            .filter(|c| include_offline || c.is_online())
            .cloned()
            .collect()
    }

    /// One random key inside each leaf lying farther from the local node than
    /// the leaf that holds `first_contact`.
    pub fn refresh_targets<R: RngCore + ?Sized>(
        &self,
        first_contact: &PeerId,
        rng: &mut R,
    ) -> Result<Vec<PeerId>, RoutingError> {
        if *first_contact == self.local_id {
            return Err(RoutingError::SelfContact);
        }
        let bits = self.params.bits;
        let first = &self.leaves[self.leaf_index(first_contact)];
        let floor = first.min_distance(&self.local_id, bits);
        let mut farther: Vec<&Leaf> = self
            .leaves
            .iter()
            .filter(|l| l.min_distance(&self.local_id, bits) > floor)
            .collect();
        farther.sort_by_key(|l| l.min_distance(&self.local_id, bits));
        Ok(farther
            .into_iter()
            .map(|l| l.prefix.randomize_suffix(l.depth, bits, rng))
            .collect())
    }

    /// `<hex peer_id> <endpoint> <status> <last_seen>`, one contact per line.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for c in self.leaves.iter().flat_map(|l| &l.contacts) {
            let _ = writeln!(
                out,
                "{} {} {} {}",
                c.peer_id.to_hex(self.params.bits),
                c.endpoint,
                c.status().as_str(),
                c.last_seen
            );
        }
        out
    }

    /// Structural checks: capacity, placement, uniqueness, no self-entry,
    /// and leaves forming an exact partition of the key space.
    pub fn check_invariants(&self) -> Result<(), String> {
        let bits = self.params.bits;
        let mut seen = std::collections::BTreeSet::new();
        for leaf in &self.leaves {
            if leaf.contacts.len() > self.params.k {
                return Err(format!(
                    "leaf at depth {} holds {} > k contacts",
                    leaf.depth,
                    leaf.contacts.len()
                ));
            }
            if leaf.prefix.prefix(leaf.depth, bits) != leaf.prefix {
                return Err("leaf prefix has bits below its depth".into());
            }
            for c in &leaf.contacts {
                if c.peer_id == self.local_id {
                    return Err("local id stored as contact".into());
                }
                if !leaf.covers(&c.peer_id, bits) {
                    return Err(format!("{:?} stored outside its leaf range", c.peer_id));
                }
                if !seen.insert(c.peer_id) {
                    return Err(format!("{:?} stored twice", c.peer_id));
                }
            }
        }
        for (i, a) in self.leaves.iter().enumerate() {
            for b in &self.leaves[i + 1..] {
                let d = a.depth.min(b.depth);
                if a.prefix.prefix(d, bits) == b.prefix.prefix(d, bits) {
                    return Err("overlapping leaves".into());
                }
            }
        }
        // Kraft equality: sum of 2^-depth over leaves is exactly one.
        let mut per_depth = vec![0u64; bits as usize + 1];
        for leaf in &self.leaves {
            per_depth[leaf.depth as usize] += 1;
        }
        for d in (1..=bits as usize).rev() {
            if !per_depth[d].is_multiple_of(2) {
                return Err("leaves do not cover the key space".into());
            }
            per_depth[d - 1] += per_depth[d] / 2;
        }
        if per_depth[0] != 1 {
            return Err("leaves do not cover the key space".into());
        }
        let local_leaves = self
            .leaves
            .iter()
            .filter(|l| l.covers(&self.local_id, bits))
            .count();
        if local_leaves != 1 {
            return Err("local id not covered by exactly one leaf".into());
        }
        Ok(())
    }
}

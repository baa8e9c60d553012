//! Retransmission bookkeeping for full frames.
//!
//! Control frames are re-sent on an exponential schedule until the peer
//! answers with an ACK or with any response frame carrying the matching
//! call number and sequence number. Mini frames never pass through here.

use std::collections::BTreeMap;
use std::time::Duration;

use super::codec::mark_retransmission;
use crate::endpoint::Endpoint;
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub initial: Duration,
    /// Retransmissions after the first send.
    pub max_retries: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            initial: Duration::from_millis(500),
            max_retries: 4,
        }
    }
}

impl RetryPolicy {
    /// Time from first send until the sender gives up.
    pub fn give_up_after(&self) -> Duration {
        (0..=self.max_retries)
            .map(|i| self.initial * 2u32.pow(i))
            .sum()
    }
}

/// Identifies one outstanding frame: where it went, the local call number
/// it was sent on, and its outbound sequence number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DeliveryKey {
    pub peer: Endpoint,
    pub call: u16,
    pub seqno: u8,
}

#[derive(Debug, Clone)]
struct Pending<T> {
    bytes: Vec<u8>,
    transmissions: u32,
    interval: Duration,
    next_at: Timestamp,
    token: T,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReliableEvent<T> {
    Retransmit { to: Endpoint, bytes: Vec<u8> },
    TimedOut { key: DeliveryKey, token: T },
}

#[derive(Debug, Clone)]
pub struct ReliableSender<T> {
    policy: RetryPolicy,
    pending: BTreeMap<DeliveryKey, Pending<T>>,
}

impl<T: Clone> ReliableSender<T> {
    pub fn new(policy: RetryPolicy) -> Self {
        ReliableSender {
            policy,
            pending: BTreeMap::new(),
        }
    }

    pub fn policy(&self) -> RetryPolicy {
        self.policy
    }

    /// Registers `bytes` for retransmission and returns the delivery handle.
    /// The caller transmits the first copy itself.
    pub fn track(
        &mut self,
        key: DeliveryKey,
        bytes: Vec<u8>,
        token: T,
        now: Timestamp,
    ) -> DeliveryKey {
        self.pending.insert(
            key,
            Pending {
                bytes,
                transmissions: 1,
                interval: self.policy.initial,
                next_at: now + self.policy.initial,
                token,
            },
        );
        key
    }

    /// An ACK or response arrived; stops retransmission.
    pub fn acknowledge(&mut self, key: &DeliveryKey) -> Option<T> {
        self.pending.remove(key).map(|p| p.token)
    }

    /// Abandons a delivery without reporting a timeout.
    pub fn cancel(&mut self, key: &DeliveryKey) -> Option<T> {
        self.acknowledge(key)
    }

    /// Drops every outstanding delivery.
    pub fn clear(&mut self) {
        self.pending.clear();
    }

    pub fn is_pending(&self, key: &DeliveryKey) -> bool {
        self.pending.contains_key(key)
    }

    pub fn token(&self, key: &DeliveryKey) -> Option<&T> {
        self.pending.get(key).map(|p| &p.token)
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn next_deadline(&self) -> Option<Timestamp> {
        self.pending.values().map(|p| p.next_at).min()
    }

    /// Fires everything due at or before `now`.
    pub fn poll(&mut self, now: Timestamp) -> Vec<ReliableEvent<T>> {
        let due: Vec<DeliveryKey> = self
            .pending
            .iter()
            .filter(|(_, p)| p.next_at <= now)
            .map(|(k, _)| *k)
            .collect();
        let mut out = Vec::new();
        for key in due {
            let p = self.pending.get_mut(&key).expect("due key present");
            if p.transmissions > self.policy.max_retries {
                let p = self.pending.remove(&key).expect("due key present");
                out.push(ReliableEvent::TimedOut {
                    key,
                    token: p.token,
                });
                continue;
            }
            mark_retransmission(&mut p.bytes);
            p.transmissions += 1;
            p.interval *= 2;
            p.next_at = p.next_at + p.interval;
            out.push(ReliableEvent::Retransmit {
                to: key.peer,
                bytes: p.bytes.clone(),
            });
        }
        out
    }
}

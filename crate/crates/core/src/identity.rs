//! Overlay key space: peer identifiers, the XOR metric and bucket indexing.
//!
//! Identifiers are stored as 256-bit big-endian integers. A key space of
//! `bits` width uses only the low `bits` bits, so the same type serves every
//! configured width from 8 up to 256.

use std::cmp::Ordering;
use std::fmt;
use std::time::Duration;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};
use thiserror::Error;

/// Widest supported key, in bits.
pub const MAX_BITS: u32 = 256;
/// Narrowest supported key, in bits.
pub const MIN_BITS: u32 = 8;

const ID_BYTES: usize = (MAX_BITS / 8) as usize;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdentityError {
    #[error("malformed peer address {0:?}")]
    MalformedAddress(String),
    #[error("a node never stores or indexes itself")]
    SameId,
    #[error("invalid hex identifier {0:?}")]
    InvalidHex(String),
    #[error("identifier does not fit in {bits} bits")]
    OutOfRange { bits: u32 },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

/// Overlay tuning knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KademliaParams {
    /// Parallel query fan-out.
    pub alpha: usize,
    /// Key width in bits.
    pub bits: u32,
    /// Bucket capacity.
    pub k: usize,
    /// How long a contact may stay offline before it is purged.
    #[serde(with = "duration_secs")]
    pub offline_expiry: Duration,
}

impl Default for KademliaParams {
    fn default() -> Self {
        KademliaParams {
            alpha: 3,
            bits: 160,
            k: 20,
            offline_expiry: Duration::from_secs(24 * 3600),
        }
    }
}

impl KademliaParams {
    pub fn validate(&self) -> Result<(), IdentityError> {
        if self.alpha < 1 {
            return Err(IdentityError::InvalidParams(
                "alpha must be at least 1".into(),
            ));
        }
        if self.k < 1 {
            return Err(IdentityError::InvalidParams("k must be at least 1".into()));
        }
        if !(MIN_BITS..=MAX_BITS).contains(&self.bits) {
            return Err(IdentityError::InvalidParams(format!(
                "bits must lie in [{MIN_BITS}, {MAX_BITS}], got {}",
                self.bits
            )));
        }
        Ok(())
    }

    /// Bytes needed to carry one identifier on the wire.
    pub fn id_bytes(&self) -> usize {
        self.bits.div_ceil(8) as usize
    }
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_secs())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs(u64::deserialize(d)?))
    }
}

/// Mask with the low `bits` bits set.
fn low_mask(bits: u32) -> [u8; ID_BYTES] {
    let mut out = [0u8; ID_BYTES];
    let full = (bits / 8) as usize;
    for b in out.iter_mut().rev().take(full) {
        *b = 0xff;
    }
    let rem = bits % 8;
    if rem != 0 {
        out[ID_BYTES - 1 - full] = (1u8 << rem) - 1;
    }
    out
}

/// A position in the overlay key space.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PeerId([u8; ID_BYTES]);

impl PeerId {
    pub const ZERO: PeerId = PeerId([0; ID_BYTES]);

    pub fn from_u64(v: u64) -> Self {
        let mut out = [0u8; ID_BYTES];
        out[ID_BYTES - 8..].copy_from_slice(&v.to_be_bytes());
        PeerId(out)
    }

    /// The full 256-bit big-endian representation.
    pub fn as_bytes(&self) -> &[u8; ID_BYTES] {
        &self.0
    }

    /// Wire form: `ceil(bits / 8)` big-endian bytes.
    pub fn to_be_bytes(&self, bits: u32) -> Vec<u8> {
        let n = bits.div_ceil(8) as usize;
        self.0[ID_BYTES - n..].to_vec()
    }

    pub fn from_be_bytes(bytes: &[u8], bits: u32) -> Result<Self, IdentityError> {
        if bytes.len() != bits.div_ceil(8) as usize {
            return Err(IdentityError::OutOfRange { bits });
        }
        let mut out = [0u8; ID_BYTES];
        out[ID_BYTES - bytes.len()..].copy_from_slice(bytes);
        let id = PeerId(out);
        if !id.fits(bits) {
            return Err(IdentityError::OutOfRange { bits });
        }
        Ok(id)
    }

    /// True when the value is below `2^bits`.
    pub fn fits(&self, bits: u32) -> bool {
        let mask = low_mask(bits);
        self.0.iter().zip(mask.iter()).all(|(v, m)| v & !m == 0)
    }

    /// Uniform draw over `[0, 2^bits)`.
    pub fn random<R: RngCore + ?Sized>(rng: &mut R, bits: u32) -> Self {
        let mut out = [0u8; ID_BYTES];
        rng.fill_bytes(&mut out);
        PeerId(out).masked(bits)
    }

    fn masked(mut self, bits: u32) -> Self {
        for (v, m) in self.0.iter_mut().zip(low_mask(bits).iter()) {
            *v &= m;
        }
        self
    }

    /// Bit `i` of a `bits`-wide key, counting from the most significant bit.
    pub fn bit(&self, i: u32, bits: u32) -> bool {
        debug_assert!(i < bits);
        let pos = bits - 1 - i; // from the least significant end
        let byte = ID_BYTES - 1 - (pos / 8) as usize;
        self.0[byte] >> (pos % 8) & 1 == 1
    }

    /// Returns a copy with bit `i` (from the top of a `bits`-wide key) set to `value`.
    pub fn with_bit(mut self, i: u32, bits: u32, value: bool) -> Self {
        let pos = bits - 1 - i;
        let byte = ID_BYTES - 1 - (pos / 8) as usize;
        let m = 1u8 << (pos % 8);
        if value {
            self.0[byte] |= m;
        } else {
            self.0[byte] &= !m;
        }
        self
    }

    /// Keeps the top `depth` bits of a `bits`-wide key and clears the rest.
    pub fn prefix(&self, depth: u32, bits: u32) -> PeerId {
        let keep = low_mask(bits);
        let drop = low_mask(bits - depth);
        let mut out = self.0;
        for i in 0..ID_BYTES {
            out[i] &= keep[i] & !drop[i];
        }
        PeerId(out)
    }

    /// Replaces the low `bits - depth` bits with fresh random bits.
    pub fn randomize_suffix<R: RngCore + ?Sized>(
        &self,
        depth: u32,
        bits: u32,
        rng: &mut R,
    ) -> PeerId {
        let tail = PeerId::random(rng, bits - depth);
        let mut out = self.prefix(depth, bits).0;
        for (o, t) in out.iter_mut().zip(tail.0.iter()) {
            *o |= t;
        }
        PeerId(out)
    }

    /// Lowercase hex, exactly `ceil(bits / 4)` digits.
    pub fn to_hex(&self, bits: u32) -> String {
        let full: String = self.0.iter().map(|b| format!("{b:02x}")).collect();
        let digits = bits.div_ceil(4) as usize;
        full[full.len() - digits..].to_string()
    }

    pub fn from_hex(s: &str, bits: u32) -> Result<Self, IdentityError> {
        let digits = bits.div_ceil(4) as usize;
        if s.len() != digits || !s.bytes().all(|c| c.is_ascii_hexdigit()) {
            return Err(IdentityError::InvalidHex(s.to_string()));
        }
        let mut padded = "0".repeat(2 * ID_BYTES - digits);
        padded.push_str(s);
        let mut out = [0u8; ID_BYTES];
        for (i, o) in out.iter_mut().enumerate() {
            *o = u8::from_str_radix(&padded[2 * i..2 * i + 2], 16)
                .map_err(|_| IdentityError::InvalidHex(s.to_string()))?;
        }
        let id = PeerId(out);
        if !id.fits(bits) {
            return Err(IdentityError::OutOfRange { bits });
        }
        Ok(id)
    }
}

impl fmt::Debug for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let hex = self.to_hex(MAX_BITS);
        let trimmed = hex.trim_start_matches('0');
        write!(
            f,
            "PeerId({})",
            if trimmed.is_empty() { "0" } else { trimmed }
        )
    }
}

/// XOR distance between two identifiers, ordered as an unsigned integer.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Distance([u8; ID_BYTES]);

impl Distance {
    pub const ZERO: Distance = Distance([0; ID_BYTES]);

    pub fn from_u64(v: u64) -> Self {
        Distance(PeerId::from_u64(v).0)
    }

    pub fn as_bytes(&self) -> &[u8; ID_BYTES] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|b| *b == 0)
    }

    /// Position of the most significant set bit, or `None` for zero.
    pub fn msb(&self) -> Option<u32> {
        let lz: u32 = {
            let mut n = 0;
            for b in self.0.iter() {
                if *b == 0 {
                    n += 8;
                } else {
                    n += b.leading_zeros();
                    break;
                }
            }
            n
        };
        (lz < MAX_BITS).then(|| MAX_BITS - 1 - lz)
    }

    /// The low 64 bits. Only meaningful in narrow key spaces and tests.
    pub fn low_u64(&self) -> u64 {
        u64::from_be_bytes(self.0[ID_BYTES - 8..].try_into().unwrap())
    }
}

impl fmt::Debug for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let hex: String = self.0.iter().map(|b| format!("{b:02x}")).collect();
        let trimmed = hex.trim_start_matches('0');
        write!(
            f,
            "Distance({})",
            if trimmed.is_empty() { "0" } else { trimmed }
        )
    }
}

/// Lowercases and validates a `user@domain` address.
pub fn normalize_address(address: &str) -> Result<String, IdentityError> {
    let mut parts = address.split('@');
    let (local, domain) = match (parts.next(), parts.next(), parts.next()) {
        (Some(l), Some(d), None) => (l, d),
        _ => return Err(IdentityError::MalformedAddress(address.to_string())),
    };
    if local.is_empty() || domain.is_empty() {
        return Err(IdentityError::MalformedAddress(address.to_string()));
    }
    Ok(address.to_lowercase())
}

/// Maps a peer address onto the key space: the first `bits` bits of
/// SHA-1 over the lowercased address. Widths above 160 bits extend the digest
/// with SHA-1(address || counter) blocks, counter starting at 1.
pub fn derive_peer_id(address: &str, params: &KademliaParams) -> Result<PeerId, IdentityError> {
    let normalized = normalize_address(address)?;
    let bits = params.bits;
    let mut stream = Sha1::digest(normalized.as_bytes()).to_vec();
    let mut counter: u8 = 1;
    while stream.len() * 8 < bits as usize {
        let mut h = Sha1::new();
        h.update(normalized.as_bytes());
        h.update([counter]);
        stream.extend_from_slice(&h.finalize());
        counter += 1;
    }
    // Take the leading `bits` bits of the stream and right-align them.
    let nbytes = bits.div_ceil(8) as usize;
    let mut out = [0u8; ID_BYTES];
    out[ID_BYTES - nbytes..].copy_from_slice(&stream[..nbytes]);
    let shift = (nbytes * 8) as u32 - bits;
    if shift > 0 {
        let mut carry = 0u8;
        for b in out[ID_BYTES - nbytes..].iter_mut() {
            let next = *b << (8 - shift);
            *b = (*b >> shift) | carry;
            carry = next;
        }
    }
    Ok(PeerId(out))
}

pub fn xor_distance(a: &PeerId, b: &PeerId) -> Distance {
    let mut out = [0u8; ID_BYTES];
    for (i, o) in out.iter_mut().enumerate() {
        *o = a.0[i] ^ b.0[i];
    }
    Distance(out)
}

/// The `i` with `2^i <= d(local, other) < 2^(i+1)`.
pub fn bucket_index(local: &PeerId, other: &PeerId) -> Result<u32, IdentityError> {
    xor_distance(local, other)
        .msb()
        .ok_or(IdentityError::SameId)
}

/// Orders `a` and `b` by distance to `target`; `Less` means `a` is closer.
pub fn closer(target: &PeerId, a: &PeerId, b: &PeerId) -> Ordering {
    xor_distance(target, a).cmp(&xor_distance(target, b))
}

/// Length of the shared leading prefix of two `bits`-wide keys.
pub fn common_prefix_len(a: &PeerId, b: &PeerId, bits: u32) -> u32 {
    match bucket_index(a, b) {
        Ok(i) => bits - 1 - i,
        Err(_) => bits,
    }
}

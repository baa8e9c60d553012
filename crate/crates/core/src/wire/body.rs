//! Typed view of the information elements carried by overlay messages.

use thiserror::Error;

use super::codec::{ie, EncodeError, InformationElement};
use crate::endpoint::{Endpoint, ENDPOINT_BYTES};
use crate::identity::PeerId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BodyError {
    #[error("information element {0:#04x} has the wrong length")]
    BadLength(u8),
    #[error("information element {0:#04x} is malformed")]
    Malformed(u8),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Body {
    /// The sender's own identifier, or the subject peer for REGREQ/REGREL.
    pub peer_id: Option<PeerId>,
    pub endpoint: Option<Endpoint>,
    pub address: Option<String>,
    pub contacts: Vec<(PeerId, Endpoint)>,
    pub target: Option<PeerId>,
    pub cause: Option<String>,
    pub flood_id: Option<u64>,
    pub hop_count: Option<u8>,
    pub auth: Option<String>,
}

fn record_len(bits: u32) -> usize {
    bits.div_ceil(8) as usize + ENDPOINT_BYTES
}

fn text_ie(id: u8, s: &str) -> Result<InformationElement, EncodeError> {
    if s.len() > 255 {
        return Err(EncodeError::IeTooLong { id, len: s.len() });
    }
    Ok(InformationElement::new(id, s.as_bytes()))
}

impl Body {
    pub fn to_ies(&self, bits: u32) -> Result<Vec<InformationElement>, EncodeError> {
        let mut out = Vec::new();
        if let Some(p) = &self.peer_id {
            out.push(InformationElement::new(ie::PEER_ID, p.to_be_bytes(bits)));
        }
        if let Some(e) = &self.endpoint {
            out.push(InformationElement::new(ie::ENDPOINT, e.to_bytes()));
        }
        if let Some(a) = &self.address {
            out.push(text_ie(ie::ADDRESS, a)?);
        }
        if let Some(t) = &self.target {
            out.push(InformationElement::new(ie::TARGET_KEY, t.to_be_bytes(bits)));
        }
        if let Some(c) = &self.cause {
            out.push(text_ie(ie::CAUSE, c)?);
        }
        if let Some(f) = self.flood_id {
            out.push(InformationElement::new(ie::FLOOD_ID, f.to_be_bytes()));
        }
        if let Some(h) = self.hop_count {
            out.push(InformationElement::new(ie::HOP_COUNT, [h]));
        }
        if let Some(a) = &self.auth {
            out.push(text_ie(ie::AUTH, a)?);
        }
        // Contact lists are split across as many elements as needed, each
        // holding whole fixed-width records.
        let per_ie = (255 / record_len(bits)).max(1);
        for chunk in self.contacts.chunks(per_ie) {
            let mut data = Vec::with_capacity(chunk.len() * record_len(bits));
            for (id, ep) in chunk {
                data.extend_from_slice(&id.to_be_bytes(bits));
                data.extend_from_slice(&ep.to_bytes());
            }
            out.push(InformationElement::new(ie::CONTACT_LIST, data));
        }
        Ok(out)
    }

    /// Unknown elements are skipped.
    pub fn from_ies(ies: &[InformationElement], bits: u32) -> Result<Self, BodyError> {
        let id_of = |e: &InformationElement| {
            PeerId::from_be_bytes(&e.data, bits).map_err(|_| BodyError::BadLength(e.id))
        };
        let text_of = |e: &InformationElement| {
            String::from_utf8(e.data.clone()).map_err(|_| BodyError::Malformed(e.id))
        };
        let mut b = Body::default();
        for e in ies {
            match e.id {
                ie::PEER_ID => b.peer_id = Some(id_of(e)?),
                ie::ENDPOINT => {
                    b.endpoint =
                        Some(Endpoint::from_bytes(&e.data).ok_or(BodyError::BadLength(e.id))?)
                }
                ie::ADDRESS => b.address = Some(text_of(e)?),
                ie::TARGET_KEY => b.target = Some(id_of(e)?),
                ie::CAUSE => b.cause = Some(text_of(e)?),
                ie::FLOOD_ID => {
                    let raw: [u8; 8] = e
                        .data
                        .as_slice()
                        .try_into()
                        .map_err(|_| BodyError::BadLength(e.id))?;
                    b.flood_id = Some(u64::from_be_bytes(raw));
                }
                ie::HOP_COUNT => {
                    let [h] = e.data.as_slice() else {
                        return Err(BodyError::BadLength(e.id));
                    };
                    b.hop_count = Some(*h);
                }
                ie::AUTH => b.auth = Some(text_of(e)?),
                ie::CONTACT_LIST => {
                    let w = record_len(bits);
                    if e.data.len() % w != 0 {
                        return Err(BodyError::BadLength(e.id));
                    }
                    let idb = w - ENDPOINT_BYTES;
                    for rec in e.data.chunks(w) {
                        let id = PeerId::from_be_bytes(&rec[..idb], bits)
                            .map_err(|_| BodyError::Malformed(e.id))?;
                        let ep =
                            Endpoint::from_bytes(&rec[idb..]).ok_or(BodyError::Malformed(e.id))?;
                        b.contacts.push((id, ep));
                    }
                }
                _ => {}
            }
        }
        Ok(b)
    }
}

use std::collections::BTreeSet;

use thiserror::Error;

use super::codec::MAX_CALL_NUMBER;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CallNumberError {
    #[error("all {MAX_CALL_NUMBER} call numbers are in use")]
    Exhausted,
}

/// Source call numbers bound to active sessions at one peer.
///
/// Hands out the lowest free number in `[1, 32767]`; zero stays reserved
/// for sessionless overlay queries.
#[derive(Debug, Clone, Default)]
pub struct CallNumbers {
    active: BTreeSet<u16>,
}

impl CallNumbers {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn allocate(&mut self) -> Result<u16, CallNumberError> {
        let mut next = 1u16;
        for &n in &self.active {
            if n != next {
                break;
            }
            next += 1;
        }
        if next > MAX_CALL_NUMBER {
            return Err(CallNumberError::Exhausted);
        }
        self.active.insert(next);
        Ok(next)
    }

    pub fn release(&mut self, n: u16) -> bool {
        self.active.remove(&n)
    }

    pub fn is_active(&self, n: u16) -> bool {
        self.active.contains(&n)
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }
}

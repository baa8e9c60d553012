use std::fmt;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The single UDP port IAX runs on.
pub const IAX_PORT: u16 = 4569;

/// Wire width of an encoded endpoint: IPv4 address plus port.
pub const ENDPOINT_BYTES: usize = 6;

/// Where a peer can be reached: host address and UDP port.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Endpoint(pub SocketAddrV4);

impl Endpoint {
    pub fn new(ip: Ipv4Addr, port: u16) -> Self {
        Endpoint(SocketAddrV4::new(ip, port))
    }

    /// Deterministic address for the `index`-th simulated host, always on the IAX port.
    pub fn simulated(index: u32) -> Self {
        let [_, b, c, d] = (index + 1).to_be_bytes();
        Endpoint::new(Ipv4Addr::new(10, b, c, d), IAX_PORT)
    }

    pub fn to_bytes(&self) -> [u8; ENDPOINT_BYTES] {
        let mut out = [0u8; ENDPOINT_BYTES];
        out[..4].copy_from_slice(&self.0.ip().octets());
        out[4..].copy_from_slice(&self.0.port().to_be_bytes());
        out
    }

    pub fn from_bytes(b: &[u8]) -> Option<Self> {
        if b.len() != ENDPOINT_BYTES {
            return None;
        }
        let ip = Ipv4Addr::new(b[0], b[1], b[2], b[3]);
        Some(Endpoint::new(ip, u16::from_be_bytes([b[4], b[5]])))
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Endpoint({})", self.0)
    }
}

impl FromStr for Endpoint {
    type Err = std::net::AddrParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse().map(Endpoint)
    }
}

impl From<Endpoint> for String {
    fn from(e: Endpoint) -> String {
        e.to_string()
    }
}

impl TryFrom<String> for Endpoint {
    type Error = std::net::AddrParseError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

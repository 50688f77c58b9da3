use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Simulated time in ticks.
pub type Tick = u64;

/// One side of a duplex link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Endpoint {
    A,
    B,
}

impl Endpoint {
    pub const BOTH: [Endpoint; 2] = [Endpoint::A, Endpoint::B];

    pub fn peer(self) -> Endpoint {
        match self {
            Endpoint::A => Endpoint::B,
            Endpoint::B => Endpoint::A,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Endpoint::A => 0,
            Endpoint::B => 1,
        }
    }

    /// Wire code used in frame headers.
    pub fn code(self) -> u8 {
        self.index() as u8
    }

    pub fn from_code(code: u8) -> Option<Endpoint> {
        match code {
            0 => Some(Endpoint::A),
            1 => Some(Endpoint::B),
            _ => None,
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Endpoint::A => "A",
            Endpoint::B => "B",
        })
    }
}

impl FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(Endpoint::A),
            "B" | "b" => Ok(Endpoint::B),
            other => Err(format!("unknown endpoint `{other}`")),
        }
    }
}

/// Transaction identifier, unique per link within one scenario run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TxnId(pub u64);

impl fmt::Display for TxnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.0)
    }
}

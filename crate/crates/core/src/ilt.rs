//! Indefinite logical timestamps: the four-valued causal relation, its
//! two-bit code, and the per-link tensor clock.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::analysis::relation::{self, EventRef, RelationError};
use crate::ids::Endpoint;
use crate::trace::Trace;

/// Causal relation between two events `a` and `b` on a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CausalRelation {
    /// `a` causally precedes `b`.
    Before,
    /// `b` causally precedes `a`.
    After,
    /// Causally independent.
    Concurrent,
    /// Order not yet resolved. Only ever temporary.
    Indefinite,
}

impl CausalRelation {
    pub const ALL: [CausalRelation; 4] = [
        CausalRelation::Before,
        CausalRelation::After,
        CausalRelation::Concurrent,
        CausalRelation::Indefinite,
    ];

    pub fn is_definite(self) -> bool {
        self != CausalRelation::Indefinite
    }

    /// The relation seen from the other event of the pair.
    pub fn converse(self) -> CausalRelation {
        match self {
            CausalRelation::Before => CausalRelation::After,
            CausalRelation::After => CausalRelation::Before,
            other => other,
        }
    }
}

impl fmt::Display for CausalRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CausalRelation::Before => "before",
            CausalRelation::After => "after",
            CausalRelation::Concurrent => "concurrent",
            CausalRelation::Indefinite => "indefinite",
        })
    }
}

/// A two-bit relation code. Always holds a value in `0..=3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RelationBits(u8);

impl RelationBits {
    pub fn new(bits: u8) -> Option<RelationBits> {
        (bits < 4).then_some(RelationBits(bits))
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = RelationBits> {
        (0..4).map(RelationBits)
    }
}

impl fmt::Display for RelationBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02b}", self.0)
    }
}

impl FromStr for RelationBits {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "00" => Ok(RelationBits(0b00)),
            "01" => Ok(RelationBits(0b01)),
            "10" => Ok(RelationBits(0b10)),
            "11" => Ok(RelationBits(0b11)),
            other => Err(format!("not a 2-bit relation code: `{other}`")),
        }
    }
}

impl Serialize for RelationBits {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RelationBits {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `01` before, `10` after, `00` concurrent, `11` indefinite.
pub fn encode(rel: CausalRelation) -> RelationBits {
    RelationBits(match rel {
        CausalRelation::Concurrent => 0b00,
        CausalRelation::Before => 0b01,
        CausalRelation::After => 0b10,
        CausalRelation::Indefinite => 0b11,
    })
}

pub fn decode(bits: RelationBits) -> CausalRelation {
    match bits.0 {
        0b00 => CausalRelation::Concurrent,
        0b01 => CausalRelation::Before,
        0b10 => CausalRelation::After,
        _ => CausalRelation::Indefinite,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClockError {
    #[error("tensor clock counter `{0}` overflowed: scenario exceeded its horizon")]
    Overflow(&'static str),
}

/// Per-link tensor clock `(c_A, c_B, d)`.
///
/// `c_A`/`c_B` count transactions initiated by each side, `d` counts
/// reflecting rounds that reached mutual knowledge. Every counter is
/// monotone and `d <= c_A + c_B` holds on every reachable clock.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorClock {
    pub c_a: u64,
    pub c_b: u64,
    pub d: u64,
}

impl TensorClock {
    pub fn new(c_a: u64, c_b: u64, d: u64) -> TensorClock {
        TensorClock { c_a, c_b, d }
    }

    pub fn initiations(&self, side: Endpoint) -> u64 {
        match side {
            Endpoint::A => self.c_a,
            Endpoint::B => self.c_b,
        }
    }

    /// Componentwise `<=`.
    pub fn dominated_by(&self, other: &TensorClock) -> bool {
        self.c_a <= other.c_a && self.c_b <= other.c_b && self.d <= other.d
    }

    pub fn is_consistent(&self) -> bool {
        u128::from(self.d) <= u128::from(self.c_a) + u128::from(self.c_b)
    }
}

impl fmt::Display for TensorClock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.c_a, self.c_b, self.d)
    }
}

pub fn tc_init() -> TensorClock {
    TensorClock::default()
}

pub fn tc_on_initiate(tc: TensorClock, side: Endpoint) -> Result<TensorClock, ClockError> {
    let mut next = tc;
    match side {
        Endpoint::A => next.c_a = tc.c_a.checked_add(1).ok_or(ClockError::Overflow("c_A"))?,
        Endpoint::B => next.c_b = tc.c_b.checked_add(1).ok_or(ClockError::Overflow("c_B"))?,
    }
    Ok(next)
}

/// Caller contract: a reflecting exchange has just completed.
pub fn tc_on_round_complete(tc: TensorClock) -> Result<TensorClock, ClockError> {
    let d = tc.d.checked_add(1).ok_or(ClockError::Overflow("d"))?;
    Ok(TensorClock { d, ..tc })
}

/// Four-valued relation of two state-transition events of a trace, as
/// of the end of the trace. Relations come from the trace, never from
/// comparing clocks of different links.
pub fn relate(a: EventRef, b: EventRef, trace: &Trace) -> Result<CausalRelation, RelationError> {
    relation::relate(a, b, trace)
}

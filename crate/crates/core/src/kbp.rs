//! Ontic and epistemic link registers.
//!
//! The ontic register holds four bits, one proposal bit and one digest
//! bit per direction. Each endpoint's epistemic register covers exactly
//! two of those positions. At the start of a round an endpoint knows its
//! own half (own proposal, own digest position as a placeholder); when the
//! peer's digest bit is reflected to it, that bit replaces the stale own
//! digest position. At commit both endpoints hold "own proposal + peer
//! digest", which are complementary.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::Endpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Position {
    AProposal = 0,
    ADigest = 1,
    BProposal = 2,
    BDigest = 3,
}

impl Position {
    pub const ALL: [Position; 4] =
        [Position::AProposal, Position::ADigest, Position::BProposal, Position::BDigest];

    pub fn proposal(ep: Endpoint) -> Position {
        match ep {
            Endpoint::A => Position::AProposal,
            Endpoint::B => Position::BProposal,
        }
    }

    pub fn digest(ep: Endpoint) -> Position {
        match ep {
            Endpoint::A => Position::ADigest,
            Endpoint::B => Position::BDigest,
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

/// A set of ontic positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PositionMask(u8);

impl PositionMask {
    pub const FULL: PositionMask = PositionMask(0b1111);

    pub fn from_bits(bits: u8) -> Option<PositionMask> {
        (bits <= 0b1111).then_some(PositionMask(bits))
    }

    pub fn of(positions: &[Position]) -> PositionMask {
        PositionMask(positions.iter().fold(0, |m, p| m | p.bit()))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn count(self) -> u32 {
        self.0.count_ones()
    }

    pub fn contains(self, p: Position) -> bool {
        self.0 & p.bit() != 0
    }

    pub fn is_disjoint(self, other: PositionMask) -> bool {
        self.0 & other.0 == 0
    }

    pub fn union(self, other: PositionMask) -> PositionMask {
        PositionMask(self.0 | other.0)
    }

    pub fn positions(self) -> impl Iterator<Item = Position> {
        Position::ALL.into_iter().filter(move |p| self.contains(*p))
    }
}

impl fmt::Display for PositionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04b}", self.0)
    }
}

/// The omniscient four-bit link state. Endpoint logic never reads it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OntRegister(u8);

impl OntRegister {
    pub fn new(bits: u8) -> Option<OntRegister> {
        (bits <= 0b1111).then_some(OntRegister(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn get(self, p: Position) -> bool {
        self.0 & p.bit() != 0
    }

    pub fn set(&mut self, p: Position, value: bool) {
        if value {
            self.0 |= p.bit();
        } else {
            self.0 &= !p.bit();
        }
    }
}

impl fmt::Display for OntRegister {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04b}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KbpError {
    #[error("duplicate reflection: position {0:?} is already known")]
    DuplicateReflection(Position),
    #[error("reflection for round {fragment} is older than the register's round {local}")]
    StaleReflection { local: u64, fragment: u64 },
    #[error("registers belong to different rounds ({a} vs {b})")]
    StaleRound { a: u64, b: u64 },
    #[error("epistemic masks overlap ({a} & {b})")]
    OverlappingMasks { a: PositionMask, b: PositionMask },
    #[error("register knows {0} positions; exactly 2 are allowed")]
    Unbalanced(u32),
}

/// A single reflected bit, tagged with the round that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReflectedBit {
    pub position: Position,
    pub value: bool,
    pub round: u64,
}

/// What one endpoint knows about the link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EpiRegister {
    pub endpoint: Endpoint,
    mask: PositionMask,
    /// Values at the masked positions, laid out like the ontic register.
    values: u8,
    pub round: u64,
}

impl EpiRegister {
    /// Round start: own proposal bit plus the own digest position, whose
    /// value is a placeholder until the peer reflects its digest bit.
    pub fn own_half(endpoint: Endpoint, proposal: bool, round: u64) -> EpiRegister {
        let mask = PositionMask::of(&[Position::proposal(endpoint), Position::digest(endpoint)]);
        let mut reg = EpiRegister { endpoint, mask, values: 0, round };
        reg.set(Position::proposal(endpoint), proposal);
        reg
    }

    /// Builds a register from raw parts. Fails unless exactly two
    /// positions are known.
    pub fn from_parts(
        endpoint: Endpoint,
        mask: PositionMask,
        values: u8,
        round: u64,
    ) -> Result<EpiRegister, KbpError> {
        let reg = EpiRegister { endpoint, mask, values: values & mask.bits(), round };
        if knowledge_balance_check(&reg) {
            Ok(reg)
        } else {
            Err(KbpError::Unbalanced(mask.count()))
        }
    }

    pub fn mask(&self) -> PositionMask {
        self.mask
    }

    pub fn get(&self, p: Position) -> Option<bool> {
        self.mask.contains(p).then(|| self.values & p.bit() != 0)
    }

    fn set(&mut self, p: Position, value: bool) {
        debug_assert!(self.mask.contains(p));
        if value {
            self.values |= p.bit();
        } else {
            self.values &= !p.bit();
        }
    }

    pub fn proposal(&self) -> bool {
        self.get(Position::proposal(self.endpoint)).unwrap_or(false)
    }

    pub fn set_proposal(&mut self, value: bool) {
        self.set(Position::proposal(self.endpoint), value);
    }

    /// The known bits packed in position order, two bits wide.
    pub fn known_bits(&self) -> u8 {
        self.mask
            .positions()
            .fold(0, |acc, p| (acc << 1) | u8::from(self.values & p.bit() != 0))
    }

    /// Position learned by reflection in this round, if any.
    pub fn reflected_position(&self) -> Option<Position> {
        let peer_digest = Position::digest(self.endpoint.peer());
        self.mask.contains(peer_digest).then_some(peer_digest)
    }

    /// Positions whose value is real knowledge (not the round-start
    /// placeholder). The auditor compares these against the ontic register.
    pub fn informed_positions(&self) -> impl Iterator<Item = Position> + '_ {
        let placeholder = Position::digest(self.endpoint);
        self.mask.positions().filter(move |p| *p != placeholder)
    }
}

impl fmt::Display for EpiRegister {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}/{:02b}@{}", self.endpoint, self.mask, self.known_bits(), self.round)
    }
}

/// Steady-state view of an endpoint: its own transmit-direction proposal
/// bit plus the peer digest bit reflected to it. The two views are
/// disjoint and together cover the ontic register.
pub fn epi_view(ont: OntRegister, endpoint: Endpoint) -> EpiRegister {
    let mask =
        PositionMask::of(&[Position::proposal(endpoint), Position::digest(endpoint.peer())]);
    EpiRegister { endpoint, mask, values: ont.bits() & mask.bits(), round: 0 }
}

/// Exactly half of the four ontic positions are known.
pub fn knowledge_balance_check(epi: &EpiRegister) -> bool {
    epi.mask.count() == 2
}

/// Folds a reflected bit into `local`. The reflected position replaces the
/// stale non-proposal position, so the register stays balanced. A fragment
/// from a newer round first expires everything reflected in older rounds.
pub fn merge_reflection(local: &EpiRegister, reflected: ReflectedBit) -> Result<EpiRegister, KbpError> {
    if reflected.round < local.round {
        return Err(KbpError::StaleReflection { local: local.round, fragment: reflected.round });
    }
    let base = if reflected.round > local.round {
        EpiRegister::own_half(local.endpoint, local.proposal(), reflected.round)
    } else {
        *local
    };
    if base.mask.contains(reflected.position) {
        return Err(KbpError::DuplicateReflection(reflected.position));
    }
    let own = Position::proposal(base.endpoint);
    let keep = base.mask.positions().find(|p| *p == own);
    let mut positions: Vec<Position> = keep.into_iter().collect();
    if positions.is_empty() {
        // Foreign layout: keep the lowest known position.
        positions.extend(base.mask.positions().take(1));
    }
    positions.push(reflected.position);
    let mask = PositionMask::of(&positions);
    let mut merged = EpiRegister { endpoint: base.endpoint, mask, values: base.values & mask.bits(), round: base.round };
    merged.set(reflected.position, reflected.value);
    Ok(merged)
}

/// Commit requires complementary halves that both carry a reflected digest
/// bit for the same round, with every known bit set.
pub fn commit_eligible(epi_a: &EpiRegister, epi_b: &EpiRegister) -> Result<bool, KbpError> {
    if !epi_a.mask.is_disjoint(epi_b.mask) {
        return Err(KbpError::OverlappingMasks { a: epi_a.mask, b: epi_b.mask });
    }
    if epi_a.round != epi_b.round {
        return Err(KbpError::StaleRound { a: epi_a.round, b: epi_b.round });
    }
    let complementary = epi_a.mask.union(epi_b.mask) == PositionMask::FULL;
    let reflected = epi_a.reflected_position().is_some() && epi_b.reflected_position().is_some();
    let all_set = [epi_a, epi_b]
        .iter()
        .all(|r| r.mask.positions().all(|p| r.get(p) == Some(true)));
    Ok(complementary && reflected && all_set)
}

//! Transactions on one link: payload schema and interpreted digests, the
//! frame wire format, the observer-visible store, and the per-endpoint
//! operations that bind the state machine to them.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{Endpoint, Tick, TxnId};
use crate::link_fsm::{EndpointFsm, FailReason, LinkEvent, LinkState, Outcome, Role, Step, TieBreak};

pub type FieldKey = u8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FieldWrite {
    pub key: FieldKey,
    pub value: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PayloadError {
    #[error("unknown schema version {0}")]
    UnknownSchema(u8),
    #[error("payload truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("payload has {0} trailing bytes")]
    Trailing(usize),
    #[error("too many fields: {0}")]
    TooManyFields(usize),
}

/// Schema 1 carries field values little-endian, schema 2 big-endian. The
/// bytes in transit are identical either way; only their meaning differs.
pub const SCHEMA_VERSIONS: [u8; 2] = [1, 2];

fn check_schema(schema: u8) -> Result<(), PayloadError> {
    if SCHEMA_VERSIONS.contains(&schema) {
        Ok(())
    } else {
        Err(PayloadError::UnknownSchema(schema))
    }
}

/// Serializes field writes under `schema`: `count(1) | (key(1) value(8))*`.
pub fn encode_fields(schema: u8, fields: &[FieldWrite]) -> Result<Vec<u8>, PayloadError> {
    check_schema(schema)?;
    let count = u8::try_from(fields.len()).map_err(|_| PayloadError::TooManyFields(fields.len()))?;
    let mut out = Vec::with_capacity(1 + fields.len() * 9);
    out.push(count);
    for f in fields {
        out.push(f.key);
        let bytes = if schema == 1 { f.value.to_le_bytes() } else { f.value.to_be_bytes() };
        out.extend_from_slice(&bytes);
    }
    Ok(out)
}

/// Interprets raw payload bytes under the reader's own `schema`.
pub fn decode_fields(schema: u8, bytes: &[u8]) -> Result<Vec<FieldWrite>, PayloadError> {
    check_schema(schema)?;
    let (&count, mut rest) = bytes.split_first().ok_or(PayloadError::Truncated { need: 1, have: 0 })?;
    let need = usize::from(count) * 9;
    if rest.len() < need {
        return Err(PayloadError::Truncated { need: need + 1, have: bytes.len() });
    }
    let mut fields = Vec::with_capacity(usize::from(count));
    for _ in 0..count {
        let key = rest[0];
        let raw: [u8; 8] = rest[1..9].try_into().expect("length checked");
        let value = if schema == 1 { i64::from_le_bytes(raw) } else { i64::from_be_bytes(raw) };
        fields.push(FieldWrite { key, value });
        rest = &rest[9..];
    }
    if !rest.is_empty() {
        return Err(PayloadError::Trailing(rest.len()));
    }
    Ok(fields)
}

const FNV64_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV64_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV64_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV64_PRIME))
}

pub fn fnv1a32(bytes: &[u8]) -> u32 {
    bytes.iter().fold(0x811c_9dc5u32, |h, b| (h ^ u32::from(*b)).wrapping_mul(0x0100_0193))
}

/// Interpreted digest: FNV-1a over `txn_id(8 LE) | schema(1)` followed by
/// the decoded fields in canonical form `key(1) | value(8 LE)`.
pub fn digest(txn: TxnId, schema: u8, fields: &[FieldWrite]) -> u64 {
    let mut buf = Vec::with_capacity(9 + fields.len() * 9);
    buf.extend_from_slice(&txn.0.to_le_bytes());
    buf.push(schema);
    for f in fields {
        buf.push(f.key);
        buf.extend_from_slice(&f.value.to_le_bytes());
    }
    fnv1a64(&buf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    Tentative,
    Reflection,
    CommitAck,
    AbortNotify,
    Hyperdata,
    /// Completion-on-placement baseline: one field placed remotely.
    Write,
    /// Completion-on-placement baseline: placement acknowledged.
    WriteAck,
}

impl FrameKind {
    pub fn code(self) -> u8 {
        match self {
            FrameKind::Tentative => 1,
            FrameKind::Reflection => 2,
            FrameKind::CommitAck => 3,
            FrameKind::AbortNotify => 4,
            FrameKind::Hyperdata => 5,
            FrameKind::Write => 6,
            FrameKind::WriteAck => 7,
        }
    }

    pub fn from_code(code: u8) -> Option<FrameKind> {
        Some(match code {
            1 => FrameKind::Tentative,
            2 => FrameKind::Reflection,
            3 => FrameKind::CommitAck,
            4 => FrameKind::AbortNotify,
            5 => FrameKind::Hyperdata,
            6 => FrameKind::Write,
            7 => FrameKind::WriteAck,
            _ => return None,
        })
    }
}

impl fmt::Display for FrameKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FrameKind::Tentative => "tentative",
            FrameKind::Reflection => "reflection",
            FrameKind::CommitAck => "commit_ack",
            FrameKind::AbortNotify => "abort_notify",
            FrameKind::Hyperdata => "hyperdata",
            FrameKind::Write => "write",
            FrameKind::WriteAck => "write_ack",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("frame too short: {0} bytes")]
    Short(usize),
    #[error("unknown frame kind {0}")]
    UnknownKind(u8),
    #[error("unknown endpoint code {0}")]
    UnknownEndpoint(u8),
    #[error("declared body length {declared} does not match {actual}")]
    Length { declared: usize, actual: usize },
    #[error("body too long: {0} bytes")]
    BodyTooLong(usize),
}

pub const HEADER_LEN: usize = 1 + 8 + 1 + 8 + 1 + 2;
pub const FCS_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Frame {
    pub kind: FrameKind,
    pub txn: TxnId,
    pub tiebreak: TieBreak,
    pub schema_version: u8,
    pub body: Vec<u8>,
    pub emit_tick: Tick,
}

impl Frame {
    /// `kind(1) | txn(8) | tiebreak endpoint(1) counter(8) | schema(1) |
    /// len(2) | body | fcs(4)`, integers little-endian. The trailing frame
    /// check sequence is FNV-1a/32 over everything before it.
    pub fn encode(&self) -> Result<Vec<u8>, FrameError> {
        let len = u16::try_from(self.body.len()).map_err(|_| FrameError::BodyTooLong(self.body.len()))?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.body.len() + FCS_LEN);
        out.push(self.kind.code());
        out.extend_from_slice(&self.txn.0.to_le_bytes());
        out.push(self.tiebreak.endpoint.code());
        out.extend_from_slice(&self.tiebreak.counter.to_le_bytes());
        out.push(self.schema_version);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&self.body);
        let fcs = fnv1a32(&out);
        out.extend_from_slice(&fcs.to_le_bytes());
        Ok(out)
    }

    /// Parses a frame and reports whether its check sequence matched.
    /// The header is trusted; corruption is confined to body and FCS.
    pub fn decode(bytes: &[u8], emit_tick: Tick) -> Result<Received, FrameError> {
        if bytes.len() < HEADER_LEN + FCS_LEN {
            return Err(FrameError::Short(bytes.len()));
        }
        let kind = FrameKind::from_code(bytes[0]).ok_or(FrameError::UnknownKind(bytes[0]))?;
        let txn = TxnId(u64::from_le_bytes(bytes[1..9].try_into().expect("sized")));
        let endpoint = Endpoint::from_code(bytes[9]).ok_or(FrameError::UnknownEndpoint(bytes[9]))?;
        let counter = u64::from_le_bytes(bytes[10..18].try_into().expect("sized"));
        let schema_version = bytes[18];
        let declared = usize::from(u16::from_le_bytes([bytes[19], bytes[20]]));
        let actual = bytes.len() - HEADER_LEN - FCS_LEN;
        if declared != actual {
            return Err(FrameError::Length { declared, actual });
        }
        let body = bytes[HEADER_LEN..HEADER_LEN + actual].to_vec();
        let fcs = u32::from_le_bytes(bytes[bytes.len() - FCS_LEN..].try_into().expect("sized"));
        let intact = fnv1a32(&bytes[..bytes.len() - FCS_LEN]) == fcs;
        Ok(Received {
            frame: Frame { kind, txn, tiebreak: TieBreak { endpoint, counter }, schema_version, body, emit_tick },
            intact,
        })
    }

    /// The digest carried by reflection and commit-ack frames.
    pub fn digest(&self) -> Option<u64> {
        match self.kind {
            FrameKind::Reflection | FrameKind::CommitAck => {
                Some(u64::from_le_bytes(self.body.get(..8)?.try_into().ok()?))
            }
            FrameKind::Tentative => {
                let tail = self.body.len().checked_sub(8)?;
                Some(u64::from_le_bytes(self.body[tail..].try_into().ok()?))
            }
            _ => None,
        }
    }

    /// Payload bytes of a tentative frame (without the sender digest).
    pub fn payload_bytes(&self) -> Option<&[u8]> {
        match self.kind {
            FrameKind::Tentative => self.body.get(..self.body.len().checked_sub(8)?),
            _ => None,
        }
    }
}

/// A frame as seen by a receiver.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Received {
    pub frame: Frame,
    pub intact: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Completion {
    Commit,
    Abort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxnPhase {
    /// Orientation not fixed: crossed with a peer initiation.
    Indefinite,
    Resolution,
    Completed(Completion),
}

impl TxnPhase {
    fn rank(self) -> u8 {
        match self {
            TxnPhase::Indefinite => 0,
            TxnPhase::Resolution => 1,
            TxnPhase::Completed(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TxnError {
    #[error("{op} rejected: {reason}")]
    Rejected { op: &'static str, reason: &'static str },
    #[error("phase of {txn} cannot move from {from:?} to {to:?}")]
    PhaseRegression { txn: TxnId, from: TxnPhase, to: TxnPhase },
    #[error("commit of unknown transaction {0}")]
    UnknownTxn(TxnId),
    #[error("commit of aborted transaction {0}")]
    CommitAfterAbort(TxnId),
    #[error("abort of committed transaction {0}: committed state must not be revoked")]
    AbortAfterCommit(TxnId),
    #[error("reflection for unknown transaction {0}")]
    StrayFrame(TxnId),
    #[error(transparent)]
    Payload(#[from] PayloadError),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub txn_id: TxnId,
    pub initiator: Endpoint,
    pub tiebreak: TieBreak,
    pub schema_version: u8,
    pub writes: Vec<FieldWrite>,
    /// Encoded payload as sent.
    pub payload: Vec<u8>,
    /// Digest of the initiator's own interpretation.
    pub digest: u64,
    pub phase: TxnPhase,
    /// Set once the transaction leaves the indefinite phase.
    pub orientation: Option<Endpoint>,
}

impl Transaction {
    pub fn new(
        txn_id: TxnId,
        initiator: Endpoint,
        tiebreak: TieBreak,
        schema_version: u8,
        writes: Vec<FieldWrite>,
    ) -> Result<Transaction, TxnError> {
        let payload = encode_fields(schema_version, &writes)?;
        let digest = digest(txn_id, schema_version, &writes);
        Ok(Transaction {
            txn_id,
            initiator,
            tiebreak,
            schema_version,
            writes,
            payload,
            digest,
            phase: TxnPhase::Resolution,
            orientation: Some(initiator),
        })
    }

    pub fn mark_crossed(&mut self) -> Result<(), TxnError> {
        if self.phase != TxnPhase::Resolution || self.orientation != Some(self.initiator) {
            return Err(TxnError::PhaseRegression { txn: self.txn_id, from: self.phase, to: TxnPhase::Indefinite });
        }
        self.phase = TxnPhase::Indefinite;
        self.orientation = None;
        Ok(())
    }

    pub fn resolve(&mut self, orientation: Endpoint) -> Result<(), TxnError> {
        self.advance(TxnPhase::Resolution)?;
        self.orientation = Some(orientation);
        Ok(())
    }

    pub fn complete(&mut self, how: Completion) -> Result<(), TxnError> {
        self.advance(TxnPhase::Completed(how))?;
        if self.orientation.is_none() {
            self.orientation = Some(self.initiator);
        }
        Ok(())
    }

    fn advance(&mut self, to: TxnPhase) -> Result<(), TxnError> {
        let ok = match (self.phase, to) {
            (TxnPhase::Completed(a), TxnPhase::Completed(b)) => a == b,
            (from, to) => from.rank() <= to.rank(),
        };
        if !ok {
            return Err(TxnError::PhaseRegression { txn: self.txn_id, from: self.phase, to });
        }
        self.phase = to;
        Ok(())
    }

    pub fn tentative_frame(&self, now: Tick) -> Frame {
        let mut body = self.payload.clone();
        body.extend_from_slice(&self.digest.to_le_bytes());
        Frame {
            kind: FrameKind::Tentative,
            txn: self.txn_id,
            tiebreak: self.tiebreak,
            schema_version: self.schema_version,
            body,
            emit_tick: now,
        }
    }
}

/// A committed field value with the transaction that wrote it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Versioned {
    pub value: i64,
    pub txn: TxnId,
}

/// What an observer reads: requested key to its committed version, if any.
pub type Snapshot = BTreeMap<FieldKey, Option<Versioned>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Concluded {
    Committed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CommitEffect {
    Visible(Vec<FieldKey>),
    AlreadyVisible,
}

/// Committed fields plus the staging area. Only `committed` is readable.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VisibleStore {
    committed: BTreeMap<FieldKey, Versioned>,
    tentative: BTreeMap<TxnId, Vec<FieldWrite>>,
    concluded: BTreeMap<TxnId, Concluded>,
}

impl VisibleStore {
    pub fn new() -> VisibleStore {
        VisibleStore::default()
    }

    pub fn stage(&mut self, txn: TxnId, writes: Vec<FieldWrite>) {
        self.tentative.insert(txn, writes);
    }

    pub fn is_staged(&self, txn: TxnId) -> bool {
        self.tentative.contains_key(&txn)
    }

    pub fn read(&self, keys: &[FieldKey]) -> Snapshot {
        keys.iter().map(|k| (*k, self.committed.get(k).copied())).collect()
    }

    pub fn committed(&self) -> &BTreeMap<FieldKey, Versioned> {
        &self.committed
    }

    /// Makes every staged write of `txn` visible at once. Idempotent.
    pub fn commit_visibility(&mut self, txn: TxnId) -> Result<CommitEffect, TxnError> {
        match self.concluded.get(&txn) {
            Some(Concluded::Committed) => return Ok(CommitEffect::AlreadyVisible),
            Some(Concluded::Aborted) => return Err(TxnError::CommitAfterAbort(txn)),
            None => {}
        }
        let writes = self.tentative.remove(&txn).ok_or(TxnError::UnknownTxn(txn))?;
        let keys = writes.iter().map(|w| w.key).collect();
        for w in writes {
            self.committed.insert(w.key, Versioned { value: w.value, txn });
        }
        self.concluded.insert(txn, Concluded::Committed);
        Ok(CommitEffect::Visible(keys))
    }

    /// Discards staged writes of `txn`. Idempotent; fails after commit.
    pub fn abort_rollback(&mut self, txn: TxnId) -> Result<(), TxnError> {
        if self.concluded.get(&txn) == Some(&Concluded::Committed) {
            return Err(TxnError::AbortAfterCommit(txn));
        }
        self.tentative.remove(&txn);
        self.concluded.insert(txn, Concluded::Aborted);
        Ok(())
    }
}

pub fn commit_visibility(store: &mut VisibleStore, txn: TxnId) -> Result<CommitEffect, TxnError> {
    store.commit_visibility(txn)
}

pub fn abort_rollback(store: &mut VisibleStore, txn: TxnId) -> Result<(), TxnError> {
    store.abort_rollback(txn)
}

/// IDLE -> TENTATIVE for `txn`, staging its writes locally.
pub fn initiate(
    fsm: &EndpointFsm,
    store: &mut VisibleStore,
    txn: &Transaction,
    now: Tick,
) -> Result<(Step, Frame), TxnError> {
    if fsm.state != LinkState::Idle {
        return Err(TxnError::Rejected { op: "initiate", reason: "endpoint is not IDLE" });
    }
    let step = fsm.step(&LinkEvent::Initiate { txn: txn.txn_id, tiebreak: txn.tiebreak }, now);
    if !step.outcome.changed_state() {
        return Err(TxnError::Rejected { op: "initiate", reason: "state machine refused initiation" });
    }
    store.stage(txn.txn_id, txn.writes.clone());
    Ok((step, txn.tentative_frame(now)))
}

/// How a receiver understood a tentative frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interpretation {
    pub fields: Vec<FieldWrite>,
    pub digest: u64,
    /// Sender digest carried in the frame matches ours.
    pub agrees: bool,
}

/// Receiver side of a tentative frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReflectOutcome {
    /// Every state-machine step taken, in order.
    pub steps: Vec<(LinkEvent, Step)>,
    pub fsm: EndpointFsm,
    pub reflection: Option<Frame>,
    pub abort: Option<Frame>,
    pub interpretation: Option<Interpretation>,
}

/// Stages the incoming payload as provisional and answers with a reflection
/// carrying the digest of this endpoint's interpretation. A frame that
/// fails its integrity check or cannot be interpreted is answered with an
/// abort notification instead. Nothing becomes visible here.
pub fn reflect(
    fsm: &EndpointFsm,
    store: &mut VisibleStore,
    rx: &Received,
    own_schema: u8,
    now: Tick,
) -> ReflectOutcome {
    let f = &rx.frame;
    let mut out = ReflectOutcome {
        steps: Vec::new(),
        fsm: fsm.clone(),
        reflection: None,
        abort: None,
        interpretation: None,
    };
    let arrived = LinkEvent::DataArrived { txn: f.txn, tiebreak: f.tiebreak };
    let step = fsm.step(&arrived, now);
    let accepted = matches!(step.outcome, Outcome::Transition { .. } | Outcome::Yielded { .. })
        && step.fsm.role == Some(Role::Responder)
        && step.fsm.current_txn == Some(f.txn);
    out.fsm = step.fsm.clone();
    out.steps.push((arrived, step));
    if !accepted {
        return out;
    }

    let interpreted = if rx.intact {
        f.payload_bytes()
            .ok_or(FailReason::Malformed)
            .and_then(|p| decode_fields(own_schema, p).map_err(|_| FailReason::Malformed))
    } else {
        Err(FailReason::Integrity)
    };

    match interpreted {
        Ok(fields) => {
            let d = digest(f.txn, own_schema, &fields);
            let agrees = f.digest() == Some(d);
            store.stage(f.txn, fields.clone());
            out.interpretation = Some(Interpretation { fields, digest: d, agrees });
            let ev = LinkEvent::ValidationOk { txn: f.txn };
            let step = out.fsm.step(&ev, now);
            out.fsm = step.fsm.clone();
            out.steps.push((ev, step));
            out.reflection = Some(Frame {
                kind: FrameKind::Reflection,
                txn: f.txn,
                tiebreak: f.tiebreak,
                schema_version: own_schema,
                body: d.to_le_bytes().to_vec(),
                emit_tick: now,
            });
        }
        Err(reason) => {
            let ev = LinkEvent::ValidationFail { txn: f.txn, reason };
            let step = out.fsm.step(&ev, now);
            out.fsm = step.fsm.clone();
            out.steps.push((ev, step));
            out.abort = Some(abort_frame(f.txn, f.tiebreak, own_schema, Some(reason), now));
        }
    }
    out
}

/// Abort notification; `reason` is `None` for a timeout.
pub fn abort_frame(txn: TxnId, tiebreak: TieBreak, schema: u8, reason: Option<FailReason>, now: Tick) -> Frame {
    let code = match reason {
        None => 0,
        Some(FailReason::Integrity) => 1,
        Some(FailReason::SemanticDivergence) => 2,
        Some(FailReason::Malformed) => 3,
    };
    Frame { kind: FrameKind::AbortNotify, txn, tiebreak, schema_version: schema, body: vec![code], emit_tick: now }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "reason", rename_all = "snake_case")]
pub enum Validation {
    Commit,
    Abort(FailReason),
}

/// Initiator-side check of a reflection: commit only if the reflected
/// digest equals the digest of the initiator's own interpretation.
pub fn validate_reflection(txn: &Transaction, rx: &Received) -> Result<Validation, TxnError> {
    if rx.frame.kind != FrameKind::Reflection || rx.frame.txn != txn.txn_id {
        return Err(TxnError::StrayFrame(rx.frame.txn));
    }
    if !rx.intact {
        return Ok(Validation::Abort(FailReason::Integrity));
    }
    Ok(match rx.frame.digest() {
        Some(d) if d == txn.digest => Validation::Commit,
        Some(_) => Validation::Abort(FailReason::SemanticDivergence),
        None => Validation::Abort(FailReason::Malformed),
    })
}

/// Circulation state of the opaque hyperdata token on one link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Circulation {
    pub enabled: bool,
    /// Whether the link is in an indefinite phase (or idle) right now.
    pub indefinite: bool,
    /// Endpoint holding the token at tick 0.
    pub start: Endpoint,
}

/// One hyperdata bounce per tick while circulation is on and the link is
/// indefinite. The frame never reaches a store or an observer.
pub fn circulate_hyperdata(link: &Circulation, tick: Tick) -> Option<Frame> {
    if !(link.enabled && link.indefinite) {
        return None;
    }
    let holder = if tick % 2 == 0 { link.start } else { link.start.peer() };
    Some(Frame {
        kind: FrameKind::Hyperdata,
        txn: TxnId(0),
        tiebreak: TieBreak { endpoint: holder, counter: tick },
        schema_version: 0,
        body: Vec::new(),
        emit_tick: tick,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn writes(pairs: &[(u8, i64)]) -> Vec<FieldWrite> {
        pairs.iter().map(|&(key, value)| FieldWrite { key, value }).collect()
    }

    fn txn(id: u64, w: &[(u8, i64)]) -> Transaction {
        Transaction::new(TxnId(id), Endpoint::A, TieBreak { endpoint: Endpoint::A, counter: 1 }, 1, writes(w))
            .unwrap()
    }

    fn up(ep: Endpoint) -> EndpointFsm {
        EndpointFsm::new(ep, 20).step(&LinkEvent::LinkUp, 0).fsm
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a32(b"a"), 0xe40c292c);
    }

    #[test]
    fn schema_skew_changes_meaning_not_bits() {
        let w = writes(&[(1, 258)]);
        let bytes = encode_fields(1, &w).unwrap();
        assert_eq!(decode_fields(1, &bytes).unwrap(), w);
        let skewed = decode_fields(2, &bytes).unwrap();
        assert_ne!(skewed, w);
        assert_ne!(digest(TxnId(1), 1, &w), digest(TxnId(1), 2, &skewed));
        assert!(decode_fields(3, &bytes).is_err());
        assert!(matches!(decode_fields(1, &bytes[..5]), Err(PayloadError::Truncated { .. })));
    }

    #[test]
    fn frame_wire_layout() {
        let t = txn(7, &[(1, 1)]);
        let f = t.tentative_frame(3);
        let bytes = f.encode().unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + f.body.len() + FCS_LEN);
        assert_eq!(bytes[0], 1);
        assert_eq!(&bytes[1..9], &7u64.to_le_bytes());
        let rx = Frame::decode(&bytes, 3).unwrap();
        assert!(rx.intact);
        assert_eq!(rx.frame, f);
        assert_eq!(rx.frame.digest(), Some(t.digest));
    }

    #[test]
    fn any_body_bit_flip_breaks_integrity() {
        let bytes = txn(7, &[(1, 1), (2, 2)]).tentative_frame(0).encode().unwrap();
        for bit in HEADER_LEN * 8..bytes.len() * 8 {
            let mut corrupted = bytes.clone();
            corrupted[bit / 8] ^= 1 << (bit % 8);
            assert!(!Frame::decode(&corrupted, 0).unwrap().intact, "bit {bit}");
        }
    }

    #[test]
    fn initiate_requires_idle_and_stages() {
        let mut store = VisibleStore::new();
        let t = txn(1, &[(1, 10), (2, 20), (3, 30)]);
        let (step, frame) = initiate(&up(Endpoint::A), &mut store, &t, 0).unwrap();
        assert_eq!(step.fsm.state, LinkState::Tentative);
        assert_eq!(frame.kind, FrameKind::Tentative);
        assert_eq!(frame.payload_bytes(), Some(t.payload.as_slice()));
        // staged fields are not readable
        let snap = store.read(&[1, 2, 3]);
        assert!(snap.values().all(Option::is_none));
        let err = initiate(&step.fsm, &mut store, &txn(2, &[(1, 1)]), 1).unwrap_err();
        assert!(matches!(err, TxnError::Rejected { .. }));
    }

    #[test]
    fn intact_frame_is_reflected_with_interpreted_digest() {
        let t = txn(1, &[(1, 5)]);
        let rx = Received { frame: t.tentative_frame(0), intact: true };
        let mut store = VisibleStore::new();
        let out = reflect(&up(Endpoint::B), &mut store, &rx, 1, 2);
        assert_eq!(out.fsm.state, LinkState::Reflecting);
        let refl = out.reflection.unwrap();
        assert_eq!(refl.digest(), Some(t.digest));
        assert!(out.interpretation.unwrap().agrees);
        assert!(store.committed().is_empty());
        assert!(store.is_staged(TxnId(1)));
    }

    #[test]
    fn corrupted_frame_gets_abort_not_reflection() {
        let t = txn(1, &[(1, 5)]);
        let rx = Received { frame: t.tentative_frame(0), intact: false };
        let out = reflect(&up(Endpoint::B), &mut VisibleStore::new(), &rx, 1, 2);
        assert!(out.reflection.is_none());
        assert_eq!(out.abort.unwrap().kind, FrameKind::AbortNotify);
        assert_eq!(out.fsm.state, LinkState::Aborted);
    }

    #[test]
    fn duplicate_tentative_is_reflected_once() {
        let t = txn(1, &[(1, 5)]);
        let rx = Received { frame: t.tentative_frame(0), intact: true };
        let mut store = VisibleStore::new();
        let first = reflect(&up(Endpoint::B), &mut store, &rx, 1, 2);
        let second = reflect(&first.fsm, &mut store, &rx, 1, 3);
        assert!(first.reflection.is_some());
        assert!(second.reflection.is_none());
        assert_eq!(second.fsm, first.fsm);
    }

    #[test]
    fn validation_compares_digests() {
        let t = txn(1, &[(1, 300)]);
        let good = Received { frame: reflect_frame(&t, 1), intact: true };
        assert_eq!(validate_reflection(&t, &good), Ok(Validation::Commit));
        let skewed = Received { frame: reflect_frame(&t, 2), intact: true };
        assert_eq!(validate_reflection(&t, &skewed), Ok(Validation::Abort(FailReason::SemanticDivergence)));
        let mut stray = good.clone();
        stray.frame.txn = TxnId(99);
        assert_eq!(validate_reflection(&t, &stray), Err(TxnError::StrayFrame(TxnId(99))));
    }

    fn reflect_frame(t: &Transaction, schema: u8) -> Frame {
        let rx = Received { frame: t.tentative_frame(0), intact: true };
        reflect(&up(Endpoint::B), &mut VisibleStore::new(), &rx, schema, 1).reflection.unwrap()
    }

    #[test]
    fn commit_is_atomic_and_idempotent() {
        let mut store = VisibleStore::new();
        store.stage(TxnId(1), writes(&[(1, 1), (2, 2)]));
        assert!(store.read(&[1, 2]).values().all(Option::is_none));
        assert_eq!(store.commit_visibility(TxnId(1)), Ok(CommitEffect::Visible(vec![1, 2])));
        let snap = store.read(&[1, 2]);
        assert_eq!(snap[&1], Some(Versioned { value: 1, txn: TxnId(1) }));
        assert_eq!(snap[&2], Some(Versioned { value: 2, txn: TxnId(1) }));
        assert_eq!(store.commit_visibility(TxnId(1)), Ok(CommitEffect::AlreadyVisible));
        assert_eq!(store.commit_visibility(TxnId(5)), Err(TxnError::UnknownTxn(TxnId(5))));
    }

    #[test]
    fn rollback_semantics() {
        let mut store = VisibleStore::new();
        store.stage(TxnId(1), writes(&[(1, 1)]));
        store.abort_rollback(TxnId(1)).unwrap();
        store.abort_rollback(TxnId(1)).unwrap();
        assert!(store.read(&[1])[&1].is_none());
        assert_eq!(store.commit_visibility(TxnId(1)), Err(TxnError::CommitAfterAbort(TxnId(1))));

        store.stage(TxnId(2), writes(&[(1, 2)]));
        store.commit_visibility(TxnId(2)).unwrap();
        assert_eq!(store.abort_rollback(TxnId(2)), Err(TxnError::AbortAfterCommit(TxnId(2))));
    }

    #[test]
    fn phases_only_move_forward() {
        let mut t = txn(1, &[(1, 1)]);
        t.mark_crossed().unwrap();
        assert_eq!(t.orientation, None);
        t.resolve(Endpoint::A).unwrap();
        t.complete(Completion::Commit).unwrap();
        assert!(t.resolve(Endpoint::B).is_err());
        assert!(t.complete(Completion::Abort).is_err());
        assert!(t.mark_crossed().is_err());
    }

    #[test]
    fn hyperdata_only_while_enabled_and_indefinite() {
        let on = Circulation { enabled: true, indefinite: true, start: Endpoint::B };
        let f = circulate_hyperdata(&on, 0).unwrap();
        assert_eq!(f.kind, FrameKind::Hyperdata);
        assert_eq!(f.tiebreak.endpoint, Endpoint::B);
        assert_eq!(circulate_hyperdata(&on, 1).unwrap().tiebreak.endpoint, Endpoint::A);
        assert!(circulate_hyperdata(&Circulation { enabled: false, ..on }, 0).is_none());
        assert!(circulate_hyperdata(&Circulation { indefinite: false, ..on }, 0).is_none());
    }
}

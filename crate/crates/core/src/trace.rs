//! Trace records and their line-delimited text form.
//!
//! The first line is a header object, every following line one record with
//! the fixed field order `tick, ch, ep, txn, body`. Field order and naming
//! are part of the format; golden files depend on them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{Endpoint, Tick, TxnId};
use crate::ilt::TensorClock;
use crate::link_fsm::{LinkState, TieBreak};
use crate::transaction::{FieldKey, FieldWrite, FrameKind, Validation, Versioned};

pub const TRACE_FORMAT: &str = "oae-link-trace";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Wire,
    Fsm,
    Txn,
    Observer,
    Auditor,
    Kbp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Oae,
    Fito,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Oae => "oae",
            Mode::Fito => "fito",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub scenario: String,
    pub mode: Mode,
    pub seed: u64,
}

impl Header {
    pub fn new(scenario: impl Into<String>, mode: Mode, seed: u64) -> Header {
        Header { format: TRACE_FORMAT.to_string(), version: TRACE_VERSION, scenario: scenario.into(), mode, seed }
    }
}

/// Observer view of one key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReadEntry {
    pub key: FieldKey,
    pub value: Option<i64>,
    pub txn: Option<TxnId>,
}

impl ReadEntry {
    pub fn new(key: FieldKey, v: Option<Versioned>) -> ReadEntry {
        ReadEntry { key, value: v.map(|v| v.value), txn: v.map(|v| v.txn) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Body {
    // wire
    Emit { frame: u64, frame_kind: FrameKind, to: Endpoint, bytes: String, tx_complete: Tick },
    Drop { frame: u64 },
    Duplicate { frame: u64, copy: u64 },
    Reorder { frame: u64, with: u64 },
    Corrupt { frame: u64, bit: u32 },
    Deliver { frame: u64, frame_kind: FrameKind, intact: bool, copy_of: Option<u64> },
    InFlight { frame: u64 },
    Hyperdata { holder: Endpoint },

    // fsm
    Transition { from: LinkState, event: String, to: LinkState, cause: Option<u64> },
    Ignored { state: LinkState, event: String, reason: String, cause: Option<u64> },
    Rejected { state: LinkState, event: String, reason: String, cause: Option<u64> },
    Yield { dropped: TxnId, adopted: TxnId, own: TieBreak, peer: TieBreak, cause: Option<u64> },

    // txn
    Initiated { schema: u8, writes: Vec<FieldWrite>, digest: u64 },
    Interpreted { schema: u8, digest: u64, agrees: bool },
    Validated { validation: Validation },
    Visible { keys: Vec<FieldKey>, digest: u64 },
    Rollback,
    Clock { clock: TensorClock },
    Retry { frame: u64, attempt: u32 },
    FailStop { retries: u32 },
    Completed { retries: u32 },
    Deferred { reason: String },

    // observer
    Read { entries: Vec<ReadEntry> },

    // kbp
    Kbp { mask: String, known_bits: String, round: u64, balanced: bool, eligible: bool, ont: String },

    // auditor
    CommitCheck { eligible: bool },
    /// One endpoint committed, the other aborted.
    Asymmetric { committed: Endpoint },
    HorizonSweep,
}

impl Body {
    pub fn channel(&self) -> Channel {
        match self {
            Body::Emit { .. }
            | Body::Drop { .. }
            | Body::Duplicate { .. }
            | Body::Reorder { .. }
            | Body::Corrupt { .. }
            | Body::Deliver { .. }
            | Body::InFlight { .. }
            | Body::Hyperdata { .. } => Channel::Wire,
            Body::Transition { .. } | Body::Ignored { .. } | Body::Rejected { .. } | Body::Yield { .. } => {
                Channel::Fsm
            }
            Body::Read { .. } => Channel::Observer,
            Body::Kbp { .. } => Channel::Kbp,
            Body::CommitCheck { .. } | Body::Asymmetric { .. } | Body::HorizonSweep => Channel::Auditor,
            _ => Channel::Txn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub tick: Tick,
    pub ch: Channel,
    pub ep: Option<Endpoint>,
    pub txn: Option<TxnId>,
    pub body: Body,
}

impl Record {
    pub fn new(tick: Tick, ep: Option<Endpoint>, txn: Option<TxnId>, body: Body) -> Record {
        Record { tick, ch: body.channel(), ep, txn, body }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("records always serialize")
    }

    /// State change `(from, to)` if this is a transition record.
    pub fn transition(&self) -> Option<(LinkState, LinkState)> {
        match self.body {
            Body::Transition { from, to, .. } => Some((from, to)),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("empty trace")]
    Empty,
    #[error("bad header: {0}")]
    Header(serde_json::Error),
    #[error("trace format `{found}` v{version} is not {TRACE_FORMAT} v{TRACE_VERSION}")]
    Version { found: String, version: u32 },
    #[error("line {line}: {source}")]
    Record { line: usize, source: serde_json::Error },
    #[error("line {line}: tick {tick} goes backwards from {prev}")]
    TickOrder { line: usize, tick: Tick, prev: Tick },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub header: Header,
    pub records: Vec<Record>,
}

impl Trace {
    pub fn new(header: Header) -> Trace {
        Trace { header, records: Vec::new() }
    }

    pub fn push(&mut self, record: Record) {
        debug_assert!(self.records.last().is_none_or(|r| r.tick <= record.tick));
        self.records.push(record);
    }

    pub fn last_tick(&self) -> Tick {
        self.records.last().map_or(0, |r| r.tick)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(out, "{}", r.to_line());
        }
        out
    }

    pub fn parse(text: &str) -> Result<Trace, TraceError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(TraceError::Empty)?;
        let header: Header = serde_json::from_str(first).map_err(TraceError::Header)?;
        if header.format != TRACE_FORMAT || header.version != TRACE_VERSION {
            return Err(TraceError::Version { found: header.format, version: header.version });
        }
        let mut records = Vec::new();
        let mut prev = 0;
        for (i, line) in lines {
            let record: Record =
                serde_json::from_str(line).map_err(|source| TraceError::Record { line: i + 1, source })?;
            if record.tick < prev {
                return Err(TraceError::TickOrder { line: i + 1, tick: record.tick, prev });
            }
            prev = record.tick;
            records.push(record);
        }
        Ok(Trace { header, records })
    }

    pub fn channel(&self, ch: Channel) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.ch == ch)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

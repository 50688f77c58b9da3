//! The six-state endpoint machine.
//!
//! `step` is the only way to move an [`EndpointFsm`], and it only ever
//! produces the eight transitions listed in [`TRANSITIONS`]. Anything
//! else is recorded as ignored (well-formed but not applicable) or
//! rejected (malformed for this endpoint), with the state untouched.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ids::{Endpoint, Tick, TxnId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LinkState {
    Reset,
    Idle,
    Tentative,
    Reflecting,
    Committed,
    Aborted,
}

impl LinkState {
    pub const ALL: [LinkState; 6] = [
        LinkState::Reset,
        LinkState::Idle,
        LinkState::Tentative,
        LinkState::Reflecting,
        LinkState::Committed,
        LinkState::Aborted,
    ];

    /// Tentative or reflecting: a transaction is outstanding.
    pub fn is_open(self) -> bool {
        matches!(self, LinkState::Tentative | LinkState::Reflecting)
    }
}

impl fmt::Display for LinkState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LinkState::Reset => "RESET",
            LinkState::Idle => "IDLE",
            LinkState::Tentative => "TENTATIVE",
            LinkState::Reflecting => "REFLECTING",
            LinkState::Committed => "COMMITTED",
            LinkState::Aborted => "ABORTED",
        })
    }
}

/// The mandatory transitions, in order.
pub const TRANSITIONS: [(LinkState, LinkState); 8] = [
    (LinkState::Reset, LinkState::Idle),
    (LinkState::Idle, LinkState::Tentative),
    (LinkState::Tentative, LinkState::Reflecting),
    (LinkState::Reflecting, LinkState::Committed),
    (LinkState::Tentative, LinkState::Aborted),
    (LinkState::Reflecting, LinkState::Aborted),
    (LinkState::Committed, LinkState::Idle),
    (LinkState::Aborted, LinkState::Idle),
];

pub fn valid_transitions(s: LinkState) -> BTreeSet<LinkState> {
    TRANSITIONS
        .iter()
        .filter(|(from, _)| *from == s)
        .map(|(_, to)| *to)
        .collect()
}

/// 1-based position of `(from, to)` in [`TRANSITIONS`].
pub fn transition_number(from: LinkState, to: LinkState) -> Option<usize> {
    TRANSITIONS.iter().position(|t| *t == (from, to)).map(|i| i + 1)
}

/// Which side of the current transaction an endpoint is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Initiator,
    Responder,
}

/// Total order used to settle crossed initiations: the lower tuple keeps
/// the initiator role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TieBreak {
    pub endpoint: Endpoint,
    pub counter: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailReason {
    Integrity,
    SemanticDivergence,
    Malformed,
}

impl fmt::Display for FailReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailReason::Integrity => "integrity",
            FailReason::SemanticDivergence => "semantic-divergence",
            FailReason::Malformed => "malformed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
pub enum LinkEvent {
    LinkUp,
    Initiate { txn: TxnId, tiebreak: TieBreak },
    DataArrived { txn: TxnId, tiebreak: TieBreak },
    ReflectionArrived { txn: TxnId },
    ValidationOk { txn: TxnId },
    ValidationFail { txn: TxnId, reason: FailReason },
    Timeout { txn: TxnId },
    PeerAbort { txn: TxnId },
    CommitAck { txn: TxnId },
    Quiesce,
}

impl LinkEvent {
    pub fn name(&self) -> &'static str {
        match self {
            LinkEvent::LinkUp => "LinkUp",
            LinkEvent::Initiate { .. } => "Initiate",
            LinkEvent::DataArrived { .. } => "DataArrived",
            LinkEvent::ReflectionArrived { .. } => "ReflectionArrived",
            LinkEvent::ValidationOk { .. } => "ValidationOk",
            LinkEvent::ValidationFail { .. } => "ValidationFail",
            LinkEvent::Timeout { .. } => "Timeout",
            LinkEvent::PeerAbort { .. } => "PeerAbort",
            LinkEvent::CommitAck { .. } => "CommitAck",
            LinkEvent::Quiesce => "Quiesce",
        }
    }

    pub fn txn(&self) -> Option<TxnId> {
        match *self {
            LinkEvent::LinkUp | LinkEvent::Quiesce => None,
            LinkEvent::Initiate { txn, .. }
            | LinkEvent::DataArrived { txn, .. }
            | LinkEvent::ReflectionArrived { txn }
            | LinkEvent::ValidationOk { txn }
            | LinkEvent::ValidationFail { txn, .. }
            | LinkEvent::Timeout { txn }
            | LinkEvent::PeerAbort { txn }
            | LinkEvent::CommitAck { txn } => Some(txn),
        }
    }
}

/// Side effects requested by a step. The driver carries them out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    EmitTentative(TxnId),
    EmitReflection(TxnId),
    EmitCommitAck(TxnId),
    EmitAbortNotify(TxnId),
    /// Stage an incoming payload as provisional.
    StageProvisional(TxnId),
    /// Drop everything staged for the transaction.
    DiscardTentative(TxnId),
    /// This endpoint now holds committed state for the transaction.
    /// Only produced by `REFLECTING -> COMMITTED`.
    ExposeCommitted(TxnId),
    ArmTimeout { txn: TxnId, deadline: Tick },
    ScheduleQuiesce,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Transition { from: LinkState, to: LinkState },
    /// Crossed initiation settled by tie-break: this endpoint dropped its
    /// own transaction and now owes a reflection for the peer's.
    Yielded { dropped: TxnId, adopted: TxnId },
    Ignored { reason: &'static str },
    Rejected { reason: &'static str },
}

impl Outcome {
    pub fn changed_state(&self) -> bool {
        matches!(self, Outcome::Transition { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub fsm: EndpointFsm,
    pub outcome: Outcome,
    pub actions: Vec<Action>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EndpointFsm {
    pub endpoint: Endpoint,
    pub state: LinkState,
    /// Present iff the state is tentative or reflecting.
    pub current_txn: Option<TxnId>,
    /// The transaction that just committed or aborted, until back in IDLE.
    pub concluded_txn: Option<TxnId>,
    pub role: Option<Role>,
    pub tiebreak: Option<TieBreak>,
    pub timeout_deadline: Option<Tick>,
    /// Ticks from entering an open state until it times out.
    pub timeout: Tick,
}

impl EndpointFsm {
    pub fn new(endpoint: Endpoint, timeout: Tick) -> EndpointFsm {
        EndpointFsm {
            endpoint,
            state: LinkState::Reset,
            current_txn: None,
            concluded_txn: None,
            role: None,
            tiebreak: None,
            timeout_deadline: None,
            timeout,
        }
    }

    /// Transaction this endpoint is working on or has just concluded.
    pub fn txn(&self) -> Option<TxnId> {
        self.current_txn.or(self.concluded_txn)
    }

    fn ignored(&self, reason: &'static str) -> Step {
        Step { fsm: self.clone(), outcome: Outcome::Ignored { reason }, actions: Vec::new() }
    }

    fn rejected(&self, reason: &'static str) -> Step {
        Step { fsm: self.clone(), outcome: Outcome::Rejected { reason }, actions: Vec::new() }
    }

    fn goto(&self, to: LinkState, actions: Vec<Action>, update: impl FnOnce(&mut EndpointFsm)) -> Step {
        let mut fsm = self.clone();
        update(&mut fsm);
        fsm.state = to;
        Step { fsm, outcome: Outcome::Transition { from: self.state, to }, actions }
    }

    fn conclude(&self, to: LinkState, mut actions: Vec<Action>) -> Step {
        let txn = self.current_txn;
        actions.push(Action::ScheduleQuiesce);
        self.goto(to, actions, |f| {
            f.concluded_txn = txn;
            f.current_txn = None;
            f.timeout_deadline = None;
        })
    }

    fn abort(&self, notify: bool) -> Step {
        let txn = self.current_txn.expect("open state carries a transaction");
        let mut actions = vec![Action::DiscardTentative(txn)];
        if notify {
            actions.push(Action::EmitAbortNotify(txn));
        }
        self.conclude(LinkState::Aborted, actions)
    }

    pub fn step(&self, ev: &LinkEvent, now: Tick) -> Step {
        use LinkState::*;

        if let (Some(txn), Some(cur)) = (ev.txn(), self.current_txn) {
            let fresh = matches!(ev, LinkEvent::Initiate { .. } | LinkEvent::DataArrived { .. });
            if txn != cur && !fresh {
                return self.ignored("event for a transaction that is not current");
            }
        }

        match (self.state, *ev) {
            (Reset, LinkEvent::LinkUp) => self.goto(Idle, Vec::new(), |_| {}),
            (Reset, _) => self.ignored("link not up"),
            (_, LinkEvent::LinkUp) => self.ignored("link already up"),

            (Idle, LinkEvent::Initiate { txn, tiebreak }) => {
                if tiebreak.endpoint != self.endpoint {
                    return self.rejected("initiation tie-break names the peer");
                }
                let deadline = now + self.timeout;
                self.goto(
                    Tentative,
                    vec![Action::EmitTentative(txn), Action::ArmTimeout { txn, deadline }],
                    |f| {
                        f.current_txn = Some(txn);
                        f.concluded_txn = None;
                        f.role = Some(Role::Initiator);
                        f.tiebreak = Some(tiebreak);
                        f.timeout_deadline = Some(deadline);
                    },
                )
            }
            (_, LinkEvent::Initiate { .. }) => self.rejected("initiate requires IDLE"),

            (Idle, LinkEvent::DataArrived { txn, tiebreak }) => {
                if tiebreak.endpoint == self.endpoint {
                    return self.rejected("tentative frame claims this endpoint as initiator");
                }
                let deadline = now + self.timeout;
                self.goto(
                    Tentative,
                    vec![Action::StageProvisional(txn), Action::ArmTimeout { txn, deadline }],
                    |f| {
                        f.current_txn = Some(txn);
                        f.concluded_txn = None;
                        f.role = Some(Role::Responder);
                        f.tiebreak = Some(tiebreak);
                        f.timeout_deadline = Some(deadline);
                    },
                )
            }
            (Tentative, LinkEvent::DataArrived { txn, tiebreak }) => {
                let cur = self.current_txn.expect("tentative carries a transaction");
                if txn == cur {
                    return self.ignored("duplicate tentative frame");
                }
                if self.role != Some(Role::Initiator) {
                    return self.ignored("busy with another transaction");
                }
                let own = self.tiebreak.expect("initiator carries its tie-break");
                if tiebreak.endpoint == self.endpoint || tiebreak == own {
                    return self.rejected("malformed tie-break");
                }
                if own < tiebreak {
                    return self.ignored("crossed initiation: peer yields");
                }
                let mut fsm = self.clone();
                let deadline = now + self.timeout;
                fsm.current_txn = Some(txn);
                fsm.role = Some(Role::Responder);
                fsm.tiebreak = Some(tiebreak);
                fsm.timeout_deadline = Some(deadline);
                Step {
                    fsm,
                    outcome: Outcome::Yielded { dropped: cur, adopted: txn },
                    actions: vec![
                        Action::DiscardTentative(cur),
                        Action::StageProvisional(txn),
                        Action::ArmTimeout { txn, deadline },
                    ],
                }
            }
            (_, LinkEvent::DataArrived { .. }) => self.ignored("busy with another transaction"),

            (Tentative, LinkEvent::ValidationOk { txn }) => match self.role {
                Some(Role::Responder) => {
                    let deadline = now + self.timeout;
                    self.goto(
                        Reflecting,
                        vec![Action::EmitReflection(txn), Action::ArmTimeout { txn, deadline }],
                        |f| f.timeout_deadline = Some(deadline),
                    )
                }
                _ => self.ignored("reflection required"),
            },
            (Tentative, LinkEvent::ReflectionArrived { .. }) => match self.role {
                Some(Role::Initiator) => self.goto(Reflecting, Vec::new(), |_| {}),
                _ => self.rejected("responder cannot receive a reflection"),
            },
            (Tentative, LinkEvent::ValidationFail { .. }) | (Tentative, LinkEvent::Timeout { .. }) => {
                self.abort(true)
            }
            (Tentative, LinkEvent::PeerAbort { .. }) => self.abort(false),
            (Tentative, LinkEvent::CommitAck { .. }) => self.ignored("commit requires reflection"),

            (Reflecting, LinkEvent::ValidationOk { txn }) => match self.role {
                Some(Role::Initiator) => self.conclude(
                    Committed,
                    vec![Action::EmitCommitAck(txn), Action::ExposeCommitted(txn)],
                ),
                _ => self.ignored("awaiting commit acknowledgement"),
            },
            (Reflecting, LinkEvent::CommitAck { txn }) => match self.role {
                Some(Role::Responder) => self.conclude(Committed, vec![Action::ExposeCommitted(txn)]),
                _ => self.rejected("initiator cannot receive a commit acknowledgement"),
            },
            (Reflecting, LinkEvent::ValidationFail { .. }) | (Reflecting, LinkEvent::Timeout { .. }) => {
                self.abort(true)
            }
            (Reflecting, LinkEvent::PeerAbort { .. }) => self.abort(false),
            (Reflecting, LinkEvent::ReflectionArrived { .. }) => self.ignored("duplicate reflection"),

            (Committed, LinkEvent::Quiesce) | (Aborted, LinkEvent::Quiesce) => {
                self.goto(Idle, Vec::new(), |f| {
                    f.concluded_txn = None;
                    f.role = None;
                    f.tiebreak = None;
                })
            }
            (Committed, LinkEvent::PeerAbort { .. }) => {
                self.ignored("committed state must not be silently revoked")
            }
            (_, LinkEvent::Quiesce) => self.ignored("nothing to quiesce"),
            (_, LinkEvent::Timeout { .. }) => self.ignored("no outstanding transaction"),
            (_, _) => self.ignored("no transition for event in this state"),
        }
    }

    /// Fires the armed timeout if its deadline has passed.
    pub fn on_timeout(&self, now: Tick) -> Step {
        match (self.current_txn, self.timeout_deadline) {
            (Some(txn), Some(deadline)) if deadline <= now && self.state.is_open() => {
                self.step(&LinkEvent::Timeout { txn }, now)
            }
            _ => self.ignored("no expired deadline"),
        }
    }
}

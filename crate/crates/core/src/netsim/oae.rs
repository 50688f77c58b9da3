//! Reflect-before-commit link engine.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::ids::{Endpoint, TxnId};
use crate::ilt::{tc_init, tc_on_initiate, tc_on_round_complete, TensorClock};
use crate::kbp::{commit_eligible, merge_reflection, EpiRegister, OntRegister, Position, ReflectedBit};
use crate::link_fsm::{Action, EndpointFsm, FailReason, LinkEvent, LinkState, Outcome, Role, Step, TieBreak};
use crate::trace::{Body, ReadEntry};
use crate::transaction::{
    abort_frame, initiate, reflect, validate_reflection, CommitEffect, Completion, Frame, FrameKind, Received,
    Transaction, TxnPhase, Validation, VisibleStore,
};

use super::{Protocol, Scenario, Timer, World};

#[derive(Debug, Clone)]
struct Side {
    fsm: EndpointFsm,
    store: VisibleStore,
    epi: EpiRegister,
    schema: u8,
    pending: VecDeque<usize>,
    counter: u64,
    /// `(frame kind, txn)` pairs already delivered here. Later copies are
    /// dropped by the receiver.
    seen: BTreeSet<(u8, TxnId)>,
}

#[derive(Debug, Clone)]
struct Entry {
    txn: Transaction,
    committed: [bool; 2],
    aborted: [bool; 2],
    /// Responder's interpreted digest.
    interpreted: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct OaeLink {
    sides: [Side; 2],
    txns: BTreeMap<TxnId, Entry>,
    clock: TensorClock,
    ont: OntRegister,
    next_txn: u64,
}

/// Appends the trace record for one state-machine step.
pub(crate) fn log_step(
    w: &mut World,
    before: &EndpointFsm,
    ev: &LinkEvent,
    step: &Step,
    cause: Option<u64>,
) {
    let ep = before.endpoint;
    let txn = ev.txn().or(before.txn());
    let event = ev.name().to_string();
    let body = match step.outcome {
        Outcome::Transition { from, to } => Body::Transition { from, event, to, cause },
        Outcome::Yielded { dropped, adopted } => Body::Yield {
            dropped,
            adopted,
            own: before.tiebreak.expect("initiator carries a tie-break"),
            peer: step.fsm.tiebreak.expect("responder carries a tie-break"),
            cause,
        },
        Outcome::Ignored { reason } => Body::Ignored { state: before.state, event, reason: reason.into(), cause },
        Outcome::Rejected { reason } => Body::Rejected { state: before.state, event, reason: reason.into(), cause },
    };
    w.record(Some(ep), txn, body);
}

fn fail_reason(ev: &LinkEvent) -> Option<FailReason> {
    match ev {
        LinkEvent::ValidationFail { reason, .. } => Some(*reason),
        _ => None,
    }
}

impl OaeLink {
    pub fn new(scenario: &Scenario) -> OaeLink {
        let timeout = scenario.link.timeout();
        let side = |ep: Endpoint| Side {
            fsm: EndpointFsm::new(ep, timeout),
            store: VisibleStore::new(),
            epi: EpiRegister::own_half(ep, false, 0),
            schema: scenario.endpoints.schema(ep),
            pending: VecDeque::new(),
            counter: 0,
            seen: BTreeSet::new(),
        };
        OaeLink {
            sides: [side(Endpoint::A), side(Endpoint::B)],
            txns: BTreeMap::new(),
            clock: tc_init(),
            ont: OntRegister::default(),
            next_txn: 1,
        }
    }

    fn side(&mut self, ep: Endpoint) -> &mut Side {
        &mut self.sides[ep.index()]
    }

    /// Records `step`, adopts its state and carries out its actions.
    /// Frames the step asks for are built here unless `supplied`.
    fn apply(&mut self, w: &mut World, ep: Endpoint, ev: &LinkEvent, step: Step, cause: Option<u64>, supplied: bool) {
        let before = self.sides[ep.index()].fsm.clone();
        log_step(w, &before, ev, &step, cause);
        if let Outcome::Yielded { dropped, adopted } = step.outcome {
            let winner = step.fsm.tiebreak.map_or(ep.peer(), |t| t.endpoint);
            for t in [adopted, dropped] {
                if let Some(e) = self.txns.get_mut(&t) {
                    if e.txn.phase == TxnPhase::Indefinite {
                        let _ = e.txn.resolve(winner);
                    }
                }
            }
        }
        let committed_initiator =
            matches!(step.outcome, Outcome::Transition { to: LinkState::Committed, .. })
                && step.fsm.role == Some(Role::Initiator);
        self.side(ep).fsm = step.fsm.clone();

        for action in step.actions {
            match action {
                Action::EmitTentative(_) | Action::StageProvisional(_) | Action::EmitReflection(_) => {}
                Action::EmitAbortNotify(txn) => {
                    if !supplied {
                        let tb = before.tiebreak.unwrap_or(TieBreak { endpoint: ep, counter: 0 });
                        let schema = self.sides[ep.index()].schema;
                        let f = abort_frame(txn, tb, schema, fail_reason(ev), w.now());
                        w.emit(ep, &f);
                    }
                }
                Action::EmitCommitAck(txn) => {
                    let e = &self.txns[&txn];
                    let f = Frame {
                        kind: FrameKind::CommitAck,
                        txn,
                        tiebreak: e.txn.tiebreak,
                        schema_version: e.txn.schema_version,
                        body: e.txn.digest.to_le_bytes().to_vec(),
                        emit_tick: w.now(),
                    };
                    w.emit(ep, &f);
                }
                Action::DiscardTentative(txn) => self.discard(w, ep, txn),
                Action::ExposeCommitted(txn) => self.on_commit(w, ep, txn),
                Action::ArmTimeout { txn, deadline } => {
                    w.schedule(deadline, super::Event::Timer { ep, txn, timer: Timer::Timeout })
                }
                Action::ScheduleQuiesce => {
                    // A committed initiator keeps its register until the
                    // commit acknowledgement has reached the peer.
                    let delay = if committed_initiator { w.params().one_way_delay + 1 } else { 1 };
                    let txn = step.fsm.concluded_txn.unwrap_or(TxnId(0));
                    w.schedule(w.now() + delay, super::Event::Timer { ep, txn, timer: Timer::Quiesce });
                }
            }
        }
    }

    fn discard(&mut self, w: &mut World, ep: Endpoint, txn: TxnId) {
        let _ = self.side(ep).store.abort_rollback(txn);
        w.record(Some(ep), Some(txn), Body::Rollback);
        if let Some(e) = self.txns.get_mut(&txn) {
            e.aborted[ep.index()] = true;
            if !matches!(e.txn.phase, TxnPhase::Completed(_)) {
                let _ = e.txn.complete(Completion::Abort);
            }
            if e.committed[ep.peer().index()] {
                w.record(None, Some(txn), Body::Asymmetric { committed: ep.peer() });
            }
        }
    }

    fn on_commit(&mut self, w: &mut World, ep: Endpoint, txn: TxnId) {
        let eligible = commit_eligible(&self.sides[0].epi, &self.sides[1].epi).unwrap_or(false);
        w.record(Some(ep), Some(txn), Body::CommitCheck { eligible });
        let Some(e) = self.txns.get_mut(&txn) else { return };
        e.committed[ep.index()] = true;
        if !(e.committed[0] && e.committed[1]) {
            return;
        }
        // Bilateral: both stores expose the transaction in the same tick.
        let initiator = e.txn.initiator;
        let digests = [e.txn.digest, e.interpreted.unwrap_or(e.txn.digest)];
        let _ = e.txn.complete(Completion::Commit);
        for side in Endpoint::BOTH {
            let digest = if side == initiator { digests[0] } else { digests[1] };
            if let Ok(CommitEffect::Visible(keys)) = self.side(side).store.commit_visibility(txn) {
                w.record(Some(side), Some(txn), Body::Visible { keys, digest });
            }
        }
        self.clock = tc_on_round_complete(self.clock).expect("round counter overflow");
        w.record(None, Some(txn), Body::Clock { clock: self.clock });
    }

    fn start_round(&mut self, ep: Endpoint) {
        let d = self.clock.d;
        self.side(ep).epi = EpiRegister::own_half(ep, true, d);
        self.ont.set(Position::proposal(ep), true);
    }

    fn learn(&mut self, ep: Endpoint, value: bool) {
        let bit = ReflectedBit { position: Position::digest(ep.peer()), value, round: self.clock.d };
        if let Ok(merged) = merge_reflection(&self.sides[ep.index()].epi, bit) {
            self.side(ep).epi = merged;
        }
    }

    fn begin(&mut self, w: &mut World, script: usize) {
        let spec = w.scenario().initiate[script].clone();
        let ep = spec.endpoint;
        let txn_id = TxnId(self.next_txn);
        self.next_txn += 1;
        let side = self.side(ep);
        side.counter += 1;
        let tiebreak = TieBreak { endpoint: ep, counter: side.counter };
        let mut txn = Transaction::new(txn_id, ep, tiebreak, side.schema, spec.writes.clone())
            .expect("validated scenario writes encode");

        // Omniscient crossing detection: the peer is waiting on its own
        // initiation that has not reached this endpoint yet.
        let peer = &self.sides[ep.peer().index()].fsm;
        if let (LinkState::Tentative, Some(Role::Initiator), Some(other)) = (peer.state, peer.role, peer.current_txn) {
            if !self.sides[ep.index()].seen.contains(&(FrameKind::Tentative.code(), other)) {
                let _ = txn.mark_crossed();
                if let Some(e) = self.txns.get_mut(&other) {
                    let _ = e.txn.mark_crossed();
                }
            }
        }

        let side = &mut self.sides[ep.index()];
        let (step, frame) = initiate(&side.fsm, &mut side.store, &txn, w.now()).expect("endpoint is IDLE");
        w.record(
            Some(ep),
            Some(txn_id),
            Body::Initiated { schema: txn.schema_version, writes: txn.writes.clone(), digest: txn.digest },
        );
        self.clock = tc_on_initiate(self.clock, ep).expect("initiation counter overflow");
        w.record(Some(ep), Some(txn_id), Body::Clock { clock: self.clock });
        self.txns.insert(txn_id, Entry { txn, committed: [false; 2], aborted: [false; 2], interpreted: None });
        let ev = LinkEvent::Initiate { txn: txn_id, tiebreak };
        self.apply(w, ep, &ev, step, None, false);
        self.start_round(ep);
        w.emit(ep, &frame);
    }

    fn on_tentative(&mut self, w: &mut World, ep: Endpoint, id: u64, rx: Received) {
        let side = &mut self.sides[ep.index()];
        let out = reflect(&side.fsm, &mut side.store, &rx, side.schema, w.now());
        let mut steps = out.steps.into_iter();
        let (ev, step) = steps.next().expect("data arrival is always stepped");
        let accepted = out.interpretation.is_some() || out.abort.is_some();
        self.apply(w, ep, &ev, step, Some(id), true);
        if !accepted {
            return;
        }
        self.start_round(ep);
        let txn = rx.frame.txn;
        if let Some(interp) = &out.interpretation {
            w.record(
                Some(ep),
                Some(txn),
                Body::Interpreted { schema: self.sides[ep.index()].schema, digest: interp.digest, agrees: interp.agrees },
            );
            let truth = self.txns.get(&txn).is_some_and(|e| e.txn.digest == interp.digest);
            self.ont.set(Position::ADigest, truth);
            self.ont.set(Position::BDigest, truth);
            self.learn(ep, interp.agrees);
            if let Some(e) = self.txns.get_mut(&txn) {
                e.interpreted = Some(interp.digest);
            }
        }
        for (ev, step) in steps {
            self.apply(w, ep, &ev, step, Some(id), true);
        }
        if let Some(f) = out.reflection.as_ref().or(out.abort.as_ref()) {
            w.emit(ep, f);
        }
    }

    fn on_reflection(&mut self, w: &mut World, ep: Endpoint, id: u64, rx: Received) {
        let txn = rx.frame.txn;
        let fsm = self.sides[ep.index()].fsm.clone();
        let awaiting = fsm.state == LinkState::Tentative
            && fsm.role == Some(Role::Initiator)
            && fsm.current_txn == Some(txn);
        if awaiting && !rx.intact {
            // A damaged reflection cannot move the initiator forward.
            let validation = Validation::Abort(FailReason::Integrity);
            w.record(Some(ep), Some(txn), Body::Validated { validation });
            let ev = LinkEvent::ValidationFail { txn, reason: FailReason::Integrity };
            let step = fsm.step(&ev, w.now());
            self.apply(w, ep, &ev, step, Some(id), false);
            return;
        }
        let ev = LinkEvent::ReflectionArrived { txn };
        let step = fsm.step(&ev, w.now());
        let moved = step.outcome.changed_state();
        self.apply(w, ep, &ev, step, Some(id), false);
        if !moved {
            return;
        }
        let e = &self.txns[&txn];
        let validation = validate_reflection(&e.txn, &rx).expect("reflection matches the current transaction");
        w.record(Some(ep), Some(txn), Body::Validated { validation });
        self.learn(ep, rx.frame.digest() == Some(e.txn.digest));
        let ev = match validation {
            Validation::Commit => LinkEvent::ValidationOk { txn },
            Validation::Abort(reason) => LinkEvent::ValidationFail { txn, reason },
        };
        let step = self.sides[ep.index()].fsm.step(&ev, w.now());
        self.apply(w, ep, &ev, step, Some(id), false);
    }

    fn on_commit_ack(&mut self, w: &mut World, ep: Endpoint, id: u64, rx: Received) {
        let txn = rx.frame.txn;
        let fsm = self.sides[ep.index()].fsm.clone();
        let awaiting = fsm.state == LinkState::Reflecting
            && fsm.role == Some(Role::Responder)
            && fsm.current_txn == Some(txn);
        let ev = if !awaiting {
            LinkEvent::CommitAck { txn }
        } else if !rx.intact {
            LinkEvent::ValidationFail { txn, reason: FailReason::Integrity }
        } else if rx.frame.digest() != self.txns.get(&txn).and_then(|e| e.interpreted) {
            LinkEvent::ValidationFail { txn, reason: FailReason::SemanticDivergence }
        } else {
            LinkEvent::CommitAck { txn }
        };
        let step = fsm.step(&ev, w.now());
        self.apply(w, ep, &ev, step, Some(id), false);
    }
}

impl Protocol for OaeLink {
    fn start(&mut self, w: &mut World) {
        for ep in Endpoint::BOTH {
            let ev = LinkEvent::LinkUp;
            let step = self.sides[ep.index()].fsm.step(&ev, w.now());
            self.apply(w, ep, &ev, step, None, false);
        }
        w.record(None, None, Body::Clock { clock: self.clock });
    }

    fn on_frame(&mut self, w: &mut World, to: Endpoint, id: u64, rx: Received) {
        let key = (rx.frame.kind.code(), rx.frame.txn);
        let fsm = self.sides[to.index()].fsm.clone();
        if !self.side(to).seen.insert(key) {
            w.record(
                Some(to),
                Some(rx.frame.txn),
                Body::Ignored {
                    state: fsm.state,
                    event: rx.frame.kind.to_string(),
                    reason: "frame already delivered".into(),
                    cause: Some(id),
                },
            );
            return;
        }
        match rx.frame.kind {
            FrameKind::Tentative => self.on_tentative(w, to, id, rx),
            FrameKind::Reflection => self.on_reflection(w, to, id, rx),
            FrameKind::CommitAck => self.on_commit_ack(w, to, id, rx),
            FrameKind::AbortNotify if rx.intact => {
                let ev = LinkEvent::PeerAbort { txn: rx.frame.txn };
                let step = fsm.step(&ev, w.now());
                self.apply(w, to, &ev, step, Some(id), false);
            }
            kind => w.record(
                Some(to),
                Some(rx.frame.txn),
                Body::Ignored {
                    state: fsm.state,
                    event: kind.to_string(),
                    reason: if rx.intact { "unexpected frame kind" } else { "frame check failed" }.into(),
                    cause: Some(id),
                },
            ),
        }
    }

    fn on_timer(&mut self, w: &mut World, ep: Endpoint, txn: TxnId, timer: Timer) {
        let fsm = self.sides[ep.index()].fsm.clone();
        match timer {
            Timer::Timeout => {
                if fsm.current_txn != Some(txn) {
                    return;
                }
                let step = fsm.on_timeout(w.now());
                if step.outcome.changed_state() {
                    self.apply(w, ep, &LinkEvent::Timeout { txn }, step, None, false);
                }
            }
            Timer::Quiesce => {
                let ev = LinkEvent::Quiesce;
                let step = fsm.step(&ev, w.now());
                let idle = step.fsm.state == LinkState::Idle && step.outcome.changed_state();
                self.apply(w, ep, &ev, step, None, false);
                if !idle {
                    return;
                }
                self.side(ep).epi = EpiRegister::own_half(ep, false, self.clock.d);
                self.ont.set(Position::proposal(ep), false);
                if self.sides.iter().all(|s| s.fsm.state == LinkState::Idle) {
                    self.ont.set(Position::ADigest, false);
                    self.ont.set(Position::BDigest, false);
                }
                if let Some(next) = self.side(ep).pending.pop_front() {
                    self.begin(w, next);
                }
            }
            Timer::Send { .. } | Timer::Retry { .. } => {}
        }
    }

    fn on_initiate(&mut self, w: &mut World, script: usize) {
        let ep = w.scenario().initiate[script].endpoint;
        let side = self.side(ep);
        if side.fsm.state == LinkState::Idle && side.pending.is_empty() {
            self.begin(w, script);
        } else {
            side.pending.push_back(script);
            let reason = format!("endpoint is {}", side.fsm.state);
            w.record(Some(ep), None, Body::Deferred { reason });
        }
    }

    fn on_read(&mut self, w: &mut World, script: usize) {
        let spec = w.scenario().read[script].clone();
        let snap = self.sides[spec.endpoint.index()].store.read(&spec.keys);
        let entries = snap.into_iter().map(|(k, v)| ReadEntry::new(k, v)).collect();
        w.record(Some(spec.endpoint), None, Body::Read { entries });
    }

    fn circulating(&self) -> bool {
        self.sides.iter().all(|s| s.fsm.state == LinkState::Idle)
            || self.txns.values().any(|e| e.txn.phase == TxnPhase::Indefinite)
    }

    fn registers(&self) -> [EpiRegister; 2] {
        [self.sides[0].epi, self.sides[1].epi]
    }

    fn ont(&self) -> OntRegister {
        self.ont
    }

    fn sweep(&mut self, w: &mut World) {
        w.record(None, None, Body::HorizonSweep);
        for ep in Endpoint::BOTH {
            let fsm = self.sides[ep.index()].fsm.clone();
            if let Some(txn) = fsm.current_txn {
                let ev = LinkEvent::Timeout { txn };
                let step = fsm.step(&ev, w.now());
                self.apply(w, ep, &ev, step, None, false);
            }
        }
    }
}

//! Completion-on-placement baseline.
//!
//! Each field is written to the peer's memory by its own frame and becomes
//! readable the moment it lands. The sender counts the write complete once
//! every field is acknowledged, retrying a field a bounded number of times
//! and failing stop when retries run out. There is no reflection and no
//! bilateral commit, which is what the invariant checks are meant to expose.

use std::collections::{BTreeMap, VecDeque};

use crate::analysis::{check_invariants, ViolationReport};
use crate::ids::{Endpoint, Tick, TxnId};
use crate::ilt::{tc_init, tc_on_initiate, TensorClock};
use crate::kbp::{commit_eligible, EpiRegister, OntRegister, Position};
use crate::link_fsm::{LinkState, TieBreak};
use crate::netsim::{Event, Protocol, Scenario, Timer, World};
use crate::trace::{Body, ReadEntry, Trace};
use crate::transaction::{
    decode_fields, digest, encode_fields, FieldKey, FieldWrite, Frame, FrameKind, Received, Versioned,
};

/// Remote-writable memory of one endpoint.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FitoEndpoint {
    /// Fields as placed by the peer, readable immediately.
    pub placement_buffer: BTreeMap<FieldKey, Versioned>,
    /// Transactions whose every field has been placed here.
    pub completion_log: Vec<TxnId>,
    placed: BTreeMap<TxnId, BTreeMap<u8, FieldWrite>>,
}

impl FitoEndpoint {
    pub fn read(&self, keys: &[FieldKey]) -> Vec<ReadEntry> {
        keys.iter().map(|k| ReadEntry::new(*k, self.placement_buffer.get(k).copied())).collect()
    }
}

#[derive(Debug, Clone)]
struct Outgoing {
    txn: TxnId,
    tiebreak: TieBreak,
    writes: Vec<FieldWrite>,
    acked: Vec<bool>,
    retries: u32,
}

#[derive(Debug, Clone)]
pub struct FitoLink {
    endpoints: [FitoEndpoint; 2],
    schema: [u8; 2],
    state: [LinkState; 2],
    outgoing: [Option<Outgoing>; 2],
    pending: [VecDeque<usize>; 2],
    counter: [u64; 2],
    epi: [EpiRegister; 2],
    ont: OntRegister,
    clock: TensorClock,
    digests: BTreeMap<TxnId, u64>,
    next_txn: u64,
}

/// Write frame body: one encoded field, then its index and the field count.
fn write_body(schema: u8, w: FieldWrite, index: u8, total: u8) -> Vec<u8> {
    let mut body = encode_fields(schema, &[w]).expect("single field encodes");
    body.extend_from_slice(&[index, total]);
    body
}

impl FitoLink {
    pub fn new(scenario: &Scenario) -> FitoLink {
        FitoLink {
            endpoints: Default::default(),
            schema: [scenario.endpoints.schema(Endpoint::A), scenario.endpoints.schema(Endpoint::B)],
            state: [LinkState::Reset; 2],
            outgoing: [None, None],
            pending: Default::default(),
            counter: [0; 2],
            epi: [EpiRegister::own_half(Endpoint::A, false, 0), EpiRegister::own_half(Endpoint::B, false, 0)],
            ont: OntRegister::default(),
            clock: tc_init(),
            digests: BTreeMap::new(),
            next_txn: 1,
        }
    }

    pub fn endpoint(&self, ep: Endpoint) -> &FitoEndpoint {
        &self.endpoints[ep.index()]
    }

    fn transition(&mut self, w: &mut World, ep: Endpoint, txn: Option<TxnId>, event: &str, to: LinkState) {
        let from = self.state[ep.index()];
        self.state[ep.index()] = to;
        w.record(Some(ep), txn, Body::Transition { from, event: event.into(), to, cause: None });
    }

    /// Starts a remote write of `writes` from `from`; returns its id.
    pub fn rdma_write(&mut self, w: &mut World, from: Endpoint, writes: Vec<FieldWrite>) -> TxnId {
        let i = from.index();
        let txn = TxnId(self.next_txn);
        self.next_txn += 1;
        self.counter[i] += 1;
        let tiebreak = TieBreak { endpoint: from, counter: self.counter[i] };
        let d = digest(txn, self.schema[i], &writes);
        self.digests.insert(txn, d);
        w.record(Some(from), Some(txn), Body::Initiated { schema: self.schema[i], writes: writes.clone(), digest: d });
        self.clock = tc_on_initiate(self.clock, from).expect("initiation counter overflow");
        w.record(Some(from), Some(txn), Body::Clock { clock: self.clock });
        self.transition(w, from, Some(txn), "Initiate", LinkState::Tentative);
        self.epi[i] = EpiRegister::own_half(from, true, self.clock.d);
        self.ont.set(Position::proposal(from), true);

        let spacing = w.params().frame_tx_time;
        let n = writes.len();
        self.outgoing[i] = Some(Outgoing { txn, tiebreak, writes, acked: vec![false; n], retries: 0 });
        self.send(w, from, 0, 0);
        for field in 1..n {
            w.schedule(w.now() + field as Tick * spacing, Event::Timer { ep: from, txn, timer: Timer::Send { field } });
        }
        txn
    }

    fn send(&mut self, w: &mut World, ep: Endpoint, field: usize, attempt: u32) -> u64 {
        let out = self.outgoing[ep.index()].as_ref().expect("outstanding write");
        let frame = Frame {
            kind: FrameKind::Write,
            txn: out.txn,
            tiebreak: out.tiebreak,
            schema_version: self.schema[ep.index()],
            body: write_body(self.schema[ep.index()], out.writes[field], field as u8, out.writes.len() as u8),
            emit_tick: w.now(),
        };
        let txn = out.txn;
        let id = w.emit(ep, &frame);
        let deadline = w.now() + w.params().timeout();
        w.schedule(deadline, Event::Timer { ep, txn, timer: Timer::Retry { field, attempt } });
        id
    }

    fn finish(&mut self, w: &mut World, ep: Endpoint, to: LinkState) {
        let out = self.outgoing[ep.index()].take().expect("outstanding write");
        match to {
            LinkState::Committed => {
                w.record(Some(ep), Some(out.txn), Body::Completed { retries: out.retries });
                self.transition(w, ep, Some(out.txn), "Completion", LinkState::Committed);
                let eligible = commit_eligible(&self.epi[0], &self.epi[1]).unwrap_or(false);
                w.record(Some(ep), Some(out.txn), Body::CommitCheck { eligible });
            }
            _ => {
                w.record(Some(ep), Some(out.txn), Body::FailStop { retries: out.retries });
                self.transition(w, ep, Some(out.txn), "Timeout", LinkState::Aborted);
            }
        }
        w.schedule(w.now() + 1, Event::Timer { ep, txn: out.txn, timer: Timer::Quiesce });
    }

    fn place(&mut self, w: &mut World, ep: Endpoint, id: u64, rx: Received) {
        let f = &rx.frame;
        if !rx.intact {
            let state = self.state[ep.index()];
            let reason = "frame check failed".to_string();
            w.record(Some(ep), Some(f.txn), Body::Ignored { state, event: "write".into(), reason, cause: Some(id) });
            return;
        }
        let split = f.body.len().saturating_sub(2);
        let (payload, trailer) = f.body.split_at(split);
        let schema = self.schema[ep.index()];
        let (Ok(fields), [index, total]) = (decode_fields(schema, payload), trailer) else { return };
        let (index, total) = (*index, *total);
        let Some(&field) = fields.first() else { return };
        let mem = &mut self.endpoints[ep.index()];
        let placed = mem.placed.entry(f.txn).or_default();
        if placed.insert(index, field).is_none() {
            mem.placement_buffer.insert(field.key, Versioned { value: field.value, txn: f.txn });
            let keys = vec![field.key];
            w.record(Some(ep), Some(f.txn), Body::Visible { keys, digest: digest(f.txn, schema, &[field]) });
            if placed.len() == usize::from(total) {
                let all: Vec<FieldWrite> = placed.values().copied().collect();
                let d = digest(f.txn, schema, &all);
                let agrees = self.digests.get(&f.txn) == Some(&d);
                mem.completion_log.push(f.txn);
                w.record(Some(ep), Some(f.txn), Body::Interpreted { schema, digest: d, agrees });
            }
        }
        let ack = Frame {
            kind: FrameKind::WriteAck,
            txn: f.txn,
            tiebreak: f.tiebreak,
            schema_version: schema,
            body: vec![index],
            emit_tick: w.now(),
        };
        w.emit(ep, &ack);
    }

    fn acked(&mut self, w: &mut World, ep: Endpoint, rx: Received) {
        if !rx.intact {
            return;
        }
        let Some(out) = self.outgoing[ep.index()].as_mut() else { return };
        let Some(&index) = rx.frame.body.first() else { return };
        if out.txn != rx.frame.txn || usize::from(index) >= out.acked.len() {
            return;
        }
        out.acked[usize::from(index)] = true;
        if out.acked.iter().all(|a| *a) {
            self.finish(w, ep, LinkState::Committed);
        }
    }

    fn outstanding(&self, ep: Endpoint, txn: TxnId) -> bool {
        self.outgoing[ep.index()].as_ref().is_some_and(|o| o.txn == txn)
    }
}

impl Protocol for FitoLink {
    fn start(&mut self, w: &mut World) {
        for ep in Endpoint::BOTH {
            self.transition(w, ep, None, "LinkUp", LinkState::Idle);
        }
        w.record(None, None, Body::Clock { clock: self.clock });
    }

    fn on_frame(&mut self, w: &mut World, to: Endpoint, frame: u64, rx: Received) {
        match rx.frame.kind {
            FrameKind::Write => self.place(w, to, frame, rx),
            FrameKind::WriteAck => self.acked(w, to, rx),
            _ => {}
        }
    }

    fn on_timer(&mut self, w: &mut World, ep: Endpoint, txn: TxnId, timer: Timer) {
        match timer {
            Timer::Send { field } if self.outstanding(ep, txn) => {
                self.send(w, ep, field, 0);
            }
            Timer::Retry { field, attempt } if self.outstanding(ep, txn) => {
                let out = self.outgoing[ep.index()].as_ref().expect("outstanding");
                if out.acked[field] {
                    return;
                }
                if attempt < w.params().max_retries {
                    let frame = self.send(w, ep, field, attempt + 1);
                    let out = self.outgoing[ep.index()].as_mut().expect("outstanding");
                    out.retries += 1;
                    w.record(Some(ep), Some(txn), Body::Retry { frame, attempt: attempt + 1 });
                } else {
                    self.finish(w, ep, LinkState::Aborted);
                }
            }
            Timer::Quiesce => {
                self.transition(w, ep, Some(txn), "Quiesce", LinkState::Idle);
                self.epi[ep.index()] = EpiRegister::own_half(ep, false, self.clock.d);
                self.ont.set(Position::proposal(ep), false);
                if let Some(next) = self.pending[ep.index()].pop_front() {
                    let writes = w.scenario().initiate[next].writes.clone();
                    self.rdma_write(w, ep, writes);
                }
            }
            _ => {}
        }
    }

    fn on_initiate(&mut self, w: &mut World, script: usize) {
        let spec = w.scenario().initiate[script].clone();
        let i = spec.endpoint.index();
        if self.state[i] == LinkState::Idle && self.pending[i].is_empty() {
            self.rdma_write(w, spec.endpoint, spec.writes);
        } else {
            self.pending[i].push_back(script);
            let reason = format!("endpoint is {}", self.state[i]);
            w.record(Some(spec.endpoint), None, Body::Deferred { reason });
        }
    }

    fn on_read(&mut self, w: &mut World, script: usize) {
        let spec = w.scenario().read[script].clone();
        let entries = self.endpoints[spec.endpoint.index()].read(&spec.keys);
        w.record(Some(spec.endpoint), None, Body::Read { entries });
    }

    fn circulating(&self) -> bool {
        self.state.iter().all(|s| *s == LinkState::Idle)
    }

    fn registers(&self) -> [EpiRegister; 2] {
        self.epi
    }

    fn ont(&self) -> OntRegister {
        self.ont
    }

    fn sweep(&mut self, w: &mut World) {
        w.record(None, None, Body::HorizonSweep);
        for ep in Endpoint::BOTH {
            if let Some(out) = self.outgoing[ep.index()].take() {
                self.transition(w, ep, Some(out.txn), "Timeout", LinkState::Aborted);
            }
        }
    }
}

/// Violations a baseline trace accumulates under the link invariants.
pub fn count_violations(trace: &Trace) -> ViolationReport {
    check_invariants(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::{run, LinkParams, ScriptInitiate};
    use crate::trace::Mode;

    fn scenario(link: LinkParams, writes: usize) -> Scenario {
        let mut s = Scenario::new("fito", 200, link);
        s.mode = Mode::Fito;
        s.initiate.push(ScriptInitiate {
            endpoint: Endpoint::A,
            at: 1,
            writes: (0..writes).map(|k| FieldWrite { key: k as u8 + 1, value: 10 + k as i64 }).collect(),
        });
        s
    }

    #[test]
    fn fields_land_one_by_one() {
        let r = run(&scenario(LinkParams::fault_free(2, 3), 3));
        let visible: Vec<Tick> = r
            .trace
            .records
            .iter()
            .filter(|r| matches!(r.body, Body::Visible { .. }))
            .map(|r| r.tick)
            .collect();
        assert_eq!(visible, vec![3, 6, 9]);
        assert!(r.trace.records.iter().any(|r| matches!(r.body, Body::Completed { retries: 0 })));
    }

    #[test]
    fn total_loss_retries_then_fails_stop() {
        let mut link = LinkParams::fault_free(2, 3);
        link.loss_prob = 1.0;
        let r = run(&scenario(link, 1));
        let retries = r.trace.records.iter().filter(|r| matches!(r.body, Body::Retry { .. })).count();
        assert_eq!(retries, 3);
        assert!(r.trace.records.iter().any(|r| matches!(r.body, Body::FailStop { retries: 3 })));
    }

    #[test]
    fn completion_is_never_commit_eligible() {
        let r = run(&scenario(LinkParams::fault_free(1, 1), 2));
        let checks: Vec<bool> = r
            .trace
            .records
            .iter()
            .filter_map(|r| match r.body {
                Body::CommitCheck { eligible } => Some(eligible),
                _ => None,
            })
            .collect();
        assert_eq!(checks, vec![false]);
    }
}

//! Discrete-event simulation of one link between endpoints A and B.
//!
//! Time is an integer tick. A frame emitted at tick `t` starts arriving at
//! `t + one_way_delay` (cut-through) and finishes leaving the sender at
//! `t + frame_tx_time`. Wire faults are decided once, at emission, from a
//! per-direction random stream; every draw is consumed whatever its outcome
//! so that one fault never shifts the draws of later frames.

pub mod oae;
pub mod rng;
pub mod scenario;

use std::collections::BTreeMap;

use crate::ids::{Endpoint, Tick, TxnId};
use crate::kbp::{commit_eligible, knowledge_balance_check, EpiRegister, OntRegister};
use crate::trace::{hex, Body, Header, Mode, Record, Trace};
use crate::transaction::{circulate_hyperdata, Circulation, Frame, Received, FCS_LEN, HEADER_LEN};

pub use rng::SplitMix64;
pub use scenario::{pif_condition, LinkParams, Scenario, ScenarioError, ScriptInitiate, ScriptRead};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Timer {
    Timeout,
    Quiesce,
    /// Baseline: first transmission of one field.
    Send { field: usize },
    /// Baseline: acknowledgement deadline for one field transmission.
    Retry { field: usize, attempt: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    Deliver { frame: u64, to: Endpoint, bytes: Vec<u8>, emit_tick: Tick, copy_of: Option<u64> },
    Timer { ep: Endpoint, txn: TxnId, timer: Timer },
    Initiate(usize),
    Read(usize),
    Hyperdata,
}

/// Wire bookkeeping. At the end of a run
/// `delivered + dropped + in_flight == emitted + duplicated`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WireStats {
    pub emitted: u64,
    pub duplicated: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub in_flight: u64,
    pub corrupted: u64,
    pub reordered: u64,
}

impl WireStats {
    pub fn conserved(&self) -> bool {
        self.delivered + self.dropped + self.in_flight == self.emitted + self.duplicated
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AuditStats {
    pub ticks: u64,
    pub unbalanced: u64,
    /// Informed epistemic bits disagreeing with the ontic register, counted
    /// only while the run has seen no wire fault.
    pub ont_mismatches: u64,
}

#[derive(Debug, Clone, Copy)]
struct InFlight {
    key: (Tick, u64),
    to: Endpoint,
}

/// Shared simulator state handed to a protocol engine.
pub struct World {
    scenario: Scenario,
    now: Tick,
    seq: u64,
    queue: BTreeMap<(Tick, u64), Event>,
    in_flight: BTreeMap<u64, InFlight>,
    next_frame: u64,
    faults: [SplitMix64; 2],
    fault_seen: bool,
    last_kbp: Option<([EpiRegister; 2], OntRegister)>,
    pub trace: Trace,
    pub wire: WireStats,
    pub audit: AuditStats,
}

impl World {
    fn new(scenario: Scenario) -> World {
        let root = SplitMix64::new(scenario.seed);
        let header = Header::new(scenario.name.clone(), scenario.mode, scenario.seed);
        World {
            now: 0,
            seq: 0,
            queue: BTreeMap::new(),
            in_flight: BTreeMap::new(),
            next_frame: 1,
            faults: [root.split(1), root.split(2)],
            fault_seen: false,
            last_kbp: None,
            trace: Trace::new(header),
            wire: WireStats::default(),
            audit: AuditStats::default(),
            scenario,
        }
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn params(&self) -> &LinkParams {
        &self.scenario.link
    }

    pub fn record(&mut self, ep: Option<Endpoint>, txn: Option<TxnId>, body: Body) {
        self.trace.push(Record::new(self.now, ep, txn, body));
    }

    pub fn schedule(&mut self, at: Tick, ev: Event) {
        debug_assert!(at >= self.now);
        self.seq += 1;
        self.queue.insert((at, self.seq), ev);
    }

    /// Puts a frame on the wire from `from` towards its peer; returns the
    /// frame id.
    pub fn emit(&mut self, from: Endpoint, frame: &Frame) -> u64 {
        let to = from.peer();
        let mut bytes = frame.encode().expect("engine frames fit the length field");
        let id = self.next_frame;
        self.next_frame += 1;
        self.wire.emitted += 1;
        let p = self.scenario.link.clone();
        self.record(
            Some(from),
            Some(frame.txn),
            Body::Emit {
                frame: id,
                frame_kind: frame.kind,
                to,
                bytes: hex(&bytes),
                tx_complete: self.now + p.frame_tx_time,
            },
        );

        let rng = &mut self.faults[from.index()];
        let lost = rng.chance(p.loss_prob);
        let corrupt = rng.chance(p.corrupt_prob);
        let span = ((bytes.len() - HEADER_LEN) * 8) as u64;
        let bit = rng.below(span);
        let dup = rng.chance(p.dup_prob);
        let reorder = rng.chance(p.reorder_prob);
        debug_assert!(span >= (FCS_LEN * 8) as u64);

        if lost {
            self.fault_seen = true;
            self.wire.dropped += 1;
            self.record(Some(from), Some(frame.txn), Body::Drop { frame: id });
            return id;
        }
        if corrupt {
            self.fault_seen = true;
            self.wire.corrupted += 1;
            let at = HEADER_LEN * 8 + bit as usize;
            bytes[at / 8] ^= 1 << (at % 8);
            self.record(Some(from), Some(frame.txn), Body::Corrupt { frame: id, bit: bit as u32 });
        }
        let at = self.now + p.one_way_delay;
        self.enqueue_delivery(id, to, bytes.clone(), frame.emit_tick, None, at);
        if reorder {
            if let Some(with) = self.reorder(id, to) {
                self.fault_seen = true;
                self.wire.reordered += 1;
                self.record(Some(from), Some(frame.txn), Body::Reorder { frame: id, with });
            }
        }
        if dup {
            self.fault_seen = true;
            let copy = self.next_frame;
            self.next_frame += 1;
            self.wire.duplicated += 1;
            let at = self.in_flight[&id].key.0 + 1;
            self.enqueue_delivery(copy, to, bytes, frame.emit_tick, Some(id), at);
            self.record(Some(from), Some(frame.txn), Body::Duplicate { frame: id, copy });
        }
        id
    }

    fn enqueue_delivery(&mut self, frame: u64, to: Endpoint, bytes: Vec<u8>, emit_tick: Tick, copy_of: Option<u64>, at: Tick) {
        self.seq += 1;
        let key = (at, self.seq);
        self.queue.insert(key, Event::Deliver { frame, to, bytes, emit_tick, copy_of });
        self.in_flight.insert(frame, InFlight { key, to });
    }

    /// Swaps delivery ticks of `id` with the most recent earlier frame still
    /// in flight in the same direction.
    fn reorder(&mut self, id: u64, to: Endpoint) -> Option<u64> {
        let now = self.now;
        let (&other, _) = self
            .in_flight
            .range(..id)
            .rev()
            .find(|(_, f)| f.to == to && f.key.0 > now)?;
        let ka = self.in_flight[&id].key;
        let kb = self.in_flight[&other].key;
        if ka.0 == kb.0 {
            return None;
        }
        let ea = self.queue.remove(&ka).expect("in-flight frame is queued");
        let eb = self.queue.remove(&kb).expect("in-flight frame is queued");
        self.queue.insert(kb, ea);
        self.queue.insert(ka, eb);
        self.in_flight.get_mut(&id).expect("present").key = kb;
        self.in_flight.get_mut(&other).expect("present").key = ka;
        Some(other)
    }

    fn pop_at(&mut self, tick: Tick) -> Option<Event> {
        let (&key, _) = self.queue.first_key_value()?;
        if key.0 != tick {
            return None;
        }
        self.queue.remove(&key)
    }
}

/// A link protocol driven by the simulator.
pub trait Protocol {
    fn start(&mut self, w: &mut World);
    fn on_frame(&mut self, w: &mut World, to: Endpoint, frame: u64, rx: Received);
    fn on_timer(&mut self, w: &mut World, ep: Endpoint, txn: TxnId, timer: Timer);
    fn on_initiate(&mut self, w: &mut World, script: usize);
    fn on_read(&mut self, w: &mut World, script: usize);
    /// Whether the link is idle or in an unresolved crossing, so hyperdata
    /// may circulate.
    fn circulating(&self) -> bool;
    fn registers(&self) -> [EpiRegister; 2];
    fn ont(&self) -> OntRegister;
    /// Abort whatever is still outstanding at the horizon.
    fn sweep(&mut self, w: &mut World);
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub trace: Trace,
    pub wire: WireStats,
    pub audit: AuditStats,
}

/// Runs `scenario` under its own mode.
pub fn run(scenario: &Scenario) -> RunResult {
    match scenario.mode {
        Mode::Oae => run_with(scenario, oae::OaeLink::new(scenario)),
        Mode::Fito => run_with(scenario, crate::fito::FitoLink::new(scenario)),
    }
}

pub fn run_with<P: Protocol>(scenario: &Scenario, mut proto: P) -> RunResult {
    let mut w = World::new(scenario.clone());
    let horizon = scenario.horizon;
    proto.start(&mut w);
    record_registers(&mut w, &proto);
    for (i, s) in scenario.initiate.iter().enumerate() {
        w.schedule(s.at, Event::Initiate(i));
    }
    for (i, s) in scenario.read.iter().enumerate() {
        w.schedule(s.at, Event::Read(i));
    }
    let mut hyperdata_at: Option<Tick> = None;
    let mut audited_to: Option<Tick> = None;
    let mut last_unbalanced = 0u64;

    loop {
        if scenario.link.hyperdata && hyperdata_at.is_none() && proto.circulating() {
            let at = w.now + u64::from(audited_to.is_some());
            hyperdata_at = Some(at);
            w.schedule(at, Event::Hyperdata);
        }
        let Some((&(tick, _), _)) = w.queue.first_key_value() else { break };
        if tick >= horizon {
            break;
        }
        // Registers do not change between processed ticks.
        let from = audited_to.map_or(0, |t| t + 1);
        if tick > from {
            w.audit.ticks += tick - from;
            w.audit.unbalanced += (tick - from) * last_unbalanced;
        }
        w.now = tick;
        while let Some(ev) = w.pop_at(tick) {
            match ev {
                Event::Deliver { frame, to, bytes, emit_tick, copy_of } => {
                    w.in_flight.remove(&frame);
                    w.wire.delivered += 1;
                    let Ok(rx) = Frame::decode(&bytes, emit_tick) else { continue };
                    w.record(
                        Some(to),
                        Some(rx.frame.txn),
                        Body::Deliver { frame, frame_kind: rx.frame.kind, intact: rx.intact, copy_of },
                    );
                    proto.on_frame(&mut w, to, frame, rx);
                }
                Event::Timer { ep, txn, timer } => proto.on_timer(&mut w, ep, txn, timer),
                Event::Initiate(i) => proto.on_initiate(&mut w, i),
                Event::Read(i) => proto.on_read(&mut w, i),
                Event::Hyperdata => {
                    hyperdata_at = None;
                    let link = Circulation {
                        enabled: scenario.link.hyperdata,
                        indefinite: proto.circulating(),
                        start: scenario.link.hyperdata_start,
                    };
                    if let Some(f) = circulate_hyperdata(&link, tick) {
                        let holder = f.tiebreak.endpoint;
                        w.record(Some(holder), None, Body::Hyperdata { holder });
                    }
                }
            }
        }
        last_unbalanced = audit_tick(&mut w, &proto);
        audited_to = Some(tick);
    }

    // Circulating hyperdata alone does not make the run unfinished.
    if w.queue.values().any(|e| !matches!(e, Event::Hyperdata)) {
        w.now = w.now.max(horizon);
        let ticks = horizon - audited_to.map_or(0, |t| t + 1);
        w.audit.ticks += ticks;
        w.audit.unbalanced += ticks * last_unbalanced;
        proto.sweep(&mut w);
        let stranded: Vec<(u64, Endpoint)> = w.in_flight.iter().map(|(id, f)| (*id, f.to)).collect();
        for (id, to) in stranded {
            w.wire.in_flight += 1;
            w.record(Some(to.peer()), None, Body::InFlight { frame: id });
        }
    }
    debug_assert!(w.wire.conserved(), "{:?}", w.wire);
    RunResult { trace: w.trace, wire: w.wire, audit: w.audit }
}

/// Per-tick register audit; returns the number of unbalanced registers.
/// Register records are written only when something changed.
fn audit_tick<P: Protocol>(w: &mut World, proto: &P) -> u64 {
    let ont = proto.ont();
    if !w.fault_seen {
        for r in proto.registers() {
            if r.informed_positions().any(|p| r.get(p) != Some(ont.get(p))) {
                w.audit.ont_mismatches += 1;
            }
        }
    }
    let unbalanced = record_registers(w, proto);
    w.audit.ticks += 1;
    w.audit.unbalanced += unbalanced;
    unbalanced
}

/// Writes register records if anything changed since the last call.
fn record_registers<P: Protocol>(w: &mut World, proto: &P) -> u64 {
    let regs = proto.registers();
    let ont = proto.ont();
    let eligible = commit_eligible(&regs[0], &regs[1]).unwrap_or(false);
    let changed = w.last_kbp != Some((regs, ont));
    w.last_kbp = Some((regs, ont));
    let mut unbalanced = 0;
    for r in regs {
        let balanced = knowledge_balance_check(&r);
        unbalanced += u64::from(!balanced);
        if !changed {
            continue;
        }
        w.record(
            Some(r.endpoint),
            None,
            Body::Kbp {
                mask: r.mask().to_string(),
                known_bits: format!("{:02b}", r.known_bits()),
                round: r.round,
                balanced,
                eligible,
                ont: ont.to_string(),
            },
        );
    }
    unbalanced
}

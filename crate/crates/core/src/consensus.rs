//! Consensus over link transactions.
//!
//! Each of `n` processes reaches a shared host over its own link; the
//! process is endpoint A of that link and the host endpoint B. A process
//! proposes by initiating a link transaction that carries its value. When
//! the host commits the transaction it applies compare-and-swap on a
//! single decision register (empty -> value), and the value the swap
//! witnessed travels back as the decision. The swap is only reachable with
//! proof that both ends of the link have committed the transaction.
//!
//! Host steps of different links interleave arbitrarily; the order in
//! which the host commits them is the sequence number it assigns.

use std::collections::{BTreeSet, HashSet};

use thiserror::Error;

use crate::ids::{Endpoint, Tick, TxnId};
use crate::link_fsm::{EndpointFsm, LinkEvent, LinkState, TieBreak};
use crate::netsim::SplitMix64;
use crate::transaction::{initiate, reflect, validate_reflection, FieldWrite, Frame, Received, Transaction, Validation, VisibleStore};

/// Own steps a process takes from proposing to deciding.
pub const OWN_STEP_BOUND: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConsensusError {
    #[error("link {link}: both endpoints must be COMMITTED for {txn} (process {process}, host {host})")]
    NotCommitted { link: usize, txn: TxnId, process: LinkState, host: LinkState },
    #[error("bad configuration: {0}")]
    Config(String),
}

/// Proof that both endpoints of a link committed one transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommittedTxn {
    link: usize,
    txn: TxnId,
}

impl CommittedTxn {
    pub fn witness(link: usize, txn: TxnId, a: &EndpointFsm, b: &EndpointFsm) -> Result<CommittedTxn, ConsensusError> {
        let done = |f: &EndpointFsm| f.state == LinkState::Committed && f.concluded_txn == Some(txn);
        if done(a) && done(b) {
            Ok(CommittedTxn { link, txn })
        } else {
            Err(ConsensusError::NotCommitted { link, txn, process: a.state, host: b.state })
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct DecisionRegister {
    pub value: Option<i64>,
    /// Swaps applied so far, successful or not.
    pub seq: u64,
}

/// Compare-and-swap: installs `new` if the register holds `expected`.
/// Returns the value held before the call.
pub fn cas(reg: &mut DecisionRegister, expected: Option<i64>, new: i64, _proof: CommittedTxn) -> Option<i64> {
    let old = reg.value;
    reg.seq += 1;
    if old == expected {
        reg.value = Some(new);
    }
    old
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Stage {
    Start,
    Proposed,
    Reflected,
    ProcessCommitted,
    HostCommitted,
    Decided,
    /// Host timed the link out after the process crashed.
    Abandoned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Step {
    Propose(usize),
    Reflect(usize),
    Commit(usize),
    HostCommit(usize),
    Decide(usize),
    Crash(usize),
    HostTimeout(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Link {
    process: EndpointFsm,
    host: EndpointFsm,
    stage: Stage,
    crashed: bool,
    own_steps: u32,
    decision: Option<i64>,
    witnessed: Option<i64>,
    reflection: Option<Frame>,
}

/// Global state of one execution.
#[derive(Debug, Clone)]
pub struct System {
    links: Vec<Link>,
    txns: Vec<Transaction>,
    stores: Vec<(VisibleStore, VisibleStore)>,
    proposals: Vec<i64>,
    crash_set: BTreeSet<usize>,
    register: DecisionRegister,
    now: Tick,
}

type Key = (Vec<Link>, DecisionRegister);

impl System {
    pub fn new(proposals: &[i64], crash_set: &BTreeSet<usize>) -> Result<System, ConsensusError> {
        if proposals.is_empty() {
            return Err(ConsensusError::Config("no processes".into()));
        }
        if let Some(bad) = crash_set.iter().find(|i| **i >= proposals.len()) {
            return Err(ConsensusError::Config(format!("crash id {bad} out of range")));
        }
        let mut links = Vec::new();
        let mut txns = Vec::new();
        for (i, v) in proposals.iter().enumerate() {
            let mut process = EndpointFsm::new(Endpoint::A, u64::MAX / 4);
            let mut host = EndpointFsm::new(Endpoint::B, u64::MAX / 4);
            process = process.step(&LinkEvent::LinkUp, 0).fsm;
            host = host.step(&LinkEvent::LinkUp, 0).fsm;
            let txn_id = TxnId(i as u64 + 1);
            let tb = TieBreak { endpoint: Endpoint::A, counter: 1 };
            let txn = Transaction::new(txn_id, Endpoint::A, tb, 1, vec![FieldWrite { key: 0, value: *v }])
                .map_err(|e| ConsensusError::Config(e.to_string()))?;
            txns.push(txn);
            links.push(Link {
                process,
                host,
                stage: Stage::Start,
                crashed: false,
                own_steps: 0,
                decision: None,
                witnessed: None,
                reflection: None,
            });
        }
        Ok(System {
            stores: vec![(VisibleStore::new(), VisibleStore::new()); links.len()],
            links,
            txns,
            proposals: proposals.to_vec(),
            crash_set: crash_set.clone(),
            register: DecisionRegister::default(),
            now: 0,
        })
    }

    fn key(&self) -> Key {
        (self.links.clone(), self.register)
    }

    pub fn enabled(&self) -> Vec<Step> {
        let mut out = Vec::new();
        for (i, l) in self.links.iter().enumerate() {
            let alive = !l.crashed;
            match l.stage {
                Stage::Start if alive => out.push(Step::Propose(i)),
                Stage::Proposed => out.push(Step::Reflect(i)),
                Stage::Reflected if alive => out.push(Step::Commit(i)),
                Stage::Reflected => out.push(Step::HostTimeout(i)),
                Stage::ProcessCommitted => out.push(Step::HostCommit(i)),
                Stage::HostCommitted if alive => out.push(Step::Decide(i)),
                _ => {}
            }
            if alive && l.stage != Stage::Decided && self.crash_set.contains(&i) {
                out.push(Step::Crash(i));
            }
        }
        out
    }

    /// Carries out one enabled step through the link state machines.
    pub fn apply(&mut self, step: Step) -> Result<(), ConsensusError> {
        self.now += 1;
        let now = self.now;
        match step {
            Step::Propose(i) => self.propose(i)?,
            Step::Reflect(i) => {
                let l = &mut self.links[i];
                let frame = self.txns[i].tentative_frame(now);
                let out = reflect(&l.host, &mut self.stores[i].1, &Received { frame, intact: true }, 1, now);
                l.host = out.fsm;
                l.reflection = out.reflection;
                l.stage = Stage::Reflected;
            }
            Step::Commit(i) => {
                let l = &mut self.links[i];
                let txn = self.txns[i].txn_id;
                let frame = l.reflection.clone().expect("reflected");
                l.process = l.process.step(&LinkEvent::ReflectionArrived { txn }, now).fsm;
                let ev = match validate_reflection(&self.txns[i], &Received { frame, intact: true }) {
                    Ok(Validation::Commit) => LinkEvent::ValidationOk { txn },
                    _ => LinkEvent::Timeout { txn },
                };
                l.process = l.process.step(&ev, now).fsm;
                l.own_steps += 1;
                l.stage = Stage::ProcessCommitted;
            }
            Step::HostCommit(i) => {
                let txn = self.txns[i].txn_id;
                let l = &mut self.links[i];
                l.host = l.host.step(&LinkEvent::CommitAck { txn }, now).fsm;
                let proof = CommittedTxn::witness(i, txn, &l.process, &l.host)?;
                let old = cas(&mut self.register, None, self.proposals[i], proof);
                l.witnessed = Some(old.unwrap_or(self.proposals[i]));
                l.stage = Stage::HostCommitted;
            }
            Step::Decide(i) => {
                let l = &mut self.links[i];
                l.decision = l.witnessed;
                l.own_steps += 1;
                l.stage = Stage::Decided;
            }
            Step::Crash(i) => self.links[i].crashed = true,
            Step::HostTimeout(i) => {
                let txn = self.txns[i].txn_id;
                let l = &mut self.links[i];
                l.host = l.host.step(&LinkEvent::Timeout { txn }, now).fsm;
                l.stage = Stage::Abandoned;
            }
        }
        Ok(())
    }

    /// Process `i` initiates the transaction carrying its proposal.
    pub fn propose(&mut self, i: usize) -> Result<(), ConsensusError> {
        let l = &mut self.links[i];
        let (step, _) = initiate(&l.process, &mut self.stores[i].0, &self.txns[i], self.now)
            .map_err(|e| ConsensusError::Config(e.to_string()))?;
        l.process = step.fsm;
        l.own_steps += 1;
        l.stage = Stage::Proposed;
        Ok(())
    }

    pub fn decisions(&self) -> Vec<Option<i64>> {
        self.links.iter().map(|l| l.decision).collect()
    }

    /// Safety and step-bound problems visible in this state, plus
    /// liveness problems when no step is enabled.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let decided: BTreeSet<i64> = self.links.iter().filter_map(|l| l.decision).collect();
        if decided.len() > 1 {
            out.push(format!("disagreement: {decided:?}"));
        }
        if let Some(v) = decided.iter().find(|v| !self.proposals.contains(v)) {
            out.push(format!("decided {v}, which nobody proposed"));
        }
        for (i, l) in self.links.iter().enumerate() {
            if l.own_steps > OWN_STEP_BOUND {
                out.push(format!("process {i} took {} own steps", l.own_steps));
            }
        }
        if self.enabled().is_empty() {
            for (i, l) in self.links.iter().enumerate() {
                if !l.crashed && l.decision.is_none() {
                    out.push(format!("process {i} never decided"));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExploreReport {
    pub states: u64,
    pub terminals: u64,
    pub max_own_steps: u32,
    pub decided_values: BTreeSet<i64>,
    pub problems: Vec<String>,
}

impl ExploreReport {
    fn visit(&mut self, sys: &System) {
        self.states += 1;
        self.max_own_steps = self.max_own_steps.max(sys.links.iter().map(|l| l.own_steps).max().unwrap_or(0));
        for p in sys.problems() {
            if self.problems.len() < 20 {
                self.problems.push(p);
            }
        }
        if sys.enabled().is_empty() {
            self.terminals += 1;
            self.decided_values.extend(sys.decisions().into_iter().flatten());
        }
    }
}

/// Every interleaving of process, host and crash steps, by depth-first
/// search over distinct states.
pub fn explore_exhaustive(proposals: &[i64], crash_set: &BTreeSet<usize>) -> Result<ExploreReport, ConsensusError> {
    let start = System::new(proposals, crash_set)?;
    let mut seen: HashSet<Key> = HashSet::new();
    let mut stack = vec![start];
    let mut report = ExploreReport::default();
    while let Some(sys) = stack.pop() {
        if !seen.insert(sys.key()) {
            continue;
        }
        report.visit(&sys);
        for step in sys.enabled() {
            let mut next = sys.clone();
            next.apply(step)?;
            stack.push(next);
        }
    }
    Ok(report)
}

/// One random schedule per seed, crashing at most `max_crashes` of the
/// processes in `crash_set`.
pub fn explore_random(
    proposals: &[i64],
    crash_set: &BTreeSet<usize>,
    max_crashes: usize,
    seeds: std::ops::Range<u64>,
) -> Result<ExploreReport, ConsensusError> {
    let mut report = ExploreReport::default();
    for seed in seeds {
        let mut rng = SplitMix64::new(seed);
        let mut sys = System::new(proposals, crash_set)?;
        let mut crashes = 0;
        loop {
            let steps: Vec<Step> = sys
                .enabled()
                .into_iter()
                .filter(|s| !matches!(s, Step::Crash(_)) || crashes < max_crashes)
                .collect();
            if steps.is_empty() {
                break;
            }
            let step = steps[rng.below(steps.len() as u64) as usize];
            crashes += usize::from(matches!(step, Step::Crash(_)));
            sys.apply(step)?;
        }
        report.visit(&sys);
    }
    Ok(report)
}

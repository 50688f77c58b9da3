//! Offline checks over recorded traces.

pub mod relation;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::Serialize;

use crate::ids::{Endpoint, Tick, TxnId};
use crate::ilt::TensorClock;
use crate::link_fsm::LinkState;
use crate::trace::{Body, Mode, Trace};
use crate::transaction::{FieldKey, Validation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Invariant {
    N1,
    N2,
    N3,
    N4,
    A1,
    A2,
    A3,
}

impl Invariant {
    pub const ALL: [Invariant; 7] =
        [Invariant::N1, Invariant::N2, Invariant::N3, Invariant::N4, Invariant::A1, Invariant::A2, Invariant::A3];

    pub fn describe(self) -> &'static str {
        match self {
            Invariant::N1 => "visible before both endpoints committed",
            Invariant::N2 => "commit without a validated reflection",
            Invariant::N3 => "fault-driven or divergent state",
            Invariant::N4 => "timeout not ending in abort",
            Invariant::A1 => "partial or staggered visibility",
            Invariant::A2 => "visibility without validated agreement",
            Invariant::A3 => "observer saw a torn snapshot",
        }
    }
}

impl fmt::Display for Invariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub invariant: Invariant,
    pub tick: Tick,
    pub ep: Option<Endpoint>,
    pub txn: Option<TxnId>,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ViolationReport {
    pub scenario: String,
    pub mode: String,
    pub seed: u64,
    pub violations: Vec<Violation>,
    pub transactions: u64,
    pub committed: u64,
    pub aborted: u64,
    pub commit_checks: u64,
    pub ineligible_commits: u64,
    pub clock_inconsistencies: u64,
    /// Transactions committed at one endpoint and aborted at the other.
    pub asymmetric: u64,
    pub retries: u64,
    pub fail_stops: u64,
}

impl ViolationReport {
    pub fn count(&self, inv: Invariant) -> usize {
        self.violations.iter().filter(|v| v.invariant == inv).count()
    }

    pub fn total(&self) -> usize {
        self.violations.len()
    }

    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    /// Adds another run's counts into this one.
    pub fn absorb(&mut self, other: ViolationReport) {
        self.violations.extend(other.violations);
        self.transactions += other.transactions;
        self.committed += other.committed;
        self.aborted += other.aborted;
        self.commit_checks += other.commit_checks;
        self.ineligible_commits += other.ineligible_commits;
        self.clock_inconsistencies += other.clock_inconsistencies;
        self.asymmetric += other.asymmetric;
        self.retries += other.retries;
        self.fail_stops += other.fail_stops;
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scenario {} ({} mode, seed {})", self.scenario, self.mode, self.seed);
        let _ = writeln!(out, "{:<4} {:>10}  {}", "inv", "violations", "meaning");
        for inv in Invariant::ALL {
            let _ = writeln!(out, "{:<4} {:>10}  {}", inv, self.count(inv), inv.describe());
        }
        let _ = writeln!(
            out,
            "transactions {}  committed {}  aborted {}  asymmetric {}",
            self.transactions, self.committed, self.aborted, self.asymmetric
        );
        let _ = writeln!(
            out,
            "commit checks {}  ineligible {}  clock faults {}  retries {}  fail-stops {}",
            self.commit_checks, self.ineligible_commits, self.clock_inconsistencies, self.retries, self.fail_stops
        );
        out
    }

    /// One `key=value` line per run, stable for scripts.
    pub fn machine_line(&self) -> String {
        let mut out = format!("report scenario={} mode={} seed={}", self.scenario, self.mode, self.seed);
        for inv in Invariant::ALL {
            let _ = write!(out, " {}={}", inv, self.count(inv));
        }
        let _ = write!(
            out,
            " txns={} committed={} aborted={} asymmetric={} ineligible={} clock={}",
            self.transactions,
            self.committed,
            self.aborted,
            self.asymmetric,
            self.ineligible_commits,
            self.clock_inconsistencies
        );
        out
    }
}

#[derive(Default)]
struct TxnFacts {
    initiator: Option<Endpoint>,
    keys: BTreeSet<FieldKey>,
    digest: u64,
    committed_at: [Option<Tick>; 2],
    validated_commit: bool,
    visible: [BTreeMap<Tick, BTreeSet<FieldKey>>; 2],
    aborted: bool,
}

struct Checker {
    out: Vec<Violation>,
    flagged: BTreeSet<(Invariant, Option<Endpoint>, Option<TxnId>)>,
}

impl Checker {
    /// Records one violation per invariant, endpoint and transaction.
    fn flag(&mut self, invariant: Invariant, tick: Tick, ep: Option<Endpoint>, txn: Option<TxnId>, detail: String) {
        if self.flagged.insert((invariant, ep, txn)) {
            self.out.push(Violation { invariant, tick, ep, txn, detail });
        }
    }
}

/// Checks a trace against the normative and atomicity invariants.
pub fn check_invariants(trace: &Trace) -> ViolationReport {
    let mut ck = Checker { out: Vec::new(), flagged: BTreeSet::new() };
    let mut report = ViolationReport {
        scenario: trace.header.scenario.clone(),
        mode: trace.header.mode.to_string(),
        seed: trace.header.seed,
        ..ViolationReport::default()
    };
    let mut facts: BTreeMap<TxnId, TxnFacts> = BTreeMap::new();
    // Frame id -> whether it arrived intact and whether an earlier copy of
    // the same emission had already been delivered.
    let mut delivered: BTreeMap<u64, (bool, bool)> = BTreeMap::new();
    let mut roots: BTreeSet<u64> = BTreeSet::new();
    let mut clock: Option<TensorClock> = None;
    let mut order: [Vec<TxnId>; 2] = [Vec::new(), Vec::new()];

    for r in &trace.records {
        let ep = r.ep;
        match &r.body {
            Body::Initiated { writes, digest, .. } => {
                let f = facts.entry(r.txn.expect("initiation names its transaction")).or_default();
                f.initiator = ep;
                f.keys = writes.iter().map(|w| w.key).collect();
                f.digest = *digest;
                report.transactions += 1;
            }
            Body::Deliver { frame, intact, copy_of, .. } => {
                let root = copy_of.unwrap_or(*frame);
                let repeat = !roots.insert(root);
                delivered.insert(*frame, (*intact, repeat));
            }
            Body::Validated { validation } => {
                if let (Some(t), Validation::Commit) = (r.txn, validation) {
                    facts.entry(t).or_default().validated_commit = true;
                }
            }
            Body::Transition { from, event, to, cause } => {
                if let (Some(t), Some(e)) = (r.txn, ep) {
                    let f = facts.entry(t).or_default();
                    if *to == LinkState::Committed {
                        f.committed_at[e.index()].get_or_insert(r.tick);
                        if *from != LinkState::Reflecting || !matches!(event.as_str(), "ValidationOk" | "CommitAck") {
                            ck.flag(Invariant::N2, r.tick, ep, r.txn, format!("{from} -{event}-> COMMITTED"));
                        }
                    }
                    if *to == LinkState::Aborted {
                        f.aborted = true;
                    }
                }
                if event == "Timeout" && *to != LinkState::Aborted {
                    ck.flag(Invariant::N4, r.tick, ep, r.txn, format!("timeout led to {to}"));
                }
                if let Some((intact, repeat)) = cause.and_then(|c| delivered.get(&c)) {
                    if !intact && matches!(to, LinkState::Reflecting | LinkState::Committed) {
                        ck.flag(Invariant::N3, r.tick, ep, r.txn, format!("damaged frame drove {from} -> {to}"));
                    }
                    if *repeat {
                        ck.flag(Invariant::N3, r.tick, ep, r.txn, format!("duplicate frame drove {from} -> {to}"));
                    }
                }
            }
            Body::Visible { keys, digest } => {
                let (Some(t), Some(e)) = (r.txn, ep) else { continue };
                let f = facts.entry(t).or_default();
                if f.committed_at.iter().any(Option::is_none) {
                    ck.flag(Invariant::N1, r.tick, ep, r.txn, "visible before bilateral commit".into());
                }
                if !f.validated_commit {
                    ck.flag(Invariant::A2, r.tick, ep, r.txn, "visible without validated reflection".into());
                }
                let key_set: BTreeSet<FieldKey> = keys.iter().copied().collect();
                if key_set == f.keys && *digest != f.digest {
                    ck.flag(Invariant::N3, r.tick, ep, r.txn, format!("visible digest {digest:016x} diverges"));
                    ck.flag(Invariant::A2, r.tick, ep, r.txn, "committed interpretation diverges".into());
                }
                let seen = &mut f.visible[e.index()];
                if seen.is_empty() {
                    order[e.index()].push(t);
                }
                seen.entry(r.tick).or_default().extend(keys.iter().copied());
            }
            Body::Completed { .. } => {
                let Some(t) = r.txn else { continue };
                if !facts.entry(t).or_default().validated_commit {
                    ck.flag(Invariant::A2, r.tick, ep, r.txn, "completed without validated reflection".into());
                }
            }
            Body::Read { entries } => {
                let Some(e) = ep else { continue };
                let pos = |t: TxnId| order[e.index()].iter().position(|x| *x == t);
                let at: BTreeMap<FieldKey, Option<TxnId>> = entries.iter().map(|x| (x.key, x.txn)).collect();
                for t in entries.iter().filter_map(|x| x.txn) {
                    let Some(f) = facts.get(&t) else { continue };
                    let torn = f.keys.iter().filter_map(|k| at.get(k)).any(|seen| match seen {
                        None => true,
                        Some(u) => pos(*u) < pos(t),
                    });
                    if torn {
                        ck.flag(Invariant::A3, r.tick, ep, Some(t), "snapshot mixes eras".into());
                    }
                }
            }
            Body::Clock { clock: c } => {
                let ok = c.is_consistent() && clock.is_none_or(|p| p.dominated_by(c));
                report.clock_inconsistencies += u64::from(!ok);
                clock = Some(*c);
            }
            Body::CommitCheck { eligible } => {
                report.commit_checks += 1;
                report.ineligible_commits += u64::from(!eligible);
            }
            Body::Yield { dropped, .. } => facts.entry(*dropped).or_default().aborted = true,
            Body::Asymmetric { .. } => report.asymmetric += 1,
            Body::Retry { .. } => report.retries += 1,
            Body::FailStop { .. } => report.fail_stops += 1,
            _ => {}
        }
    }

    for (t, f) in &facts {
        let any_visible = f.visible.iter().any(|v| !v.is_empty());
        if any_visible || (trace.header.mode == Mode::Fito && f.committed_at.iter().any(Option::is_some)) {
            report.committed += 1;
        } else if f.aborted {
            report.aborted += 1;
        }
        for e in Endpoint::BOTH {
            let v = &f.visible[e.index()];
            let Some((&first, _)) = v.first_key_value() else { continue };
            let union: BTreeSet<FieldKey> = v.values().flatten().copied().collect();
            if v.len() > 1 {
                ck.flag(Invariant::A1, first, Some(e), Some(*t), format!("keys became visible over {} ticks", v.len()));
            } else if union != f.keys {
                ck.flag(Invariant::A1, first, Some(e), Some(*t), "only some keys became visible".into());
            }
        }
    }
    ck.out.sort_by_key(|v| (v.tick, v.invariant));
    report.violations = ck.out;
    report
}

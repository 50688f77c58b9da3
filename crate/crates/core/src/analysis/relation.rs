//! Four-valued causal relation between state-transition events of a trace,
//! and its projection onto the three-valued (before, after, concurrent)
//! view of a conventional causal order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::ids::{Endpoint, Tick, TxnId};
use crate::ilt::CausalRelation;
use crate::link_fsm::LinkState;
use crate::trace::{Body, Trace};

/// Stable name of a state-transition event:
/// `t{tick}:{ep}:{txn|-}:{FROM}>{TO}#{n}`, where `n` numbers otherwise
/// identical events.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventRef {
    pub tick: Tick,
    pub ep: Endpoint,
    pub txn: Option<TxnId>,
    pub from: LinkState,
    pub to: LinkState,
    pub nth: u32,
}

impl fmt::Display for EventRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}:{}:", self.tick, self.ep)?;
        match self.txn {
            Some(t) => write!(f, "{t}")?,
            None => f.write_str("-")?,
        }
        write!(f, ":{}>{}#{}", self.from, self.to, self.nth)
    }
}

fn parse_state(s: &str) -> Option<LinkState> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).ok()
}

impl FromStr for EventRef {
    type Err = RelationError;

    fn from_str(s: &str) -> Result<EventRef, RelationError> {
        let bad = || RelationError::BadRef(s.to_string());
        let mut parts = s.splitn(4, ':');
        let tick = parts.next().and_then(|p| p.strip_prefix('t')).and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let ep = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let txn = match parts.next().ok_or_else(bad)? {
            "-" => None,
            p => Some(TxnId(p.strip_prefix('T').and_then(|n| n.parse().ok()).ok_or_else(bad)?)),
        };
        let rest = parts.next().ok_or_else(bad)?;
        let (states, nth) = rest.split_once('#').ok_or_else(bad)?;
        let (from, to) = states.split_once('>').ok_or_else(bad)?;
        Ok(EventRef {
            tick,
            ep,
            txn,
            from: parse_state(from).ok_or_else(bad)?,
            to: parse_state(to).ok_or_else(bad)?,
            nth: nth.parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RelationError {
    #[error("an event is not related to itself")]
    SameEvent,
    #[error("no event {0} in the trace")]
    Unknown(String),
    #[error("malformed event reference `{0}`")]
    BadRef(String),
}

type Vc = [u64; 2];

fn leq(a: &Vc, b: &Vc) -> bool {
    a[0] <= b[0] && a[1] <= b[1]
}

#[derive(Debug, Clone)]
struct Ev {
    r: EventRef,
    vc: Vc,
}

/// Events, happens-before clocks and crossed pairs of one trace.
#[derive(Debug, Clone)]
pub struct Causality {
    events: Vec<Ev>,
    index: BTreeMap<EventRef, usize>,
    /// Crossed initiation pairs `(i, j)`, `i < j`, with the winner's index
    /// and the tick its bilateral commit resolved the pair.
    crossed: BTreeMap<(usize, usize), Option<(usize, Tick)>>,
}

impl Causality {
    pub fn new(trace: &Trace) -> Causality {
        let mut vc: [Vc; 2] = [[0; 2]; 2];
        let mut sent: BTreeMap<u64, Vc> = BTreeMap::new();
        let mut events: Vec<Ev> = Vec::new();
        let mut index = BTreeMap::new();
        let mut initiated_by: BTreeMap<TxnId, usize> = BTreeMap::new();
        let mut closed: BTreeMap<TxnId, Tick> = BTreeMap::new();
        let mut committed: BTreeMap<TxnId, Vec<Tick>> = BTreeMap::new();

        for rec in &trace.records {
            let Some(ep) = rec.ep else { continue };
            let i = ep.index();
            match &rec.body {
                Body::Emit { frame, .. } => {
                    vc[i][i] += 1;
                    sent.insert(*frame, vc[i]);
                }
                Body::Deliver { frame, copy_of, .. } => {
                    vc[i][i] += 1;
                    if let Some(s) = sent.get(&copy_of.unwrap_or(*frame)) {
                        vc[i] = [vc[i][0].max(s[0]), vc[i][1].max(s[1])];
                    }
                }
                Body::Yield { dropped, .. } => {
                    closed.entry(*dropped).or_insert(rec.tick);
                }
                Body::Transition { from, event, to, .. } if from != to => {
                    vc[i][i] += 1;
                    let mut r = EventRef { tick: rec.tick, ep, txn: rec.txn, from: *from, to: *to, nth: 0 };
                    while index.contains_key(&r) {
                        r.nth += 1;
                    }
                    let initiate = event == "Initiate";
                    let n = events.len();
                    index.insert(r.clone(), n);
                    events.push(Ev { r, vc: vc[i] });
                    if let Some(t) = rec.txn {
                        if initiate {
                            initiated_by.insert(t, n);
                        }
                        if matches!(to, LinkState::Committed | LinkState::Aborted) {
                            closed.entry(t).or_insert(rec.tick);
                        }
                        if *to == LinkState::Committed {
                            committed.entry(t).or_default().push(rec.tick);
                        }
                    }
                }
                _ => {}
            }
        }

        let mut crossed = BTreeMap::new();
        let inits: Vec<(TxnId, usize)> = initiated_by.iter().map(|(t, i)| (*t, *i)).collect();
        for (x, &(tx, ix)) in inits.iter().enumerate() {
            for &(ty, iy) in &inits[x + 1..] {
                let (a, b) = (&events[ix], &events[iy]);
                if a.r.ep == b.r.ep || leq(&a.vc, &b.vc) || leq(&b.vc, &a.vc) {
                    continue;
                }
                let open_at = |t: TxnId, tick: Tick| closed.get(&t).is_none_or(|c| *c >= tick);
                if !(open_at(tx, b.r.tick) && open_at(ty, a.r.tick)) {
                    continue;
                }
                // Resolved by the winner's bilateral commit: its second
                // COMMITTED transition.
                let resolution = [(tx, ix), (ty, iy)]
                    .into_iter()
                    .find_map(|(t, i)| committed.get(&t).and_then(|c| c.get(1)).map(|tick| (i, *tick)));
                crossed.insert((ix.min(iy), ix.max(iy)), resolution);
            }
        }
        Causality { events, index, crossed }
    }

    pub fn events(&self) -> impl Iterator<Item = &EventRef> {
        self.events.iter().map(|e| &e.r)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    fn lookup(&self, r: &EventRef) -> Result<usize, RelationError> {
        self.index.get(r).copied().ok_or_else(|| RelationError::Unknown(r.to_string()))
    }

    /// Relation of `a` to `b` as known at `tick`; `None` while either
    /// event lies in the future.
    fn at(&self, a: usize, b: usize, tick: Tick) -> Option<CausalRelation> {
        let (ea, eb) = (&self.events[a], &self.events[b]);
        if ea.r.tick > tick || eb.r.tick > tick {
            return None;
        }
        if leq(&ea.vc, &eb.vc) {
            return Some(CausalRelation::Before);
        }
        if leq(&eb.vc, &ea.vc) {
            return Some(CausalRelation::After);
        }
        match self.crossed.get(&(a.min(b), a.max(b))) {
            Some(Some((winner, resolved))) if *resolved <= tick => Some(if *winner == a {
                CausalRelation::Before
            } else {
                CausalRelation::After
            }),
            Some(_) => Some(CausalRelation::Indefinite),
            None => Some(CausalRelation::Concurrent),
        }
    }

    pub fn relation_at(&self, a: &EventRef, b: &EventRef, tick: Tick) -> Result<Option<CausalRelation>, RelationError> {
        let (i, j) = (self.lookup(a)?, self.lookup(b)?);
        if i == j {
            return Err(RelationError::SameEvent);
        }
        Ok(self.at(i, j, tick))
    }

    pub fn relate(&self, a: &EventRef, b: &EventRef) -> Result<CausalRelation, RelationError> {
        Ok(self.relation_at(a, b, Tick::MAX)?.expect("both events exist by the end"))
    }

    /// Relation values of the pair over time, consecutive repeats merged,
    /// starting from the tick both events exist.
    pub fn trajectory(&self, a: &EventRef, b: &EventRef) -> Result<Vec<CausalRelation>, RelationError> {
        let (i, j) = (self.lookup(a)?, self.lookup(b)?);
        if i == j {
            return Err(RelationError::SameEvent);
        }
        let born = self.events[i].r.tick.max(self.events[j].r.tick);
        let mut ticks: BTreeSet<Tick> = self.crossed.values().flatten().map(|(_, t)| *t).filter(|t| *t > born).collect();
        ticks.insert(born);
        ticks.insert(Tick::MAX);
        let mut out: Vec<CausalRelation> = Vec::new();
        for t in ticks {
            let rel = self.at(i, j, t).expect("both events exist");
            if out.last() != Some(&rel) {
                out.push(rel);
            }
        }
        Ok(out)
    }
}

/// Relation of `a` to `b` at the end of `trace`.
pub fn relate(a: EventRef, b: EventRef, trace: &Trace) -> Result<CausalRelation, RelationError> {
    Causality::new(trace).relate(&a, &b)
}

/// Every ordered pair of distinct events known by `at_tick`.
pub fn relation_matrix(trace: &Trace, at_tick: Tick) -> Vec<(EventRef, EventRef, CausalRelation)> {
    let c = Causality::new(trace);
    let mut out = Vec::new();
    for i in 0..c.len() {
        for j in 0..c.len() {
            if i == j {
                continue;
            }
            if let Some(rel) = c.at(i, j, at_tick) {
                out.push((c.events[i].r.clone(), c.events[j].r.clone(), rel));
            }
        }
    }
    out
}

/// Whether a trajectory reads `Indefinite* definite?` with the definite
/// value, once reached, never changing.
pub fn trajectory_is_monotone(traj: &[CausalRelation]) -> bool {
    let first_definite = traj.iter().position(|r| r.is_definite()).unwrap_or(traj.len());
    traj[..first_definite].iter().all(|r| *r == CausalRelation::Indefinite) && traj.len() - first_definite <= 1
}

/// Three-valued image of the final relation, plus the pairs whose relation
/// was ever indefinite: the information a three-valued order cannot hold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DcoProjection {
    pub relations: Vec<(String, String, CausalRelation)>,
    pub loss_set: Vec<(String, String)>,
}

impl DcoProjection {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = String::new();
        for (a, b, r) in &self.relations {
            out.push_str(&format!("{a} {b} {r}\n"));
        }
        for (a, b) in &self.loss_set {
            out.push_str(&format!("loss {a} {b}\n"));
        }
        out.into_bytes()
    }
}

pub fn dco_project(trace: &Trace) -> DcoProjection {
    let c = Causality::new(trace);
    let mut relations = Vec::new();
    let mut loss_set = Vec::new();
    for i in 0..c.len() {
        for j in i + 1..c.len() {
            let (a, b) = (c.events[i].r.to_string(), c.events[j].r.to_string());
            let rel = match c.at(i, j, Tick::MAX).expect("both exist") {
                CausalRelation::Indefinite => CausalRelation::Concurrent,
                r => r,
            };
            if c.crossed.contains_key(&(i, j)) {
                loss_set.push((a.clone(), b.clone()));
            }
            relations.push((a, b, rel));
        }
    }
    DcoProjection { relations, loss_set }
}

//! Hand-mutated traces: each mutation must trip the invariant it breaks.

use oae_link::analysis::{check_invariants, Invariant, ViolationReport};
use oae_link::ids::{Endpoint, TxnId};
use oae_link::ilt::TensorClock;
use oae_link::link_fsm::LinkState;
use oae_link::netsim::{run, Scenario};
use oae_link::trace::{Body, Record, Trace};

fn clean() -> Trace {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/single_commit.toml");
    let s = Scenario::from_toml(&std::fs::read_to_string(path).unwrap()).unwrap();
    run(&s).trace
}

fn find(t: &Trace, pred: impl Fn(&Record) -> bool) -> usize {
    t.records.iter().position(pred).expect("record present")
}

fn flags(r: &ViolationReport, inv: Invariant) {
    assert!(r.count(inv) > 0, "{inv} not flagged: {:?}", r.violations);
}

fn is_commit(r: &Record, ep: Endpoint) -> bool {
    r.ep == Some(ep) && r.transition().is_some_and(|(_, to)| to == LinkState::Committed)
}

#[test]
fn unmutated_trace_is_clean() {
    let r = check_invariants(&clean());
    assert!(r.is_clean(), "{:?}", r.violations);
    assert_eq!(r.clock_inconsistencies, 0);
}

#[test]
fn n1_visible_with_one_side_uncommitted() {
    let mut t = clean();
    let i = find(&t, |r| is_commit(r, Endpoint::B));
    t.records.remove(i);
    let r = check_invariants(&t);
    flags(&r, Invariant::N1);
    assert_eq!(r.count(Invariant::N1), 2);
}

#[test]
fn n2_commit_straight_from_tentative() {
    let mut t = clean();
    let i = find(&t, |r| is_commit(r, Endpoint::A));
    if let Body::Transition { from, .. } = &mut t.records[i].body {
        *from = LinkState::Tentative;
    }
    flags(&check_invariants(&t), Invariant::N2);
}

#[test]
fn n3_damaged_frame_drives_reflection() {
    let mut t = clean();
    let i = find(&t, |r| matches!(r.body, Body::Deliver { frame: 1, .. }));
    if let Body::Deliver { intact, .. } = &mut t.records[i].body {
        *intact = false;
    }
    let r = check_invariants(&t);
    flags(&r, Invariant::N3);
    assert_eq!(r.violations.len(), 1);
}

#[test]
fn n3_duplicate_drives_a_transition() {
    let mut t = clean();
    let i = find(&t, |r| is_commit(r, Endpoint::B));
    let tick = t.records[i].tick;
    t.records.insert(
        i,
        Record::new(tick, Some(Endpoint::B), Some(TxnId(1)), Body::Deliver {
            frame: 9,
            frame_kind: oae_link::transaction::FrameKind::CommitAck,
            intact: true,
            copy_of: Some(3),
        }),
    );
    if let Body::Transition { cause, .. } = &mut t.records[i + 1].body {
        *cause = Some(9);
    }
    flags(&check_invariants(&t), Invariant::N3);
}

#[test]
fn n3_and_a2_diverging_visible_digest() {
    let mut t = clean();
    let i = find(&t, |r| r.ep == Some(Endpoint::B) && matches!(r.body, Body::Visible { .. }));
    if let Body::Visible { digest, .. } = &mut t.records[i].body {
        *digest ^= 1;
    }
    let r = check_invariants(&t);
    flags(&r, Invariant::N3);
    flags(&r, Invariant::A2);
}

#[test]
fn n4_timeout_that_does_not_abort() {
    let mut t = clean();
    let tick = t.last_tick();
    t.push(Record::new(tick, Some(Endpoint::A), Some(TxnId(2)), Body::Transition {
        from: LinkState::Tentative,
        event: "Timeout".into(),
        to: LinkState::Idle,
        cause: None,
    }));
    flags(&check_invariants(&t), Invariant::N4);
}

#[test]
fn a1_keys_trickle_in() {
    let mut t = clean();
    let i = find(&t, |r| r.ep == Some(Endpoint::B) && matches!(r.body, Body::Visible { .. }));
    let mut late = t.records[i].clone();
    if let Body::Visible { keys, .. } = &mut t.records[i].body {
        keys.truncate(1);
    }
    late.tick += 1;
    if let Body::Visible { keys, .. } = &mut late.body {
        keys.remove(0);
    }
    let j = find(&t, |r| r.tick > late.tick);
    t.records.insert(j, late);
    flags(&check_invariants(&t), Invariant::A1);
}

#[test]
fn a1_only_some_keys() {
    let mut t = clean();
    let i = find(&t, |r| r.ep == Some(Endpoint::A) && matches!(r.body, Body::Visible { .. }));
    if let Body::Visible { keys, .. } = &mut t.records[i].body {
        keys.pop();
    }
    flags(&check_invariants(&t), Invariant::A1);
}

#[test]
fn a2_visible_without_validation() {
    let mut t = clean();
    t.records.retain(|r| !matches!(r.body, Body::Validated { .. }));
    flags(&check_invariants(&t), Invariant::A2);
}

#[test]
fn a3_torn_snapshot() {
    let mut t = clean();
    let i = t.records.iter().rposition(|r| matches!(r.body, Body::Read { .. })).unwrap();
    if let Body::Read { entries } = &mut t.records[i].body {
        entries[1].txn = None;
        entries[1].value = None;
    }
    let r = check_invariants(&t);
    flags(&r, Invariant::A3);
    assert_eq!(r.violations.len(), 1);
}

#[test]
fn clock_running_backwards_is_counted() {
    let mut t = clean();
    let tick = t.last_tick();
    t.push(Record::new(tick, None, None, Body::Clock { clock: TensorClock { c_a: 0, c_b: 0, d: 0 } }));
    assert_eq!(check_invariants(&t).clock_inconsistencies, 1);
}

#[test]
fn trace_survives_jsonl_round_trip() {
    let t = clean();
    let back = Trace::parse(&t.to_jsonl()).unwrap();
    assert_eq!(back, t);
}

use proptest::prelude::*;

use oae_link::analysis::{check_invariants, Invariant};
use oae_link::ids::{Endpoint, TxnId};
use oae_link::ilt::{tc_init, tc_on_initiate, tc_on_round_complete, TensorClock};
use oae_link::link_fsm::{Action, EndpointFsm, FailReason, LinkEvent, LinkState, Outcome, TieBreak, TRANSITIONS};
use oae_link::netsim::{run, LinkParams, Scenario, ScriptInitiate, ScriptRead};
use oae_link::trace::{Body, Mode};
use oae_link::transaction::{FieldWrite, FrameKind};
use oae_link::workload::standard_scenario;

fn event() -> impl Strategy<Value = LinkEvent> {
    let txn = (1u64..4).prop_map(TxnId);
    let tb = (any::<bool>(), 0u64..4).prop_map(|(a, counter)| TieBreak {
        endpoint: if a { Endpoint::A } else { Endpoint::B },
        counter,
    });
    prop_oneof![
        Just(LinkEvent::LinkUp),
        Just(LinkEvent::Quiesce),
        (txn.clone(), tb.clone()).prop_map(|(txn, tiebreak)| LinkEvent::Initiate { txn, tiebreak }),
        (txn.clone(), tb).prop_map(|(txn, tiebreak)| LinkEvent::DataArrived { txn, tiebreak }),
        txn.clone().prop_map(|txn| LinkEvent::ReflectionArrived { txn }),
        txn.clone().prop_map(|txn| LinkEvent::ValidationOk { txn }),
        txn.clone().prop_map(|txn| LinkEvent::ValidationFail { txn, reason: FailReason::Integrity }),
        txn.clone().prop_map(|txn| LinkEvent::Timeout { txn }),
        txn.clone().prop_map(|txn| LinkEvent::PeerAbort { txn }),
        txn.prop_map(|txn| LinkEvent::CommitAck { txn }),
    ]
}

proptest! {
    #[test]
    fn random_walks_stay_inside_the_table(a in any::<bool>(), events in prop::collection::vec((event(), 0u64..30), 1..60)) {
        let mut fsm = EndpointFsm::new(if a { Endpoint::A } else { Endpoint::B }, 10);
        for (ev, now) in events {
            let step = fsm.step(&ev, now);
            match step.outcome {
                Outcome::Transition { from, to } => {
                    prop_assert!(TRANSITIONS.contains(&(from, to)), "{from} -> {to}");
                    prop_assert_eq!(from, fsm.state);
                    prop_assert_eq!(to, step.fsm.state);
                }
                Outcome::Ignored { .. } | Outcome::Rejected { .. } => prop_assert_eq!(&step.fsm, &fsm),
                Outcome::Yielded { .. } => prop_assert_eq!(step.fsm.state, fsm.state),
            }
            let exposes = step.actions.iter().any(|x| matches!(x, Action::ExposeCommitted(_)));
            prop_assert_eq!(
                exposes,
                step.outcome == Outcome::Transition { from: LinkState::Reflecting, to: LinkState::Committed }
            );
            prop_assert_eq!(step.fsm.current_txn.is_some(), step.fsm.state.is_open());
            fsm = step.fsm;
        }
    }

    #[test]
    fn faulty_runs_conserve_frames_and_repeat(
        seed in any::<u64>(),
        loss in 0.0f64..0.3,
        dup in 0.0f64..0.3,
        reorder in 0.0f64..0.3,
        corrupt in 0.0f64..0.3,
        fito in any::<bool>(),
    ) {
        let mut s = standard_scenario(seed, if fito { Mode::Fito } else { Mode::Oae });
        s.link.loss_prob = loss;
        s.link.dup_prob = dup;
        s.link.reorder_prob = reorder;
        s.link.corrupt_prob = corrupt;
        let first = run(&s);
        prop_assert!(first.wire.conserved(), "{:?}", first.wire);
        prop_assert_eq!(first.trace.to_jsonl(), run(&s).trace.to_jsonl());
        if !fito {
            let r = check_invariants(&first.trace);
            prop_assert!(r.is_clean(), "{:?}", r.violations);
            prop_assert_eq!(first.audit.unbalanced, 0);
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum ClockOp {
    Init(Endpoint),
    Round,
}

fn enumerate(tc: TensorClock, depth: usize, seen: &mut u64) {
    *seen += 1;
    assert!(tc.is_consistent(), "{tc}");
    if depth == 0 {
        return;
    }
    for op in [ClockOp::Init(Endpoint::A), ClockOp::Init(Endpoint::B), ClockOp::Round] {
        let next = match op {
            ClockOp::Init(side) => tc_on_initiate(tc, side).unwrap(),
            // A round completes only for a transaction that was initiated.
            ClockOp::Round if tc.d < tc.c_a + tc.c_b => tc_on_round_complete(tc).unwrap(),
            ClockOp::Round => continue,
        };
        assert!(tc.dominated_by(&next) && next != tc, "{op:?}: {tc} -> {next}");
        enumerate(next, depth - 1, seen);
    }
}

#[test]
fn every_clock_history_up_to_four_transactions_is_consistent() {
    let mut seen = 0;
    enumerate(tc_init(), 8, &mut seen);
    assert!(seen > 1000);
}

#[test]
fn clock_overflow_is_an_error() {
    let tc = TensorClock::new(u64::MAX, 0, 0);
    assert!(tc_on_initiate(tc, Endpoint::A).is_err());
    assert!(tc_on_initiate(tc, Endpoint::B).is_ok());
    assert!(tc_on_round_complete(TensorClock::new(0, 0, u64::MAX)).is_err());
}

fn two_field(mode: Mode, d: u64, t: u64) -> Scenario {
    let mut s = Scenario::new("two-field", 60, LinkParams::fault_free(d, t));
    s.mode = mode;
    s.initiate.push(ScriptInitiate {
        endpoint: Endpoint::A,
        at: 1,
        writes: vec![FieldWrite { key: 1, value: 7 }, FieldWrite { key: 2, value: 8 }],
    });
    for at in 0..50 {
        for endpoint in Endpoint::BOTH {
            s.read.push(ScriptRead { endpoint, at, keys: vec![1, 2] });
        }
    }
    s
}

#[test]
fn reads_at_every_tick_never_see_half_a_transaction() {
    let mut baseline_torn = 0;
    for d in 1..=4 {
        for t in 1..=6 {
            let r = check_invariants(&run(&two_field(Mode::Oae, d, t)).trace);
            assert!(r.is_clean(), "d={d} T={t}: {:?}", r.violations);
            assert_eq!(r.committed, 1);
            baseline_torn += check_invariants(&run(&two_field(Mode::Fito, d, t)).trace).count(Invariant::A3);
        }
    }
    assert!(baseline_torn > 0);
}

#[test]
fn duplicated_tentative_is_reflected_once() {
    let mut link = LinkParams::fault_free(3, 2);
    link.dup_prob = 1.0;
    let mut s = Scenario::new("dup", 60, link);
    s.initiate.push(ScriptInitiate { endpoint: Endpoint::A, at: 1, writes: vec![FieldWrite { key: 1, value: 1 }] });
    let res = run(&s);
    let emitted = |k: FrameKind| {
        res.trace.records.iter().filter(|r| matches!(r.body, Body::Emit { frame_kind, .. } if frame_kind == k)).count()
    };
    let duplicates = res.trace.records.iter().filter(|r| matches!(r.body, Body::Duplicate { .. })).count();
    assert_eq!(emitted(FrameKind::Tentative), 1);
    assert_eq!(emitted(FrameKind::Reflection), 1);
    assert!(duplicates >= 2);
    let r = check_invariants(&res.trace);
    assert!(r.is_clean(), "{:?}", r.violations);
    assert_eq!(r.committed, 1);
}

use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;
use crate::raft::DescribeBody;
use crate::sim::LinkModel;

fn eid(seq: u64) -> ElectionId {
    ElectionId::new(7, seq)
}

fn req(seq: u64, designation: Designation) -> ExecuteRequest {
    ExecuteRequest {
        election: eid(seq),
        submit_time: 0,
        duration_ms: 1_000,
        gpus: 2,
        designation,
    }
}

use ProposalKind::{Lead as L, Yield as Y};

/// Independent reading of the rule: the first LEAD in commit order wins;
/// with no LEAD and every replica yielding, the election fails.
fn oracle(order: &[(ReplicaId, ProposalKind)]) -> Outcome {
    let mut seen = std::collections::BTreeSet::new();
    let mut yields = 0;
    for &(r, k) in order {
        if !seen.insert(r) {
            continue;
        }
        if k == L {
            return Outcome::Winner(r);
        }
        yields += 1;
    }
    if yields == 3 {
        Outcome::FailedAllYield
    } else {
        Outcome::Pending
    }
}

fn permutations(items: &[ReplicaId]) -> Vec<Vec<ReplicaId>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

#[test]
fn exhaustive_orderings_match_oracle() {
    let mut cases = 0;
    for mask in 0..8u32 {
        let kind = |r: ReplicaId| if mask & (1 << (r - 1)) != 0 { L } else { Y };
        for perm in permutations(&[1, 2, 3]) {
            for len in 0..=3 {
                let order: Vec<_> = perm[..len].iter().map(|&r| (r, kind(r))).collect();
                assert_eq!(ElectionState::resolve(eid(0), &order), oracle(&order), "{order:?}");
                cases += 1;
            }
        }
    }
    assert_eq!(cases, 8 * 6 * 4);
}

#[test]
fn worked_orderings() {
    assert_eq!(ElectionState::resolve(eid(0), &[(2, L), (1, L), (3, L)]), Outcome::Winner(2));
    assert_eq!(ElectionState::resolve(eid(0), &[(1, Y), (2, Y), (3, Y)]), Outcome::FailedAllYield);
    assert_eq!(ElectionState::resolve(eid(0), &[(1, Y), (3, L), (2, Y)]), Outcome::Winner(3));
}

#[test]
fn duplicates_and_late_entries_ignored() {
    let mut st = ElectionState::new(eid(0));
    assert_eq!(st.on_commit(Y, 1, None), None);
    assert_eq!(st.on_commit(Y, 1, None), None);
    assert_eq!(st.on_commit(Y, 2, None), None);
    // Replica 1 already yielded; its LEAD must not count.
    assert_eq!(st.on_commit(L, 1, None), None);
    assert_eq!(st.on_commit(Y, 3, None), Some(election::ElectionEvent::Resolved(Outcome::FailedAllYield)));

    let mut st = ElectionState::new(eid(1));
    assert_eq!(st.on_commit(L, 3, None), Some(election::ElectionEvent::CastVote(3)));
    assert_eq!(st.on_commit(L, 1, None), None);
    // A vote for anyone but the first LEAD is malformed.
    assert_eq!(st.on_commit(ProposalKind::Vote, 2, Some(1)), None);
    assert_eq!(
        st.on_commit(ProposalKind::Vote, 2, Some(3)),
        Some(election::ElectionEvent::Resolved(Outcome::Winner(3)))
    );
    assert_eq!(st.on_commit(ProposalKind::Vote, 1, Some(3)), None);
    assert_eq!(st.votes().len(), 2);
    st.close();
    assert_eq!(st.on_commit(L, 2, None), None);
    assert_eq!(st.outcome(), Outcome::Winner(3));
}

#[test]
fn rule_table() {
    // (designation, gpus available) -> first action
    let table = [
        (Designation::Execute, true, Some(L)),
        (Designation::Execute, false, Some(Y)),
        (Designation::Yield, true, Some(Y)),
        (Designation::Yield, false, Some(Y)),
        (Designation::Standby, true, None),
        (Designation::Standby, false, None),
    ];
    for (d, avail, want) in table {
        let mut r = KernelReplica::new(1, 7);
        let actions = r.on_execute_request(req(0, d), avail);
        let got = actions.first().map(|a| match a {
            ReplicaAction::Propose(KernelCommand::Proposal { kind, .. }) => *kind,
            other => panic!("unexpected {other:?}"),
        });
        assert_eq!(got, want, "{d:?} avail={avail}");
    }
    let mut r = KernelReplica::new(1, 7);
    let a = r.on_execute_request(req(0, Designation::Executor), false);
    assert_eq!(a, vec![ReplicaAction::StartExecution { election: eid(0), gpus: 2 }]);
    assert_eq!(r.phase(), Phase::Executing);
}

#[test]
fn designate_rule() {
    use crate::scheduler::designate;
    let d = |v: &[bool]| -> Vec<Designation> {
        let a: Vec<_> = v.iter().enumerate().map(|(i, &x)| (i as ReplicaId + 1, x)).collect();
        designate(&a).into_iter().map(|x| x.1).collect()
    };
    use Designation::*;
    assert_eq!(d(&[false, false, false]), vec![Yield, Yield, Yield]);
    assert_eq!(d(&[false, true, false]), vec![Standby, Executor, Standby]);
    assert_eq!(d(&[true, true, false]), vec![Execute, Execute, Yield]);
    assert_eq!(d(&[true, true, true]), vec![Execute, Execute, Execute]);
}

/// Feed the same committed sequence to three replicas and carry out votes
/// by appending them to the sequence, as a log would.
fn replay(order: &[KernelCommand]) -> (Vec<KernelReplica>, Vec<KernelCommand>) {
    let mut reps: Vec<KernelReplica> = (1..=3).map(|i| KernelReplica::new(i, 7)).collect();
    let mut log: Vec<KernelCommand> = order.to_vec();
    let mut i = 0;
    while i < log.len() {
        let cmd = log[i].clone();
        for r in reps.iter_mut() {
            for a in r.on_committed(&cmd) {
                if let ReplicaAction::Propose(c) = a {
                    log.push(c);
                }
            }
        }
        i += 1;
    }
    (reps, log)
}

#[test]
fn scripted_commit_order_elects_first_lead() {
    let e = eid(0);
    let order = [KernelCommand::lead(e, 2), KernelCommand::lead(e, 1), KernelCommand::lead(e, 3)];
    let (reps, log) = replay(&order);
    for r in &reps {
        assert_eq!(r.election(e).unwrap().outcome(), Outcome::Winner(2));
    }
    let started: Vec<_> = reps.iter().filter(|r| r.started().contains(&e)).map(|r| r.id).collect();
    assert_eq!(started, vec![2]);
    let kinds: Vec<_> = log.iter().map(|c| c.body_kind()).collect();
    assert_eq!(kinds, ["LEAD", "LEAD", "LEAD", "VOTE", "VOTE", "VOTE"]);
}

#[test]
fn all_yield_then_resubmission_runs_once_on_migrated_replica() {
    let e = eid(0);
    let order = [KernelCommand::yield_(e, 1), KernelCommand::yield_(e, 2), KernelCommand::yield_(e, 3)];
    let (reps, _) = replay(&order);
    for r in &reps {
        assert_eq!(r.election(e).unwrap().outcome(), Outcome::FailedAllYield);
        assert!(r.started().is_empty());
    }

    // Full protocol: no host has GPUs, the scheduler migrates and resubmits.
    let mut g = KernelGroup::new(7, 11, GroupConfig::default()).unwrap();
    let out = g
        .run_request(RequestRun {
            seq: 0,
            gpus: 4,
            duration_ms: 1_000,
            available: BTreeMap::new(),
            crash: None,
        })
        .unwrap();
    assert!(out.failed_all_yield && out.migrated);
    assert_eq!(out.attempts, 2);
    let newcomer = out.executed_by.unwrap();
    assert!(newcomer > 3, "executed on the migrated replica");
    assert_eq!(g.starts().len(), 1);
    assert_eq!(g.finished(), &[(ElectionId::new(7, 0).next_attempt(), newcomer)]);
    let audit = g.audit(ElectionId::new(7, 0)).unwrap();
    assert!(audit.failed_all_yield);
    assert_eq!(audit.proposals.len(), 3);
}

#[test]
fn fence_yields_to_a_live_winner() {
    let e = eid(0);
    let fence = |failed: Vec<ReplicaId>| KernelCommand::Fence { election: e, failed };
    let decided = [
        KernelCommand::lead(e, 2),
        KernelCommand::vote(e, 1, 2),
        KernelCommand::vote(e, 2, 2),
        KernelCommand::vote(e, 3, 2),
    ];

    let (reps, _) = replay(&[&decided[..], &[fence(vec![1])]].concat());
    assert!(reps.iter().all(|r| !r.election(e).unwrap().is_closed()));
    assert_eq!(reps[1].executing(), Some(e));

    let (reps, _) = replay(&[&decided[..], &[fence(vec![2])]].concat());
    assert!(reps.iter().all(|r| r.election(e).unwrap().is_closed()));
    assert_eq!(reps[1].executing(), None);

    // Ahead of the votes the fence closes the election and nobody starts.
    let (reps, log) = replay(&[KernelCommand::lead(e, 2), fence(vec![])]);
    assert!(reps.iter().all(|r| r.election(e).unwrap().is_closed() && r.started().is_empty()));
    assert_eq!(log.last().unwrap().body_kind(), "VOTE");
}

#[test]
fn busy_interval() {
    let cfg = GroupConfig::default();
    let busy = |d: u64| cfg.param_load_ms + d + cfg.copy_ms;
    assert_eq!(busy(120_000), 120_400);
    assert_eq!(busy(0), cfg.param_load_ms + cfg.copy_ms);
}

#[test]
fn yield_designated_replica_never_leads() {
    let mut r = KernelReplica::new(2, 7);
    for seq in 0..20 {
        for a in r.on_execute_request(req(seq, Designation::Yield), true) {
            assert!(!matches!(
                a,
                ReplicaAction::Propose(KernelCommand::Proposal { kind: ProposalKind::Lead, .. })
            ));
        }
    }
}

#[test]
fn synchronizing_replica_queues_fifo() {
    let mut r = KernelReplica::new(1, 7);
    r.on_execute_request(req(0, Designation::Executor), true);
    let a = r.finish_execution(eid(0));
    assert!(matches!(a[0], ReplicaAction::Propose(KernelCommand::ExecutionComplete { .. })));
    assert_eq!(r.phase(), Phase::Synchronizing);
    assert!(r.on_execute_request(req(1, Designation::Execute), true).is_empty());
    assert!(r.on_execute_request(req(2, Designation::Yield), true).is_empty());
    assert!(r.on_execute_request(req(1, Designation::Execute), true).is_empty());
    assert_eq!(r.queued(), 2);
    let drained = r.sync_done();
    let kinds: Vec<_> = drained
        .iter()
        .map(|a| match a {
            ReplicaAction::Propose(c) => (c.election().unwrap().seq, c.body_kind()),
            other => panic!("{other:?}"),
        })
        .collect();
    assert_eq!(kinds, vec![(1, "LEAD"), (2, "YIELD")]);
}

#[test]
fn versions_apply_monotonically() {
    let mut r = KernelReplica::new(1, 7);
    for v in [1, 2, 2, 1, 5, 3] {
        r.on_committed(&KernelCommand::StateDelta { version: v, bytes: 10 });
    }
    assert_eq!(r.applied_state_version(), 5);
}

#[test]
fn group_election_and_sync() {
    let mut g = KernelGroup::new(3, 5, GroupConfig::default()).unwrap();
    let e = ElectionId::new(3, 0);
    let ds = crate::scheduler::designate(&[(1, true), (2, true), (3, true)]);
    let rep = g.submit(e, 0, 1_000, 2, &ds).unwrap();
    let Outcome::Winner(w) = rep.outcome else { panic!("{rep:?}") };
    assert_eq!(rep.executor, Some(w));
    let audit = g.audit(e).unwrap().clone();
    assert_eq!(audit.proposals[0].kind, L);
    assert_eq!(audit.proposals[0].replica, w);
    g.complete(e, w).unwrap();
    assert_eq!(g.closed_by(e), Some(Some(w)));

    // Threshold boundary: equal goes through the log.
    let (v1, _) = g.replicate(w, 10 << 20, 10 << 20, |v| format!("o{v}")).unwrap();
    assert!(g.objects().is_empty());
    let (v2, _) = g.replicate(w, (10 << 20) + 1, 10 << 20, |v| format!("o{v}")).unwrap();
    assert_eq!(g.objects().get("o2"), Some(&((10 << 20) + 1, 2)));
    assert_eq!((v1, v2), (1, 2));
    assert!(g.versions().values().all(|&v| v == 2));

    let mut buf = Vec::new();
    g.dump_log(w, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.contains("\"execution_complete\"") && text.contains("\"large_object_pointer\""));
}

#[test]
fn replacement_catches_up() {
    let mut g = KernelGroup::new(4, 9, GroupConfig::default()).unwrap();
    let e = ElectionId::new(4, 0);
    let ds = crate::scheduler::designate(&[(1, false), (2, true), (3, false)]);
    let rep = g.submit(e, 0, 10, 1, &ds).unwrap();
    assert_eq!(rep.executor, Some(2));
    g.complete(e, 2).unwrap();
    for _ in 0..7 {
        g.replicate(2, 100, 1000, |v| format!("o{v}")).unwrap();
    }
    g.crash(1);
    let (new, _) = g.replace(1).unwrap();
    assert_eq!(g.replica(new).applied_state_version(), 7);
    assert!(g.versions().values().all(|&v| v == 7));
    assert_eq!(g.members().len(), 3);
}

#[test]
fn recreate_restores_checkpoint() {
    let mut g = KernelGroup::new(5, 1, GroupConfig::default()).unwrap();
    let mut objs = BTreeMap::new();
    objs.insert("k5/v3".to_string(), (500u64 << 20, 3u64));
    g.recreate(4, &objs).unwrap();
    assert!(g.versions().values().all(|&v| v == 4));
    assert_eq!(g.objects(), objs);
    let e = ElectionId::new(5, 1);
    let ds = crate::scheduler::designate(&g.live_members().iter().map(|&m| (m, true)).collect::<Vec<_>>());
    assert!(g.submit(e, 0, 10, 1, &ds).unwrap().executor.is_some());
}

fn lossy(seed: u64) -> GroupConfig {
    let mut link = LinkModel::reliable(5);
    link.jitter = crate::sim::LatencyDist::Uniform { lo_ms: 0.0, hi_ms: (200 + seed % 300) as f64 };
    link.drop_probability = 0.3;
    // Election timeouts must exceed the link's round trip.
    GroupConfig {
        link: link.clone(),
        ls_link: link,
        tick_ms: 100,
        proposal_retry_ms: 1_000,
        ..GroupConfig::default()
    }
}

#[test]
fn fence_survives_proposer_crash() {
    // All replicas yield; the first live member proposes the fence and then
    // crashes before the entry is appended.
    let mut link = LinkModel::reliable(5);
    link.jitter = crate::sim::LatencyDist::Uniform { lo_ms: 0.0, hi_ms: 452.0 };
    link.drop_probability = 0.24;
    let config = GroupConfig {
        link: link.clone(),
        ls_link: link,
        tick_ms: 100,
        proposal_retry_ms: 1_000,
        ..GroupConfig::default()
    };
    let mut g = KernelGroup::new(3613, 3613, config).unwrap();
    let available: BTreeMap<_, _> = (1..=3).map(|r| (r, false)).collect();
    let out = g
        .run_request(RequestRun {
            seq: 0,
            gpus: 1,
            duration_ms: 2_000,
            available,
            crash: Some((2, 2_731)),
        })
        .unwrap();
    assert!(out.executed_by.is_some());
    assert_eq!(g.starts().len(), 1);
}

#[test]
fn direct_executor_is_not_fenced_when_a_standby_fails() {
    // Only replica 3 has GPUs, so it runs without an election. Replica 2
    // crashes meanwhile; the run must still count once.
    let mut link = LinkModel::reliable(5);
    link.jitter = crate::sim::LatencyDist::Uniform { lo_ms: 0.0, hi_ms: 403.0 };
    link.drop_probability = 0.294;
    let config = GroupConfig {
        link: link.clone(),
        ls_link: link,
        tick_ms: 100,
        proposal_retry_ms: 1_000,
        ..GroupConfig::default()
    };
    let mut g = KernelGroup::new(654, 654, config).unwrap();
    let available: BTreeMap<_, _> = [(1, false), (2, false), (3, true)].into_iter().collect();
    let out = g
        .run_request(RequestRun {
            seq: 0,
            gpus: 1,
            duration_ms: 2_000,
            available,
            crash: Some((2, 709)),
        })
        .unwrap();
    assert_eq!(out.executed_by, Some(3));
    assert_eq!(out.attempts, 1);
    assert_eq!(g.starts().len(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn at_most_one_execution_per_request(
        seed in 0u64..1_000_000,
        avail in proptest::collection::vec(any::<bool>(), 3),
        crash in proptest::option::of((1u64..=3, 0u64..4_000)),
    ) {
        let mut g = KernelGroup::new(1, seed, lossy(seed)).unwrap();
        let available: BTreeMap<_, _> = (1..=3).zip(avail).collect();
        let out = g.run_request(RequestRun { seq: 0, gpus: 1, duration_ms: 2_000, available, crash });
        let out = out.unwrap();
        prop_assert!(out.executed_by.is_some());
        let mut per_election = BTreeMap::new();
        for (e, _) in g.starts() {
            *per_election.entry(*e).or_insert(0) += 1;
        }
        prop_assert!(per_election.values().all(|&n| n == 1));
        // Exactly one completion counts for the request.
        let counted: Vec<_> = g.finished().iter().filter(|(e, r)| g.closed_by(*e) == Some(Some(*r))).collect();
        prop_assert_eq!(counted.len(), 1);
    }
}

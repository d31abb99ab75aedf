use super::*;
use crate::cluster::ResourceRequest;
use crate::policies::{PolicyConfig, SrLimitMode};
use crate::workload::TrainingEvent;

fn cfg(kind: PolicyKind, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(PolicyConfig::new(kind));
    c.seed = seed;
    c
}

fn small(kind: PolicyKind) -> ExperimentConfig {
    let mut c = cfg(kind, 5);
    let g = c.workload.synthetic.as_mut().unwrap();
    g.sessions = 20;
    g.horizon_s = 4.0 * 3600.0;
    c.sim.horizon_s = 5.0 * 3600.0;
    c
}

fn one_session(gpus: u32) -> Vec<Session> {
    let request = ResourceRequest {
        millicpus: 4000,
        memory_mb: 16_384,
        gpus,
        vram_gb: 16 * gpus,
    };
    let ev = |submit_ms, duration_ms| TrainingEvent {
        session_id: 7,
        submit_ms,
        duration_ms,
        gpus,
        vram_gb: 16 * gpus,
        delta_bytes: 1 << 20,
    };
    vec![Session {
        session_id: 7,
        start_ms: 0,
        end_ms: 3_600_000,
        request,
        events: vec![ev(600_000, 60_000), ev(1_200_000, 120_000)],
    }]
}

#[test]
fn every_event_is_accounted_for() {
    for kind in PolicyKind::ALL {
        let r = run(&small(kind)).unwrap();
        let s = &r.stats;
        assert_eq!(
            s.completed_requests + s.error_requests + s.incomplete_requests,
            s.trace_events,
            "{kind}"
        );
        assert_eq!(s.error_requests, s.aborted_migrations, "{kind}");
        assert!(r.requests.iter().all(|q| q.is_consistent()), "{kind}");
    }
}

#[test]
fn committed_never_exceeds_provisioned() {
    for kind in PolicyKind::ALL {
        let r = run(&small(kind)).unwrap();
        assert!(r.samples.iter().all(|s| s.committed_gpus <= s.provisioned_gpus), "{kind}");
        assert!(r.stats.committed_gpu_hours <= r.stats.provisioned_gpu_hours + 1e-9);
    }
}

#[test]
fn same_seed_same_result() {
    let c = small(PolicyKind::DefaultReplicated);
    let a = run(&c).unwrap();
    let b = run(&c).unwrap();
    assert_eq!(a.requests, b.requests);
    assert_eq!(a.samples, b.samples);
    assert_eq!(
        serde_json::to_string(&a.stats).unwrap(),
        serde_json::to_string(&b.stats).unwrap()
    );
}

#[test]
fn reservation_runs_without_waiting() {
    let mut c = cfg(PolicyKind::Reservation, 1);
    c.sim.horizon_s = 3600.0;
    let r = Platform::new(c, one_session(2)).run().unwrap();
    assert_eq!(r.requests.len(), 2);
    for q in &r.requests {
        let d = q.step_durations();
        // No election, no parameter load: only routing precedes execution.
        assert_eq!(d[5], 0);
        assert_eq!(d[6], 0);
        assert!(q.immediate());
        assert!(q.interactivity_delay_ms() < 1000);
    }
}

#[test]
fn replicated_kernel_runs_each_request_once() {
    let mut c = cfg(PolicyKind::DefaultReplicated, 3);
    c.sim.horizon_s = 3600.0;
    let r = Platform::new(c, one_session(2)).run().unwrap();
    assert_eq!(r.stats.completed_requests, 2);
    assert_eq!(r.stats.error_requests, 0);
    let ids: BTreeSet<&str> = r.requests.iter().map(|q| q.election_id.as_str()).collect();
    assert_eq!(ids.len(), 2);
    let copy = crate::kernel::GroupConfig::default().copy_ms;
    assert_eq!(r.requests[0].step_durations()[7], 60_000 + copy);
}

#[test]
fn per_task_policies_provision_less_than_reservation() {
    let res = run(&cfg(PolicyKind::Reservation, 2)).unwrap().stats;
    for kind in [PolicyKind::Fcfs, PolicyKind::Lcp, PolicyKind::DefaultReplicated] {
        let s = run(&cfg(kind, 2)).unwrap().stats;
        assert!(s.provisioned_gpu_hours < res.provisioned_gpu_hours, "{kind}");
    }
}

#[test]
fn fixed_sr_limit_is_respected_at_placement() {
    let mut c = small(PolicyKind::DefaultReplicated);
    c.policy.sr_limit = SrLimitMode::Fixed { limit: 1.0 };
    let r = run(&c).unwrap();
    for e in r.scheduler_log.events() {
        if let SchedulerEvent::Placement { decision, .. } = e {
            assert_eq!(decision.sr_limit, 1.0);
        }
    }
    assert!(r.stats.completed_requests > 0);
}

#[test]
fn missing_trace_is_an_error() {
    let mut c = cfg(PolicyKind::Fcfs, 1);
    c.workload.trace = Some("does/not/exist.csv".into());
    c.workload.synthetic = None;
    assert!(matches!(run(&c), Err(PlatformError::Config(_))));
}

#[test]
fn outputs_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(&small(PolicyKind::Lcp)).unwrap();
    write_outputs(&r, dir.path()).unwrap();
    for f in [
        "gpu_timeline.csv",
        "billing.csv",
        "requests.csv",
        "events.csv",
        "stats.json",
        "datastore.json",
        "elections.ndjson",
        "hosts.ndjson",
        "scheduler.ndjson",
        "gpu_hours_saved.csv",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let rows = std::fs::read_to_string(dir.path().join("requests.csv")).unwrap().lines().count();
    assert_eq!(rows - 1, r.stats.completed_requests);
}

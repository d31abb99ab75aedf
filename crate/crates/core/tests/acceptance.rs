//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use nbsim_core::billing::{bill_interval, format_cents, BillingConfig, Dollars, ReplicaState};
use nbsim_core::cluster::{Cluster, ClusterConfig, ResourceRequest};
use nbsim_core::config::{default_sync, ExperimentConfig};
use nbsim_core::datastore::{DataStore, DatastoreConfig};
use nbsim_core::kernel::{
    ElectionId, GroupConfig, KernelCommand, KernelGroup, KernelReplica, Outcome, ReplicaAction, RequestRun,
};
use nbsim_core::platform::{run, write_outputs, RunResult};
use nbsim_core::policies::PolicyKind;
use nbsim_core::raft::{EntryPayload, NetConfig, RaftConfig, RaftNet};
use nbsim_core::scheduler::{autoscale, idle_hosts, AutoscalerConfig, ScalingKind};
use nbsim_core::sim::{LatencyDist, LinkModel, RngStream};
use nbsim_core::workload::{generate, GenParams, Percentiles};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() <= tol * want
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn shipped(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs_dir().join(format!("{name}.toml"))).unwrap()
}

fn shipped_configs() -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(configs_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    v.sort();
    v
}

fn c1_billing() -> Check {
    let cfg = BillingConfig::default();
    let hour = 3_600_000;
    let standby = bill_interval(ReplicaState::Standby, 8, hour, &cfg);
    let exec = bill_interval(ReplicaState::Executing { gpus: 4 }, 8, hour, &cfg);
    // 10 * 1.15 * 0.125 and 10 * 1.15 * 4/8.
    ensure(standby == Dollars::new(14375, 10_000), format!("standby {standby}"))?;
    ensure(exec == Dollars::new(575, 100), format!("execution {exec}"))?;
    ensure(format_cents(&standby) == "1.44", format_cents(&standby))?;
    ensure(format_cents(&exec) == "5.75", format_cents(&exec))?;
    Ok(format!("standby ${} (1.4375), 4/8 GPUs ${}", format_cents(&standby), format_cents(&exec)))
}

fn c2_subscription_ratio() -> Check {
    let mut c = Cluster::new(
        ClusterConfig {
            initial_hosts: 1,
            ..ClusterConfig::default()
        },
        RngStream::new(0, "acceptance/sr"),
    );
    let req = ResourceRequest {
        gpus: 4,
        ..ResourceRequest::default()
    };
    for k in 0..4 {
        c.subscribe(0, (k, 1), req).unwrap();
    }
    let sr = c.host(0).unwrap().subscription_ratio(3);
    ensure((sr - 16.0 / 24.0).abs() < 1e-12 && (sr - 0.667).abs() <= 0.001, format!("SR {sr}"))?;
    Ok(format!("SR {sr:.4}"))
}

fn lossy_group(drop: f64, max_delay: f64) -> GroupConfig {
    let mut link = LinkModel::reliable(5);
    link.jitter = LatencyDist::Uniform {
        lo_ms: 0.0,
        hi_ms: max_delay,
    };
    link.drop_probability = drop;
    GroupConfig {
        link: link.clone(),
        ls_link: link,
        tick_ms: 100,
        proposal_retry_ms: 1_000,
        ..GroupConfig::default()
    }
}

fn c3_executor_uniqueness() -> Check {
    let mut rng = RngStream::new(2024, "acceptance/elections");
    let (mut crashes, mut migrated) = (0, 0);
    for i in 0..10_000u64 {
        let drop = rng.unit() * 0.3;
        let delay = rng.unit() * 500.0;
        let mut g = KernelGroup::new(i, i, lossy_group(drop, delay)).map_err(|e| format!("election {i}: {e}"))?;
        let available: BTreeMap<_, _> = (1..=3).map(|r| (r, rng.bernoulli(0.5))).collect();
        let crash = rng.bernoulli(0.5).then(|| (rng.range_inclusive(1, 3), rng.range_inclusive(0, 4_000)));
        crashes += crash.is_some() as u32;
        let out = g
            .run_request(RequestRun {
                seq: 0,
                gpus: 1,
                duration_ms: 2_000,
                available,
                crash,
            })
            .map_err(|e| format!("election {i} did not terminate: {e}"))?;
        ensure(out.executed_by.is_some() && !out.error, format!("election {i}: {out:?}"))?;
        migrated += out.migrated as u32;
        let mut per_attempt: BTreeMap<ElectionId, usize> = BTreeMap::new();
        for (e, _) in g.starts() {
            *per_attempt.entry(*e).or_default() += 1;
        }
        ensure(per_attempt.values().all(|&n| n == 1), format!("election {i}: double executor {per_attempt:?}"))?;
        let aborted: BTreeSet<_> = g.aborted().iter().copied().collect();
        let live: Vec<_> = g.starts().iter().filter(|s| !aborted.contains(s)).collect();
        ensure(live.len() == 1, format!("election {i}: {} executions", live.len()))?;
        let counted = g.finished().iter().filter(|(e, r)| g.closed_by(*e) == Some(Some(*r))).count();
        ensure(counted == 1, format!("election {i}: {counted} counted completions"))?;
    }
    Ok(format!("10000 elections, {crashes} with a fail-stop, {migrated} migrated; no double executors"))
}

fn c4_raft_safety() -> Check {
    let mut committed = 0usize;
    for seed in 0..1_000u64 {
        let mut drv = RngStream::new(seed, "acceptance/raft");
        let drop = drv.unit() * 0.3;
        let delay = drv.unit() * 500.0;
        let crash_at = drv.bernoulli(0.5).then(|| drv.range_inclusive(1_000, 9_000) as usize);
        let mut link = LinkModel::reliable(1);
        link.jitter = LatencyDist::Uniform { lo_ms: 0.0, hi_ms: delay };
        link.drop_probability = drop;
        let mut net: RaftNet<u64> = RaftNet::new(seed, &[1, 2, 3], RaftConfig::default(), NetConfig { link, ..NetConfig::default() });
        let mut cmd = 0;
        for step in 0..10_000 {
            if drv.bernoulli(0.02) {
                let at = drv.range_inclusive(1, 3);
                if net.is_live(at) {
                    net.propose(at, cmd);
                    cmd += 1;
                }
            }
            if crash_at == Some(step) {
                if let Some(l) = net.leader() {
                    net.crash(l);
                }
            }
            net.step().map_err(|v| format!("seed {seed} step {step}: {v}"))?;
        }
        let ids = net.node_ids();
        for &a in &ids {
            for &b in &ids {
                let (x, y) = (net.applied(a), net.applied(b));
                let n = x.len().min(y.len());
                ensure(x[..n] == y[..n], format!("seed {seed}: nodes {a} and {b} applied different prefixes"))?;
            }
        }
        let cmds: Vec<u64> = net
            .monitor()
            .applied()
            .iter()
            .filter_map(|e| match e.payload {
                EntryPayload::Command(c) => Some(c),
                _ => None,
            })
            .collect();
        let distinct: BTreeSet<_> = cmds.iter().collect();
        ensure(distinct.len() == cmds.len(), format!("seed {seed}: a command was applied twice"))?;
        committed += cmds.len();
    }
    Ok(format!("1000 scenarios x 10000 steps, {committed} commands committed, no violation"))
}

fn c5_fig4_scenario() -> Check {
    let e = ElectionId::new(7, 0);
    let replay = |order: Vec<KernelCommand>| {
        let mut reps: Vec<KernelReplica> = (1..=3).map(|i| KernelReplica::new(i, 7)).collect();
        let mut log = order;
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
        reps
    };
    let reps = replay(vec![KernelCommand::lead(e, 2), KernelCommand::lead(e, 1), KernelCommand::lead(e, 3)]);
    for r in &reps {
        ensure(r.election(e).unwrap().outcome() == Outcome::Winner(2), "commit order did not elect replica 2")?;
    }
    let started: Vec<_> = reps.iter().filter(|r| r.started().contains(&e)).map(|r| r.id).collect();
    ensure(started == vec![2], format!("started on {started:?}"))?;

    let reps = replay(vec![KernelCommand::yield_(e, 1), KernelCommand::yield_(e, 2), KernelCommand::yield_(e, 3)]);
    ensure(
        reps.iter().all(|r| r.election(e).unwrap().outcome() == Outcome::FailedAllYield && r.started().is_empty()),
        "all-YIELD did not fail the election",
    )?;

    let mut g = KernelGroup::new(7, 11, GroupConfig::default()).map_err(|e| e.to_string())?;
    let out = g
        .run_request(RequestRun {
            seq: 0,
            gpus: 4,
            duration_ms: 1_000,
            available: BTreeMap::new(),
            crash: None,
        })
        .map_err(|e| e.to_string())?;
    ensure(out.failed_all_yield && out.migrated, "no migration after all-YIELD")?;
    let newcomer = out.executed_by.ok_or("resubmission not executed")?;
    ensure(newcomer > 3, format!("executed by original replica {newcomer}"))?;
    ensure(g.starts().len() == 1, format!("{} executions", g.starts().len()))?;
    ensure(g.finished() == [(e.next_attempt(), newcomer)], "resubmission not finished exactly once")?;
    Ok(format!("replica 2 elected; all-YIELD migrated; resubmission ran once on replica {newcomer}"))
}

fn c6_autoscaler() -> Check {
    let mut rng = RngStream::new(6, "acceptance/autoscaler");
    let g = 8u64;
    for case in 0..50 {
        let hosts = rng.range_inclusive(1, 30) as u32;
        let f = 1.0 + rng.unit() * 0.5;
        let mut c = Cluster::new(
            ClusterConfig {
                initial_hosts: hosts,
                ..ClusterConfig::default()
            },
            RngStream::new(case, "acceptance/autoscaler/cluster"),
        );
        for h in 0..hosts {
            let n = match rng.range_inclusive(0, 2) {
                0 => 0,
                _ => rng.range_inclusive(1, g) as u32,
            };
            if n > 0 {
                let req = ResourceRequest {
                    gpus: n,
                    ..ResourceRequest::default()
                };
                c.commit_gpus(h, (h as u64, 1), n, req).unwrap();
            }
        }
        let sum_c = c.committed_gpus();
        let sum_g = c.total_gpus();
        let idle = idle_hosts(&c);
        let cfg = AutoscalerConfig {
            f,
            ..AutoscalerConfig::default()
        };
        let got = autoscale(sum_c, sum_g, g as u32, hosts, &idle, &cfg);

        // Hand evaluation: target capacity f * sum_c, whole hosts.
        let target = f * sum_c as f64;
        let want_out = if (sum_g as f64) < target - 1e-9 {
            ((target - sum_g as f64) / g as f64 - 1e-9).ceil() as u32
        } else {
            0
        };
        match &got {
            ScalingKind::ScaleOut { hosts: n } => {
                ensure(*n == want_out, format!("case {case}: scale out {n}, expected {want_out}"))?;
                ensure(sum_g as f64 + (*n as u64 * g) as f64 >= target - 1e-9, "scale out short of target")?;
            }
            ScalingKind::ScaleIn { hosts: removed } => {
                ensure(want_out == 0, format!("case {case}: scaled in below f*C"))?;
                ensure(removed.len() <= 2, format!("case {case}: removed {}", removed.len()))?;
                let left = sum_g - removed.len() as u64 * g;
                ensure(left as f64 >= target - 1e-9, format!("case {case}: scale in below target"))?;
                for &h in removed {
                    ensure(c.host(h).unwrap().committed() == 0, format!("case {case}: removed busy host {h}"))?;
                }
            }
            ScalingKind::None => {
                ensure(want_out == 0, format!("case {case}: no scale out below target"))?;
                let could = sum_g >= g && (sum_g - g) as f64 >= target - 1e-9 && hosts > 1 && !idle.is_empty();
                ensure(!could, format!("case {case}: surplus idle host kept"))?;
            }
        }
    }
    Ok("50 randomized cases match f*C; scale-in <= 2 idle hosts".into())
}

struct Policies {
    res: RunResult,
    fcfs: RunResult,
    lcp: RunResult,
    def: RunResult,
    sr1: RunResult,
}

fn c7_gpu_hours(p: &Policies) -> Check {
    let h = |r: &RunResult| r.stats.provisioned_gpu_hours;
    let (f, l, d, r) = (h(&p.fcfs), h(&p.lcp), h(&p.def), h(&p.res));
    let saving = 1.0 - d / r;
    let trace = &p.def.stats;
    ensure(trace.sessions == 100, format!("{} sessions", trace.sessions))?;
    let msg = format!("FCFS {f:.1} < LCP {l:.1} < default {d:.1} < reservation {r:.1} GPU-h; saving {:.1}%", saving * 100.0);
    ensure(f < l && l < d && d < r, msg.clone())?;
    ensure(saving > 0.5, msg.clone())?;
    let work: Vec<f64> = [&p.fcfs, &p.lcp, &p.def, &p.res].iter().map(|x| x.stats.task_gpu_hours).collect();
    ensure(work.iter().all(|&w| w > 0.0), "no task work executed")?;
    Ok(msg)
}

fn c8_interactivity(p: &Policies) -> Check {
    let m = |r: &RunResult| r.stats.delays.interactivity_delay_ms.mean;
    let (r, d, l, f) = (m(&p.res), m(&p.def), m(&p.lcp), m(&p.fcfs));
    let msg = format!("mean delay reservation {r:.0} <= default {d:.0} < LCP {l:.0} < FCFS {f:.0} ms");
    ensure(r <= d && d < l && l < f, msg.clone())?;
    let max_sr = p.sr1.samples.iter().map(|s| s.sr).fold(0.0, f64::max);
    ensure(max_sr <= 1.0 + 1e-9, format!("cluster SR reached {max_sr}"))?;
    let imm = p.sr1.stats.delays.immediate_fraction;
    ensure(imm >= 0.8, format!("immediate fraction {imm:.3} at SR <= 1"))?;
    Ok(format!("{msg}; immediate {:.1}% at SR <= 1", imm * 100.0))
}

fn c9_sync_calibration(def: &RunResult) -> Check {
    let mut rng = RngStream::new(9, "acceptance/sync");
    let sync = default_sync();
    let p = Percentiles::of((0..10_000).map(|_| sync.sample(&mut rng)).collect());
    for (got, want, name) in [(p.p90, 54.79, "P90"), (p.p95, 66.69, "P95"), (p.p99, 268.25, "P99")] {
        ensure(within(got, want, 0.15), format!("sync {name} {got:.2} vs {want}"))?;
    }
    let mut store = DataStore::new(DatastoreConfig::default(), RngStream::new(9, "acceptance/datastore"));
    let reads = Percentiles::of((0..10_000).map(|_| store.sample_read() as f64).collect());
    let writes = Percentiles::of((0..10_000).map(|_| store.sample_write(1 << 20) as f64).collect());
    ensure(within(reads.p99, 3_950.0, 0.15), format!("read P99 {}", reads.p99))?;
    ensure(within(writes.p99, 7_070.0, 0.15), format!("write P99 {}", writes.p99))?;
    let s = &def.stats;
    ensure(s.large_syncs > 0, "no large-object replication in the trace")?;
    let frac = s.large_syncs_within_iat as f64 / s.large_syncs as f64;
    ensure(frac >= 0.99, format!("{}/{} large syncs within IAT", s.large_syncs_within_iat, s.large_syncs))?;
    Ok(format!(
        "sync P90/95/99 {:.1}/{:.1}/{:.1} ms; store P99 read {:.0} write {:.0} ms; {}/{} large syncs within IAT",
        p.p90, p.p95, p.p99, reads.p99, writes.p99, s.large_syncs_within_iat, s.large_syncs
    ))
}

fn c10_reclamation(def: &RunResult) -> Check {
    let mut curves = def.gpu_hours_saved.clone();
    ensure(curves.len() >= 2, "fewer than two reclamation intervals")?;
    curves.sort_by(|a, b| a.0.total_cmp(&b.0));
    for w in curves.windows(2) {
        let ((hs, short), (hl, long)) = (&w[0], &w[1]);
        ensure(short.len() == long.len(), "curves sampled differently")?;
        for (i, (a, b)) in short.iter().zip(long).enumerate() {
            ensure(a >= b, format!("sample {i}: {hs} h saves {a} < {hl} h saves {b}"))?;
        }
    }
    let finals: Vec<String> = curves.iter().map(|(h, c)| format!("{h}h={:.1}", c.last().unwrap())).collect();
    ensure(curves[0].1.last().unwrap() > &0.0, "shortest interval saves nothing")?;
    Ok(format!("curves ordered at every sample: {}", finals.join(" ")))
}

fn c11_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let read = |d: &Path| -> Vec<(String, Vec<u8>)> {
        let mut v: Vec<_> = std::fs::read_dir(d)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
            })
            .collect();
        v.sort();
        v
    };
    let configs = shipped_configs();
    for path in &configs {
        let cfg = ExperimentConfig::load(path).map_err(|e| e.to_string())?;
        let name = path.file_stem().unwrap().to_string_lossy();
        let (a, b) = (tmp.path().join(format!("{name}_a")), tmp.path().join(format!("{name}_b")));
        for d in [&a, &b] {
            let r = run(&cfg).map_err(|e| format!("{name}: {e}"))?;
            write_outputs(&r, d).map_err(|e| e.to_string())?;
        }
        let (x, y) = (read(&a), read(&b));
        ensure(x.len() >= 10, format!("{name}: {} files", x.len()))?;
        for ((fa, ca), (_, cb)) in x.iter().zip(&y) {
            ensure(ca == cb, format!("{name}: {fa} differs"))?;
        }
    }
    Ok(format!("{} shipped configs byte-identical across two runs", configs.len()))
}

fn c12_generator() -> Check {
    let params = GenParams {
        sessions: 1_100,
        ..GenParams::default()
    };
    let sessions = generate(&params, 12).map_err(|e| e.to_string())?;
    let mut durations = Vec::new();
    let mut iats = Vec::new();
    for s in &sessions {
        for (i, e) in s.events.iter().enumerate() {
            durations.push(e.duration_ms as f64 / 1000.0);
            if i > 0 {
                iats.push((e.submit_ms - s.events[i - 1].submit_ms) as f64 / 1000.0);
            }
        }
    }
    ensure(durations.len() >= 10_000, format!("only {} events", durations.len()))?;
    durations.truncate(10_000);
    let d = Percentiles::of(durations);
    let i = Percentiles::of(iats);
    for (got, want, name) in [
        (d.p50, 120.0, "duration P50"),
        (d.p75, 300.0, "duration P75"),
        (d.p90, 1020.0, "duration P90"),
        (d.p95, 2160.0, "duration P95"),
        (d.p99, 10920.0, "duration P99"),
        (i.p50, 300.0, "IAT P50"),
        (i.p75, 480.0, "IAT P75"),
    ] {
        ensure(within(got, want, 0.10), format!("{name} {got:.1} vs {want}"))?;
    }
    ensure(i.min >= 240.0 && within(i.min, 240.0, 0.10), format!("IAT floor {}", i.min))?;
    Ok(format!(
        "duration {:.0}/{:.0}/{:.0}/{:.0}/{:.0} s, IAT {:.0}/{:.0} s, min IAT {:.1} s",
        d.p50, d.p75, d.p90, d.p95, d.p99, i.p50, i.p75, i.min
    ))
}

fn run_policies() -> Result<Policies, String> {
    let go = |name: &str, kind: PolicyKind| {
        let r = run(&shipped(name)).map_err(|e| format!("{name}: {e}"))?;
        ensure(r.stats.policy == kind, format!("{name} ran {}", r.stats.policy))?;
        Ok::<_, String>(r)
    };
    Ok(Policies {
        res: go("reservation", PolicyKind::Reservation)?,
        fcfs: go("fcfs", PolicyKind::Fcfs)?,
        lcp: go("lcp", PolicyKind::Lcp)?,
        def: go("default_replicated", PolicyKind::DefaultReplicated)?,
        sr1: go("default_sr1", PolicyKind::DefaultReplicated)?,
    })
}

fn main() -> ExitCode {
    // Test runners probe with --list; there is a single suite.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let policies: OnceLock<Result<Policies, String>> = OnceLock::new();
    let load_policies = || policies.get_or_init(run_policies).as_ref().map_err(String::clone);

    let mut results: Vec<(&str, Check, f64)> = Vec::new();
    let mut go = |name: &'static str, f: &mut dyn FnMut() -> Check| {
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match &r {
            Ok(m) => ("PASS", m.as_str()),
            Err(m) => ("FAIL", m.as_str()),
        };
        println!("{tag} {name} ({secs:.1}s): {detail}");
        results.push((name, r, secs));
    };

    go("1 billing worked examples", &mut c1_billing);
    go("2 subscription ratio worked example", &mut c2_subscription_ratio);
    go("3 executor uniqueness", &mut c3_executor_uniqueness);
    go("4 raft safety fuzz", &mut c4_raft_safety);
    go("5 commit-order and migration scenario", &mut c5_fig4_scenario);
    go("6 autoscaler", &mut c6_autoscaler);
    go("7 provisioned GPU-hours ordering", &mut || c7_gpu_hours(load_policies()?));
    go("8 interactivity ordering", &mut || c8_interactivity(load_policies()?));
    go("9 synchronization calibration", &mut || c9_sync_calibration(&load_policies()?.def));
    go("10 GPU-hours-saved ordering", &mut || c10_reclamation(&load_policies()?.def));
    go("11 determinism", &mut c11_determinism);
    go("12 generator fidelity", &mut c12_generator);

    let failed = results.iter().filter(|r| r.1.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! End-to-end simulation of one experiment: trace replay, the chosen
//! scheduling policy, autoscaling, billing and metric sampling.

mod output;
mod replicated;
mod tasks;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::Write;

use serde::Serialize;

pub use output::write_outputs;

use crate::billing::{bill_interval, provider_cost, Dollars, Ledger, ReplicaState};
use crate::cluster::{Cluster, ClusterError, HostId, HostSnapshot, OwnerKey, ResourceRequest};
use crate::config::{ConfigError, ExperimentConfig};
use crate::datastore::{DataStore, DatastoreError, DatastoreStats};
use crate::kernel::{ElectionAudit, ElectionId, GroupError, KernelGroup, ReplicaId};
use crate::metrics::{summarize, DelaySummary, EventRow, MetricSample, RequestTimeline};
use crate::policies::{gpu_hours_saved, idle_reclamations, PolicyKind};
use crate::scheduler::{
    autoscale, idle_hosts, AutoscalerConfig, EventLog, MigrationConfig, ScalingAction, ScalingKind,
    ScalingTrigger, SchedulerEvent,
};
use crate::sim::{ComponentId, LatencyDist, Millis, RngStream, SimEvent, Simulation, TraceEvent};
use crate::workload::{Percentiles, Session};

#[derive(Debug, thiserror::Error)]
pub enum PlatformError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Datastore(#[from] DatastoreError),
    #[error("invariant violated at t={time_ms} ms: {msg}")]
    Invariant { time_ms: Millis, msg: String },
    #[error("writing results: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Ev {
    SessionStart(usize),
    Submit(usize, usize),
    KernelReady(usize),
    ExecEnd(usize, usize),
    SessionEnd(usize),
    HostReady(HostId),
    PrewarmReady(HostId),
    MigrationRetry(usize, usize),
    AutoscaleTick,
    Sample,
}

impl TraceEvent for Ev {
    fn kind(&self) -> &'static str {
        match self {
            Ev::SessionStart(_) => "session_start",
            Ev::Submit(..) => "submit",
            Ev::KernelReady(_) => "kernel_ready",
            Ev::ExecEnd(..) => "exec_end",
            Ev::SessionEnd(_) => "session_end",
            Ev::HostReady(_) => "host_ready",
            Ev::PrewarmReady(_) => "prewarm_ready",
            Ev::MigrationRetry(..) => "migration_retry",
            Ev::AutoscaleTick => "autoscale_tick",
            Ev::Sample => "sample",
        }
    }

    fn detail(&self) -> String {
        match self {
            Ev::SessionStart(s) | Ev::KernelReady(s) | Ev::SessionEnd(s) => format!("session={s}"),
            Ev::Submit(s, e) | Ev::ExecEnd(s, e) | Ev::MigrationRetry(s, e) => format!("session={s} event={e}"),
            Ev::HostReady(h) | Ev::PrewarmReady(h) => format!("host={h}"),
            Ev::AutoscaleTick | Ev::Sample => String::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SlotState {
    Pending,
    /// Waiting for hosts before it can be placed.
    Deferred,
    Provisioning,
    Ready,
    Ended,
}

#[derive(Debug, Clone, Copy)]
struct ReplicaSlot {
    host: HostId,
}

/// Per-session kernel state.
struct Slot {
    state: SlotState,
    group: Option<KernelGroup>,
    replicas: BTreeMap<ReplicaId, ReplicaSlot>,
    /// Reservation container host and grant.
    host: Option<HostId>,
    grant: Option<u64>,
    queue: VecDeque<(usize, Millis)>,
    busy: bool,
    closing: bool,
    deferred_logged: bool,
}

impl Slot {
    fn new() -> Self {
        Self {
            state: SlotState::Pending,
            group: None,
            replicas: BTreeMap::new(),
            host: None,
            grant: None,
            queue: VecDeque::new(),
            busy: false,
            closing: false,
            deferred_logged: false,
        }
    }
}

/// A request between routing and its reply.
#[derive(Debug, Clone)]
struct Inflight {
    submit_ms: Millis,
    d: [Millis; 9],
    /// Time the first election failed.
    failed_at: Millis,
    election: Option<ElectionId>,
    executor: Option<ReplicaId>,
    host: Option<HostId>,
    grant: Option<u64>,
    migrated: bool,
    waited: bool,
    attempts: u32,
    post_critical: bool,
}

/// Summary written to stats.json.
#[derive(Debug, Clone, Serialize)]
pub struct RunStats {
    pub policy: PolicyKind,
    pub seed: u64,
    pub sessions: usize,
    pub trace_events: usize,
    pub completed_requests: usize,
    pub error_requests: usize,
    pub incomplete_requests: usize,
    pub provisioned_gpu_hours: f64,
    pub committed_gpu_hours: f64,
    pub oracle_gpu_hours: f64,
    /// GPU-hours of user work actually executed.
    pub task_gpu_hours: f64,
    pub peak_hosts: usize,
    pub scale_out_hosts: u32,
    pub scale_in_hosts: u32,
    pub migrations: usize,
    pub aborted_migrations: usize,
    pub elections: usize,
    pub bypassed_elections: usize,
    pub failed_all_yield: usize,
    pub delays: DelaySummary,
    pub large_syncs: usize,
    pub large_syncs_within_iat: usize,
    pub sync_ms: Percentiles,
    pub provider_cost: String,
    pub revenue: String,
    pub profit_margin: Option<f64>,
    pub reclamation: Vec<ReclamationSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReclamationSummary {
    pub interval_h: f64,
    pub reclamations: usize,
    pub replayed: usize,
    pub gpu_hours_saved: f64,
}

/// Everything one run produces.
pub struct RunResult {
    pub stats: RunStats,
    pub samples: Vec<MetricSample>,
    pub requests: Vec<RequestTimeline>,
    pub scheduler_log: EventLog,
    pub audits: Vec<ElectionAudit>,
    pub host_snapshots: Vec<HostSnapshot>,
    pub datastore: DatastoreStats,
    pub events: Vec<EventRow>,
    /// (interval hours, cumulative GPU-hours saved at each sample time).
    pub gpu_hours_saved: Vec<(f64, Vec<f64>)>,
    pub ledger: Ledger,
}

pub struct Platform {
    cfg: ExperimentConfig,
    kind: PolicyKind,
    sessions: Vec<Session>,
    sim: Simulation<Ev>,
    comp: ComponentId,
    cluster: Cluster,
    store: DataStore,
    rng: RngStream,
    horizon: Millis,
    autoscaler: AutoscalerConfig,
    migration: MigrationConfig,
    prewarm_min: u32,

    slots: Vec<Slot>,
    /// Sessions waiting for capacity (reservation) or tasks waiting for a
    /// host (per-task policies), in arrival order.
    fifo: VecDeque<(usize, usize, Millis)>,
    deferred: VecDeque<usize>,
    inflight: BTreeMap<(usize, usize), Inflight>,
    executed: BTreeSet<(usize, usize)>,

    ledger: Ledger,
    last_accrual: Millis,
    gpu_ms_provisioned: u128,
    gpu_ms_committed: u128,
    standby_replicas: u64,
    exec_gpus: u64,
    reserved_gpus: u64,
    active_sessions: u64,
    active_trainings: u64,

    samples: Vec<MetricSample>,
    requests: Vec<RequestTimeline>,
    log: EventLog,
    audits: Vec<ElectionAudit>,
    snapshots: Vec<HostSnapshot>,
    error_requests: usize,
    migrations: usize,
    aborted_migrations: usize,
    large_syncs: usize,
    large_syncs_within_iat: usize,
    sync_samples: Vec<f64>,
    task_gpu_ms: u128,
    peak_hosts: usize,
    scale_out_hosts: u32,
    scale_in_hosts: u32,
}

/// Run an experiment to its horizon.
pub fn run(cfg: &ExperimentConfig) -> Result<RunResult, PlatformError> {
    run_traced(cfg, None)
}

/// Like [`run`], writing every fired event to `trace`.
pub fn run_traced(cfg: &ExperimentConfig, trace: Option<Box<dyn Write>>) -> Result<RunResult, PlatformError> {
    cfg.validate()?;
    let sessions = cfg.sessions()?;
    let mut p = Platform::new(cfg.clone(), sessions);
    if let Some(t) = trace {
        p.sim.enable_trace(t);
    }
    p.run()
}

impl Platform {
    pub fn new(cfg: ExperimentConfig, sessions: Vec<Session>) -> Self {
        let cluster_cfg = cfg.effective_cluster();
        let prewarm_min = cluster_cfg.prewarm_per_host;
        let mut sim = Simulation::new();
        let comp = sim.register("platform");
        let seed = cfg.seed;
        Self {
            kind: cfg.policy.kind,
            cluster: Cluster::new(cluster_cfg, RngStream::new(seed, "cluster")),
            store: DataStore::new(cfg.datastore.clone(), RngStream::new(seed, "datastore")),
            rng: RngStream::new(seed, "platform/latency"),
            horizon: cfg.horizon_ms(),
            autoscaler: {
                // A replicated kernel needs as many hosts as it has replicas.
                let mut a = cfg.autoscaler();
                a.min_hosts = a.min_hosts.max(cfg.policy.replicas());
                a
            },
            migration: cfg.migration(),
            prewarm_min,
            slots: sessions.iter().map(|_| Slot::new()).collect(),
            sessions,
            sim,
            comp,
            fifo: VecDeque::new(),
            deferred: VecDeque::new(),
            inflight: BTreeMap::new(),
            executed: BTreeSet::new(),
            ledger: Ledger::default(),
            last_accrual: 0,
            gpu_ms_provisioned: 0,
            gpu_ms_committed: 0,
            standby_replicas: 0,
            exec_gpus: 0,
            reserved_gpus: 0,
            active_sessions: 0,
            active_trainings: 0,
            samples: Vec::new(),
            requests: Vec::new(),
            log: EventLog::default(),
            audits: Vec::new(),
            snapshots: Vec::new(),
            error_requests: 0,
            migrations: 0,
            aborted_migrations: 0,
            large_syncs: 0,
            large_syncs_within_iat: 0,
            sync_samples: Vec::new(),
            task_gpu_ms: 0,
            peak_hosts: 0,
            scale_out_hosts: 0,
            scale_in_hosts: 0,
            cfg,
        }
    }

    fn at(&mut self, t: Millis, ev: Ev) {
        self.sim.schedule(t, self.comp, ev).expect("events are never scheduled in the past");
    }

    fn sample(&mut self, d: &LatencyDist) -> Millis {
        d.sample_ms(&mut self.rng)
    }

    fn hop(&mut self) -> Millis {
        let d = self.cfg.latency.gs_ls_hop.clone();
        self.sample(&d)
    }

    fn invariant(&self, msg: impl Into<String>) -> PlatformError {
        PlatformError::Invariant {
            time_ms: self.sim.now(),
            msg: msg.into(),
        }
    }

    pub fn run(mut self) -> Result<RunResult, PlatformError> {
        for (i, s) in self.sessions.iter().enumerate() {
            if s.start_ms > self.horizon {
                continue;
            }
            self.sim.schedule(s.start_ms, self.comp, Ev::SessionStart(i)).unwrap();
            for (j, e) in s.events.iter().enumerate() {
                if e.submit_ms <= self.horizon {
                    self.sim.schedule(e.submit_ms, self.comp, Ev::Submit(i, j)).unwrap();
                }
            }
            self.sim
                .schedule(s.end_ms.min(self.horizon), self.comp, Ev::SessionEnd(i))
                .unwrap();
        }
        self.at(0, Ev::Sample);
        if self.autoscaler.enabled {
            let iv = self.autoscaler.interval_ms;
            self.at(iv, Ev::AutoscaleTick);
        }
        self.refill_prewarm(0);

        while let Some(SimEvent { fire_time, payload, .. }) = self.sim.pop_until(self.horizon) {
            self.accrue(fire_time);
            self.handle(fire_time, payload)?;
            self.peak_hosts = self.peak_hosts.max(self.cluster.host_count());
        }
        self.accrue(self.horizon);
        self.sim.flush_trace();
        self.finish()
    }

    fn handle(&mut self, t: Millis, ev: Ev) -> Result<(), PlatformError> {
        match ev {
            Ev::SessionStart(s) => {
                self.active_sessions += 1;
                match self.kind {
                    PolicyKind::DefaultReplicated => self.start_kernel(s, t)?,
                    PolicyKind::Reservation => self.start_reservation(s, t)?,
                    PolicyKind::Fcfs | PolicyKind::Lcp => self.slots[s].state = SlotState::Ready,
                }
            }
            Ev::Submit(s, e) => match self.kind {
                PolicyKind::Fcfs | PolicyKind::Lcp => {
                    self.fifo.push_back((s, e, t));
                    self.dispatch_tasks(t)?;
                }
                _ => {
                    let slot = &mut self.slots[s];
                    if slot.state == SlotState::Ready && !slot.busy {
                        self.dispatch(s, e, t, t, false)?;
                    } else {
                        slot.queue.push_back((e, t));
                    }
                }
            },
            Ev::KernelReady(s) => {
                if self.slots[s].state != SlotState::Provisioning {
                    return Ok(());
                }
                self.slots[s].state = SlotState::Ready;
                if self.kind == PolicyKind::DefaultReplicated {
                    self.standby_replicas += self.slots[s].replicas.len() as u64;
                }
                self.next_queued(s, t)?;
            }
            Ev::ExecEnd(s, e) => {
                match self.kind {
                    PolicyKind::DefaultReplicated => self.finish_replicated(s, e, t)?,
                    PolicyKind::Reservation => self.finish_reserved(s, e, t)?,
                    PolicyKind::Fcfs | PolicyKind::Lcp => {
                        self.finish_task(s, e, t)?;
                        self.dispatch_tasks(t)?;
                    }
                }
                if self.kind != PolicyKind::Fcfs && self.kind != PolicyKind::Lcp {
                    self.slots[s].busy = false;
                    self.next_queued(s, t)?;
                }
            }
            Ev::SessionEnd(s) => {
                self.active_sessions -= 1;
                let slot = &mut self.slots[s];
                if slot.busy {
                    slot.closing = true;
                } else {
                    self.teardown(s)?;
                }
            }
            Ev::HostReady(h) => {
                self.cluster.mark_ready(h)?;
                self.log.push(SchedulerEvent::HostReady { time_ms: t, host_id: h });
                self.refill_prewarm(t);
                match self.kind {
                    PolicyKind::DefaultReplicated => self.retry_deferred(t)?,
                    PolicyKind::Reservation => self.retry_reservations(t)?,
                    PolicyKind::Fcfs | PolicyKind::Lcp => self.dispatch_tasks(t)?,
                }
            }
            Ev::PrewarmReady(h) => self.cluster.prewarm_ready(h),
            Ev::MigrationRetry(s, e) => self.migrate(s, e, t)?,
            Ev::AutoscaleTick => {
                self.autoscale_tick(t)?;
                let next = t + self.autoscaler.interval_ms;
                if next <= self.horizon {
                    self.at(next, Ev::AutoscaleTick);
                }
            }
            Ev::Sample => {
                self.take_sample(t)?;
                let next = t + self.cfg.sample_interval_ms();
                if next <= self.horizon {
                    self.at(next, Ev::Sample);
                }
            }
        }
        Ok(())
    }

    /// Start the next queued request of session `s`, or tear the kernel
    /// down if the session already ended.
    fn next_queued(&mut self, s: usize, t: Millis) -> Result<(), PlatformError> {
        let slot = &mut self.slots[s];
        if slot.busy || slot.state != SlotState::Ready {
            return Ok(());
        }
        if let Some((e, submit)) = slot.queue.pop_front() {
            return self.dispatch(s, e, submit, t, true);
        }
        if slot.closing {
            self.teardown(s)?;
        }
        Ok(())
    }

    fn dispatch(&mut self, s: usize, e: usize, submit: Millis, t: Millis, queued: bool) -> Result<(), PlatformError> {
        if !self.executed.insert((s, e)) {
            return Err(self.invariant(format!("session {s} event {e} dispatched twice")));
        }
        self.slots[s].busy = true;
        match self.kind {
            PolicyKind::DefaultReplicated => self.route(s, e, submit, t, queued),
            PolicyKind::Reservation => self.run_reserved(s, e, submit, t, queued),
            _ => unreachable!("per-task policies dispatch from the global queue"),
        }
    }

    fn teardown(&mut self, s: usize) -> Result<(), PlatformError> {
        match self.kind {
            PolicyKind::DefaultReplicated => self.teardown_kernel(s),
            PolicyKind::Reservation => self.teardown_reservation(s),
            _ => {
                self.slots[s].state = SlotState::Ended;
                Ok(())
            }
        }
    }

    // ------------------------------------------------------------------
    // Capacity
    // ------------------------------------------------------------------

    fn commit(&mut self, host: HostId, owner: OwnerKey, req: ResourceRequest) -> Result<Option<u64>, PlatformError> {
        if req.gpus == 0 {
            return Ok(None);
        }
        Ok(Some(self.cluster.commit_gpus(host, owner, req.gpus, req)?.id))
    }

    fn release(&mut self, grant: Option<u64>) -> Result<(), PlatformError> {
        if let Some(g) = grant {
            self.cluster.release_gpus(g)?;
        }
        Ok(())
    }

    fn booting_hosts(&self) -> usize {
        self.cluster.hosts().filter(|h| !h.is_ready()).count()
    }

    /// Scale out for a request that found no room, counting hosts already
    /// booting.
    fn request_hosts(&mut self, n: usize, t: Millis) -> Result<(), PlatformError> {
        let k = n.saturating_sub(self.booting_hosts());
        if k > 0 {
            self.add_hosts(k as u32, ScalingTrigger::FailedPlacement, t)?;
        }
        Ok(())
    }

    fn add_hosts(&mut self, n: u32, trigger: ScalingTrigger, t: Millis) -> Result<(), PlatformError> {
        let mut added = 0;
        for _ in 0..n {
            match self.cluster.add_host(t) {
                Ok((id, ready_at)) => {
                    self.at(ready_at, Ev::HostReady(id));
                    added += 1;
                }
                Err(ClusterError::HostLimit) => break,
                Err(e) => return Err(e.into()),
            }
        }
        if added > 0 {
            self.scale_out_hosts += added;
            self.log_scaling(ScalingKind::ScaleOut { hosts: added }, trigger, t);
        }
        Ok(())
    }

    fn log_scaling(&mut self, kind: ScalingKind, trigger: ScalingTrigger, t: Millis) {
        self.log.push(SchedulerEvent::Scaling {
            action: ScalingAction {
                kind,
                trigger,
                time_ms: t,
            },
            cluster_sr: self.cluster.cluster_sr().unwrap_or(0.0),
        });
    }

    fn refill_prewarm(&mut self, t: Millis) {
        if self.prewarm_min == 0 {
            return;
        }
        for (h, n) in self.cluster.maintain_prewarm_pool(self.prewarm_min) {
            for _ in 0..n {
                let ms = self.cluster.sample_cold_start();
                self.at(t + ms, Ev::PrewarmReady(h));
            }
        }
    }

    fn autoscale_tick(&mut self, t: Millis) -> Result<(), PlatformError> {
        // Hosts needed by queued work are not released.
        let waiting = !self.deferred.is_empty() || !self.fifo.is_empty();
        let idle = if waiting { Vec::new() } else { idle_hosts(&self.cluster) };
        let action = autoscale(
            self.cluster.committed_gpus(),
            self.cluster.total_gpus(),
            self.cluster.config().gpus_per_host,
            self.cluster.host_count() as u32,
            &idle,
            &self.autoscaler,
        );
        match action {
            ScalingKind::ScaleOut { hosts } => self.add_hosts(hosts, ScalingTrigger::Autoscaler, t)?,
            ScalingKind::ScaleIn { hosts } => {
                for &h in &hosts {
                    self.cluster.remove_host(h)?;
                }
                self.scale_in_hosts += hosts.len() as u32;
                self.log_scaling(ScalingKind::ScaleIn { hosts }, ScalingTrigger::Autoscaler, t);
            }
            ScalingKind::None => {}
        }
        self.refill_prewarm(t);
        Ok(())
    }

    // ------------------------------------------------------------------
    // Accounting
    // ------------------------------------------------------------------

    fn accrue(&mut self, t: Millis) {
        if t <= self.last_accrual {
            return;
        }
        let dt = t - self.last_accrual;
        self.last_accrual = t;
        let g = self.cluster.config().gpus_per_host;
        let b = &self.cfg.billing;
        self.ledger.cost += provider_cost(self.cluster.host_count() as u64, b.host_rate, dt);
        let mut rev = Dollars::from_integer(0);
        if self.standby_replicas > 0 {
            rev += bill_interval(ReplicaState::Standby, g, dt, b) * Dollars::from_integer(self.standby_replicas as i128);
        }
        if self.exec_gpus > 0 {
            rev += bill_interval(ReplicaState::Executing { gpus: self.exec_gpus as u32 }, g, dt, b);
        }
        if self.reserved_gpus > 0 {
            rev += bill_interval(ReplicaState::Reserved { gpus: self.reserved_gpus as u32 }, g, dt, b);
        }
        self.ledger.revenue += rev;
        self.gpu_ms_provisioned += self.cluster.total_gpus() as u128 * dt as u128;
        self.gpu_ms_committed += self.cluster.committed_gpus() as u128 * dt as u128;
    }

    fn oracle_demand(&self, t: Millis) -> u64 {
        self.sessions
            .iter()
            .flat_map(|s| s.events.iter())
            .filter(|e| e.submit_ms <= t && t < e.end_ms())
            .map(|e| e.gpus as u64)
            .sum()
    }

    fn take_sample(&mut self, t: Millis) -> Result<(), PlatformError> {
        self.cluster.check_invariants().map_err(|m| self.invariant(m))?;
        let provisioned = self.cluster.total_gpus();
        let committed = self.cluster.committed_gpus();
        if committed > provisioned {
            return Err(self.invariant("committed GPUs exceed provisioned GPUs"));
        }
        if let Some(prev) = self.samples.last() {
            if self.ledger.cost < prev.provider_cost_cum || self.ledger.revenue < prev.revenue_cum {
                return Err(self.invariant("cumulative billing decreased"));
            }
        }
        let n = self.samples.len() as u32;
        if n.is_multiple_of(self.cfg.sim.host_snapshot_every) {
            self.snapshots.extend(self.cluster.snapshot(t));
        }
        self.samples.push(MetricSample {
            time_ms: t,
            provisioned_gpus: provisioned,
            committed_gpus: committed,
            oracle_demand: self.oracle_demand(t),
            active_sessions: self.active_sessions,
            active_trainings: self.active_trainings,
            sr: self.cluster.cluster_sr().unwrap_or(0.0),
            provider_cost_cum: self.ledger.cost,
            revenue_cum: self.ledger.revenue,
        });
        Ok(())
    }

    /// Record a finished request.
    fn record(&mut self, s: usize, e: usize, inf: Inflight, reply_hop: Millis, election_id: String) {
        let mut r = RequestTimeline::from_durations(
            election_id,
            self.sessions[s].session_id,
            e,
            self.kind,
            inf.submit_ms,
            inf.d,
            inf.post_critical,
            reply_hop,
        );
        r.migrated = inf.migrated;
        r.waited_for_resources = inf.waited;
        let ev = &self.sessions[s].events[e];
        self.task_gpu_ms += ev.duration_ms as u128 * ev.gpus as u128;
        self.requests.push(r);
    }

    fn record_error(&mut self) {
        self.error_requests += 1;
    }

    fn finish(mut self) -> Result<RunResult, PlatformError> {
        for s in 0..self.slots.len() {
            if let Some(g) = self.slots[s].group.take() {
                self.collect_audits(&g)?;
            }
        }
        let incomplete = self.inflight.len()
            + self.slots.iter().map(|s| s.queue.len()).sum::<usize>()
            + self.fifo.iter().filter(|f| f.1 != usize::MAX).count();
        let trace_events: usize = self.sessions.iter().map(|s| s.events.len()).sum();
        self.requests
            .sort_by_key(|r| (r.submit_ms, r.session_id, r.event_index));

        let times: Vec<Millis> = self.samples.iter().map(|s| s.time_ms).collect();
        let mut saved = Vec::new();
        let mut reclamation = Vec::new();
        for &h in &self.cfg.policy.reclamation_intervals_h {
            let ms = (h * 3.6e6).round() as Millis;
            let recs = idle_reclamations(&self.sessions, ms);
            let curve = gpu_hours_saved(&recs, &times);
            for r in &recs {
                self.log.push(SchedulerEvent::Reclamation {
                    time_ms: r.reclaimed_at_ms,
                    session_id: r.session_id,
                    lost_gpu_seconds: r.lost_state_gpu_seconds,
                });
            }
            reclamation.push(ReclamationSummary {
                interval_h: h,
                reclamations: recs.len(),
                replayed: recs.iter().filter(|r| r.replayed).count(),
                gpu_hours_saved: curve.last().copied().unwrap_or(0.0),
            });
            saved.push((h, curve));
        }

        let oracle_ms: u128 = self
            .sessions
            .iter()
            .flat_map(|s| s.events.iter())
            .map(|e| (e.end_ms().min(self.horizon).saturating_sub(e.submit_ms.min(self.horizon))) as u128 * e.gpus as u128)
            .sum();
        let hours = |ms: u128| ms as f64 / 3.6e6;
        let events = output::event_rows(self.log.events());
        let stats = RunStats {
            policy: self.kind,
            seed: self.cfg.seed,
            sessions: self.sessions.len(),
            trace_events,
            completed_requests: self.requests.len(),
            error_requests: self.error_requests,
            incomplete_requests: incomplete,
            provisioned_gpu_hours: hours(self.gpu_ms_provisioned),
            committed_gpu_hours: hours(self.gpu_ms_committed),
            oracle_gpu_hours: hours(oracle_ms),
            task_gpu_hours: hours(self.task_gpu_ms),
            peak_hosts: self.peak_hosts,
            scale_out_hosts: self.scale_out_hosts,
            scale_in_hosts: self.scale_in_hosts,
            migrations: self.migrations,
            aborted_migrations: self.aborted_migrations,
            elections: self.audits.len(),
            bypassed_elections: self.audits.iter().filter(|a| a.bypassed).count(),
            failed_all_yield: self.audits.iter().filter(|a| a.failed_all_yield).count(),
            delays: summarize(&self.requests),
            large_syncs: self.large_syncs,
            large_syncs_within_iat: self.large_syncs_within_iat,
            sync_ms: Percentiles::of(std::mem::take(&mut self.sync_samples)),
            provider_cost: crate::billing::format_cents(&self.ledger.cost),
            revenue: crate::billing::format_cents(&self.ledger.revenue),
            profit_margin: self.ledger.margin(),
            reclamation,
        };
        Ok(RunResult {
            stats,
            samples: self.samples,
            requests: self.requests,
            scheduler_log: self.log,
            audits: self.audits,
            host_snapshots: self.snapshots,
            datastore: self.store.stats().clone(),
            events,
            gpu_hours_saved: saved,
            ledger: self.ledger,
        })
    }

    /// Move a group's audit records to the run output after checking that
    /// no election started two executors.
    fn collect_audits(&mut self, g: &KernelGroup) -> Result<(), PlatformError> {
        let aborted: BTreeSet<_> = g.aborted().iter().copied().collect();
        let mut by_seq: BTreeMap<u64, BTreeSet<ReplicaId>> = BTreeMap::new();
        for &(e, r) in g.starts() {
            if !aborted.contains(&(e, r)) {
                by_seq.entry(e.seq).or_default().insert(r);
            }
        }
        if let Some((seq, rs)) = by_seq.iter().find(|(_, rs)| rs.len() > 1) {
            return Err(self.invariant(format!("kernel {} request {seq} executed by {rs:?}", g.kernel())));
        }
        self.audits.extend(g.audits().cloned());
        Ok(())
    }
}

#[cfg(test)]
mod tests;

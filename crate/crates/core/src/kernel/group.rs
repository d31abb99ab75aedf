//! A distributed kernel's three replicas and their Raft group, driven on a
//! local clock.
//!
//! The local clock only advances while protocol work is in flight; idle time
//! between requests is skipped. Callers convert the returned local offsets
//! into their own timeline.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::election::Outcome;
use super::replica::{KernelReplica, ReplicaAction};
use super::{Designation, ElectionId, ExecuteRequest, KernelCommand, KernelId, ProposalKind, ReplicaId, REPLICAS};
use crate::raft::{EntryPayload, MembershipStatus, NetConfig, RaftConfig, RaftNet, SafetyViolation};
use crate::sim::{LinkModel, Millis, RngStream};

/// Attempts per request before the scheduler gives up with an error reply.
pub const MAX_ATTEMPTS: u32 = 5;

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GroupConfig {
    pub raft: RaftConfig,
    /// Replica-to-replica link.
    pub link: LinkModel,
    /// Local scheduler to replica link; requests are retransmitted until
    /// acknowledged.
    pub ls_link: LinkModel,
    pub ls_retry_ms: Millis,
    pub tick_ms: Millis,
    pub proposal_retry_ms: Millis,
    pub heartbeat_timeout_ms: Millis,
    pub param_load_ms: Millis,
    pub copy_ms: Millis,
    /// Give up on any single protocol step after this much local time.
    pub step_limit_ms: Millis,
}

impl Default for GroupConfig {
    fn default() -> Self {
        Self {
            raft: RaftConfig::default(),
            link: LinkModel::reliable(1),
            ls_link: LinkModel::reliable(1),
            ls_retry_ms: 50,
            tick_ms: 10,
            proposal_retry_ms: 200,
            heartbeat_timeout_ms: 5_000,
            param_load_ms: 200,
            copy_ms: 200,
            step_limit_ms: 120_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GroupError {
    #[error("kernel {kernel}: {what} did not finish within {limit_ms} ms")]
    Timeout {
        kernel: KernelId,
        what: &'static str,
        limit_ms: Millis,
    },
    #[error("kernel {kernel}: fewer than two live replicas")]
    QuorumLost { kernel: KernelId },
    #[error("kernel {0}: raft safety violated: {1}")]
    Safety(KernelId, SafetyViolation),
    #[error("kernel {kernel}: request {seq} aborted after {attempts} attempts")]
    Aborted { kernel: KernelId, seq: u64, attempts: u32 },
}

/// Local offsets (ms since submit) for the protocol steps of one election.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StepStamps {
    pub delivered: Option<Millis>,
    pub first_commit: Option<Millis>,
    pub resolved: Option<Millis>,
    pub exec_start: Option<Millis>,
    pub exec_end: Option<Millis>,
    pub complete_committed: Option<Millis>,
    pub sync_done: Option<Millis>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditProposal {
    pub replica: ReplicaId,
    pub kind: ProposalKind,
}

/// Per-election audit record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ElectionAudit {
    pub election_id: String,
    pub proposals: Vec<AuditProposal>,
    pub winner: Option<ReplicaId>,
    pub failed_all_yield: bool,
    pub bypassed: bool,
    pub closed_by: Option<ReplicaId>,
    pub steps: StepStamps,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ElectionReport {
    pub election: ElectionId,
    pub outcome: Outcome,
    /// Replica that started executing, if any.
    pub executor: Option<ReplicaId>,
    /// Local time from submit to the executor starting, or to resolution.
    pub elapsed_ms: Millis,
    pub steps: StepStamps,
}

#[derive(Debug, Clone)]
enum Timer {
    Deliver {
        node: ReplicaId,
        req: ExecuteRequest,
        gpus_available: bool,
    },
    Finish {
        node: ReplicaId,
        election: ElectionId,
    },
    Crash(ReplicaId),
}

/// A full request driven through the scheduler's failure handling, used by
/// the fault-injection suites.
#[derive(Debug, Clone)]
pub struct RequestRun {
    pub seq: u64,
    pub gpus: u32,
    pub duration_ms: Millis,
    /// GPU availability on each member's host at routing time.
    pub available: BTreeMap<ReplicaId, bool>,
    /// Crash one member this long after submit.
    pub crash: Option<(ReplicaId, Millis)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RequestOutcome {
    pub seq: u64,
    pub executed_by: Option<ReplicaId>,
    pub attempts: u32,
    pub migrated: bool,
    pub failed_all_yield: bool,
    pub error: bool,
    pub elapsed_ms: Millis,
}

pub struct KernelGroup {
    kernel: KernelId,
    config: GroupConfig,
    net: RaftNet<KernelCommand>,
    replicas: BTreeMap<ReplicaId, KernelReplica>,
    members: Vec<ReplicaId>,
    crashed: BTreeSet<ReplicaId>,
    cursor: BTreeMap<ReplicaId, usize>,
    timers: BTreeMap<(Millis, u64), Timer>,
    timer_seq: u64,
    rng: RngStream,
    next_node: ReplicaId,
    next_version: u64,
    submitted_at: BTreeMap<ElectionId, Millis>,
    audits: BTreeMap<ElectionId, ElectionAudit>,
    outcomes: BTreeMap<ElectionId, Outcome>,
    /// Executors designated directly, without an election.
    designated: BTreeMap<ElectionId, ReplicaId>,
    closes: BTreeMap<ElectionId, Option<ReplicaId>>,
    starts: Vec<(ElectionId, ReplicaId)>,
    finished: Vec<(ElectionId, ReplicaId)>,
    aborted: Vec<(ElectionId, ReplicaId)>,
    /// Executor and target version of a sync in progress.
    syncing: Option<(ReplicaId, u64)>,
    incarnation: u64,
    seed: u64,
}

impl KernelGroup {
    /// Create the three replicas and elect a Raft leader.
    pub fn new(kernel: KernelId, seed: u64, config: GroupConfig) -> Result<Self, GroupError> {
        let members: Vec<ReplicaId> = (1..=REPLICAS as ReplicaId).collect();
        let mut group = Self {
            kernel,
            net: Self::make_net(0, seed, kernel, 0, &members, &config),
            replicas: members.iter().map(|&id| (id, KernelReplica::new(id, kernel))).collect(),
            cursor: members.iter().map(|&id| (id, 0)).collect(),
            members,
            config,
            crashed: BTreeSet::new(),
            timers: BTreeMap::new(),
            timer_seq: 0,
            rng: RngStream::new(seed, format!("kernel/{kernel}/ls")),
            next_node: REPLICAS as ReplicaId + 1,
            next_version: 0,
            submitted_at: BTreeMap::new(),
            audits: BTreeMap::new(),
            outcomes: BTreeMap::new(),
            designated: BTreeMap::new(),
            closes: BTreeMap::new(),
            starts: Vec::new(),
            finished: Vec::new(),
            aborted: Vec::new(),
            syncing: None,
            incarnation: 0,
            seed,
        };
        group.await_leader()?;
        Ok(group)
    }

    fn make_net(
        start: Millis,
        seed: u64,
        kernel: KernelId,
        incarnation: u64,
        members: &[ReplicaId],
        config: &GroupConfig,
    ) -> RaftNet<KernelCommand> {
        let net_seed = seed ^ kernel.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ incarnation.rotate_left(32);
        RaftNet::starting_at(
            start,
            net_seed,
            members,
            config.raft.clone(),
            NetConfig {
                tick_ms: config.tick_ms,
                link: config.link.clone(),
                retry_ms: config.proposal_retry_ms,
            },
        )
    }

    pub fn kernel(&self) -> KernelId {
        self.kernel
    }

    pub fn now(&self) -> Millis {
        self.net.now()
    }

    pub fn config(&self) -> &GroupConfig {
        &self.config
    }

    pub fn members(&self) -> &[ReplicaId] {
        &self.members
    }

    pub fn live_members(&self) -> Vec<ReplicaId> {
        self.members.iter().copied().filter(|m| !self.crashed.contains(m)).collect()
    }

    pub fn replica(&self, id: ReplicaId) -> &KernelReplica {
        &self.replicas[&id]
    }

    pub fn audit(&self, id: ElectionId) -> Option<&ElectionAudit> {
        self.audits.get(&id)
    }

    pub fn audits(&self) -> impl Iterator<Item = &ElectionAudit> {
        self.audits.values()
    }

    /// Every (election, replica) that began executing, in order.
    pub fn starts(&self) -> &[(ElectionId, ReplicaId)] {
        &self.starts
    }

    /// Executions that ran to completion (GPU work done and copied back).
    pub fn finished(&self) -> &[(ElectionId, ReplicaId)] {
        &self.finished
    }

    /// Runs cut short by a crash: those interrupted while executing, and
    /// those that finished on a crashed replica without their completion
    /// closing the election.
    pub fn aborted(&self) -> Vec<(ElectionId, ReplicaId)> {
        let lost = self
            .finished
            .iter()
            .filter(|(e, r)| self.crashed.contains(r) && self.closes.get(e) != Some(&Some(*r)));
        self.aborted.iter().chain(lost).copied().collect()
    }

    pub fn closed_by(&self, id: ElectionId) -> Option<Option<ReplicaId>> {
        self.closes.get(&id).copied()
    }

    pub fn outcome(&self, id: ElectionId) -> Outcome {
        self.outcomes.get(&id).copied().unwrap_or(Outcome::Pending)
    }

    /// Applied state version of each live member.
    pub fn versions(&self) -> BTreeMap<ReplicaId, u64> {
        self.live_members()
            .into_iter()
            .map(|m| (m, self.replicas[&m].applied_state_version()))
            .collect()
    }

    pub fn latest_version(&self) -> u64 {
        self.next_version
    }

    /// Live large objects as seen by the first live member.
    pub fn objects(&self) -> BTreeMap<String, (u64, u64)> {
        self.live_members()
            .first()
            .map(|m| self.replicas[m].objects().clone())
            .unwrap_or_default()
    }

    pub fn dump_log(&self, node: ReplicaId, out: impl std::io::Write) -> std::io::Result<()> {
        crate::raft::dump_log(self.net.node(node).log(), out)
    }

    fn timeout(&self, what: &'static str) -> GroupError {
        GroupError::Timeout {
            kernel: self.kernel,
            what,
            limit_ms: self.config.step_limit_ms,
        }
    }

    fn schedule(&mut self, at: Millis, timer: Timer) {
        self.timers.insert((at, self.timer_seq), timer);
        self.timer_seq += 1;
    }

    // ------------------------------------------------------------------
    // Event loop
    // ------------------------------------------------------------------

    /// Run events until `done` holds. Fails after `step_limit_ms`.
    fn advance<F>(&mut self, what: &'static str, mut done: F) -> Result<(), GroupError>
    where
        F: FnMut(&Self) -> bool,
    {
        let deadline = self.now() + self.config.step_limit_ms;
        loop {
            self.pump();
            if done(self) {
                return Ok(());
            }
            let timer_at = self.timers.keys().next().map(|k| k.0);
            let net_at = self.net.next_time();
            let next = match (timer_at, net_at) {
                (Some(a), Some(b)) => a.min(b),
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => return Err(self.timeout(what)),
            };
            if next > deadline {
                return Err(self.timeout(what));
            }
            if timer_at == Some(next) {
                self.net.advance_clock(next);
                let (_, timer) = self.timers.pop_first().unwrap();
                self.fire(timer);
            } else {
                self.net.step().map_err(|v| GroupError::Safety(self.kernel, v))?;
            }
        }
    }

    fn fire(&mut self, timer: Timer) {
        match timer {
            Timer::Deliver {
                node,
                req,
                gpus_available,
            } => {
                if self.crashed.contains(&node) || !self.replicas.contains_key(&node) {
                    return;
                }
                let election = req.election;
                let offset = self.offset(election);
                if let Some(a) = self.audits.get_mut(&election) {
                    a.steps.delivered.get_or_insert(offset);
                }
                let actions = self.replicas.get_mut(&node).unwrap().on_execute_request(req, gpus_available);
                self.apply(node, actions);
            }
            Timer::Finish { node, election } => {
                if self.crashed.contains(&node) {
                    return;
                }
                let actions = self.replicas.get_mut(&node).unwrap().finish_execution(election);
                if !actions.is_empty() {
                    self.finished.push((election, node));
                    let offset = self.offset(election);
                    if let Some(a) = self.audits.get_mut(&election) {
                        a.steps.exec_end = Some(offset);
                    }
                }
                self.apply(node, actions);
            }
            Timer::Crash(node) => self.crash(node),
        }
    }

    fn offset(&self, election: ElectionId) -> Millis {
        self.now() - self.submitted_at.get(&election).copied().unwrap_or(self.now())
    }

    /// Feed newly committed entries to each live replica.
    fn pump(&mut self) {
        loop {
            let mut progressed = false;
            let ids: Vec<ReplicaId> = self.replicas.keys().copied().collect();
            for id in ids {
                if self.crashed.contains(&id) {
                    continue;
                }
                let cur = self.cursor[&id];
                let applied = self.net.applied(id);
                if cur >= applied.len() {
                    continue;
                }
                let batch: Vec<KernelCommand> = applied[cur..]
                    .iter()
                    .filter_map(|e| match &e.payload {
                        EntryPayload::Command(c) => Some(c.clone()),
                        _ => None,
                    })
                    .collect();
                self.cursor.insert(id, applied.len());
                for cmd in batch {
                    self.observe_commit(&cmd);
                    let actions = self.replicas.get_mut(&id).unwrap().on_committed(&cmd);
                    self.apply(id, actions);
                }
                progressed = true;
            }
            if !progressed {
                break;
            }
        }
    }

    /// Record audit data the first time any replica applies an entry.
    fn observe_commit(&mut self, cmd: &KernelCommand) {
        let Some(election) = cmd.election() else { return };
        let offset = self.offset(election);
        let audit = self.audits.entry(election).or_insert_with(|| new_audit(election));
        if let KernelCommand::Proposal { kind, proposer, .. } = cmd {
            if *kind != ProposalKind::Vote
                && !audit.proposals.iter().any(|p| p.replica == *proposer && p.kind != ProposalKind::Vote)
            {
                audit.steps.first_commit.get_or_insert(offset);
                audit.proposals.push(AuditProposal {
                    replica: *proposer,
                    kind: *kind,
                });
            }
        }
    }

    fn apply(&mut self, node: ReplicaId, actions: Vec<ReplicaAction>) {
        for action in actions {
            match action {
                ReplicaAction::Propose(cmd) => {
                    self.net.propose(node, cmd);
                }
                ReplicaAction::StartExecution { election, .. } => {
                    self.starts.push((election, node));
                    let offset = self.offset(election);
                    let audit = self.audits.entry(election).or_insert_with(|| new_audit(election));
                    audit.steps.exec_start.get_or_insert(offset);
                    if audit.winner.is_none() {
                        audit.winner = Some(node);
                    }
                }
                ReplicaAction::Resolved { election, outcome } => {
                    self.outcomes.entry(election).or_insert(outcome);
                    let offset = self.offset(election);
                    let audit = self.audits.entry(election).or_insert_with(|| new_audit(election));
                    audit.steps.resolved.get_or_insert(offset);
                    match outcome {
                        Outcome::Winner(w) => audit.winner = Some(w),
                        Outcome::FailedAllYield => audit.failed_all_yield = true,
                        Outcome::Pending => {}
                    }
                }
                ReplicaAction::Closed { election, executor } => {
                    self.closes.entry(election).or_insert(executor);
                    let offset = self.offset(election);
                    let audit = self.audits.entry(election).or_insert_with(|| new_audit(election));
                    audit.steps.complete_committed.get_or_insert(offset);
                    audit.closed_by = executor;
                }
            }
        }
    }

    fn await_leader(&mut self) -> Result<(), GroupError> {
        self.advance("leader election", |g| {
            g.net.leader().is_some_and(|l| g.members.contains(&l))
        })
    }

    // ------------------------------------------------------------------
    // Operations used by the platform
    // ------------------------------------------------------------------

    /// Deliver a request to every live member with its designation and run
    /// until an executor starts or the election fails.
    pub fn submit(
        &mut self,
        election: ElectionId,
        submit_time: Millis,
        duration_ms: Millis,
        gpus: u32,
        designations: &[(ReplicaId, Designation, bool)],
    ) -> Result<ElectionReport, GroupError> {
        self.deliver(election, submit_time, duration_ms, gpus, designations);
        let t0 = self.submitted_at[&election];
        self.advance("election", |g| g.election_settled(election))?;
        let outcome = self.outcome(election);
        let executor = self.starts.iter().find(|(e, _)| *e == election).map(|(_, r)| *r);
        let steps = self.audits.get(&election).map(|a| a.steps.clone()).unwrap_or_default();
        Ok(ElectionReport {
            election,
            outcome: match (outcome, executor) {
                (Outcome::Pending, Some(r)) => Outcome::Winner(r),
                (o, _) => o,
            },
            executor,
            elapsed_ms: self.now() - t0,
            steps,
        })
    }

    fn deliver(
        &mut self,
        election: ElectionId,
        submit_time: Millis,
        duration_ms: Millis,
        gpus: u32,
        designations: &[(ReplicaId, Designation, bool)],
    ) {
        let now = self.now();
        self.submitted_at.insert(election, now);
        let audit = self.audits.entry(election).or_insert_with(|| new_audit(election));
        audit.bypassed = designations.iter().any(|d| d.1 == Designation::Executor);
        if let Some(d) = designations.iter().find(|d| d.1 == Designation::Executor) {
            self.designated.insert(election, d.0);
        }
        for &(node, designation, gpus_available) in designations {
            if self.crashed.contains(&node) {
                continue;
            }
            let at = now + self.config.ls_link.reliable_latency(&mut self.rng, self.config.ls_retry_ms);
            let req = ExecuteRequest {
                election,
                submit_time,
                duration_ms,
                gpus,
                designation,
            };
            self.schedule(
                at,
                Timer::Deliver {
                    node,
                    req,
                    gpus_available,
                },
            );
        }
    }

    fn election_settled(&self, election: ElectionId) -> bool {
        if self.starts.iter().any(|(e, _)| *e == election) {
            return true;
        }
        match self.outcome(election) {
            Outcome::FailedAllYield => true,
            Outcome::Winner(w) => self.crashed.contains(&w) || !self.members.contains(&w),
            Outcome::Pending => self.closes.contains_key(&election),
        }
    }

    /// The executor finished its cell: append the completion record and
    /// run until it commits. Returns local elapsed time.
    pub fn complete(&mut self, election: ElectionId, executor: ReplicaId) -> Result<Millis, GroupError> {
        let t0 = self.now();
        let actions = self.replicas.get_mut(&executor).unwrap().finish_execution(election);
        if !actions.is_empty() {
            self.finished.push((election, executor));
        }
        self.apply(executor, actions);
        self.advance("execution complete", |g| g.closes.contains_key(&election))?;
        Ok(self.now() - t0)
    }

    /// Replicate the executor's post-execution state: small deltas go
    /// through the log, large ones as a pointer to an object already written
    /// to the data store. Returns (version, local elapsed).
    pub fn replicate(
        &mut self,
        executor: ReplicaId,
        bytes: u64,
        threshold: u64,
        object_key: impl FnOnce(u64) -> String,
    ) -> Result<(u64, Millis), GroupError> {
        let t0 = self.now();
        self.next_version += 1;
        let version = self.next_version;
        let cmd = if bytes <= threshold {
            KernelCommand::StateDelta { version, bytes }
        } else {
            KernelCommand::LargeObjectPointer {
                key: object_key(version),
                bytes,
                version,
            }
        };
        let proposer = if self.crashed.contains(&executor) {
            self.live_members()[0]
        } else {
            executor
        };
        self.syncing = Some((proposer, version));
        self.net.propose(proposer, cmd);
        self.advance("state sync", |g| {
            g.live_members()
                .iter()
                .all(|m| g.replicas[m].applied_state_version() >= version)
        })?;
        self.syncing = None;
        let actions = self.replicas.get_mut(&executor).map(|r| r.sync_done()).unwrap_or_default();
        self.apply(executor, actions);
        self.pump();
        Ok((version, self.now() - t0))
    }

    /// Fail-stop one replica.
    pub fn crash(&mut self, node: ReplicaId) {
        if self.crashed.insert(node) {
            self.net.crash(node);
            if let Some(r) = self.replicas.get_mut(&node) {
                if let Some(e) = r.executing() {
                    self.aborted.push((e, node));
                }
                r.abort_execution();
            }

        }
    }

    /// Replace `old` with a fresh replica: add it to the Raft group, remove
    /// `old`, and wait until the newcomer has replayed the committed log.
    /// A live `old` is terminated once it is out of the configuration.
    pub fn replace(&mut self, old: ReplicaId) -> Result<(ReplicaId, Millis), GroupError> {
        // The old member, if alive, votes until it is removed, so two live
        // members plus the newcomer always reach a quorum of four.
        if self.live_members().len() < 2 {
            return Err(GroupError::QuorumLost { kernel: self.kernel });
        }
        let t0 = self.now();
        let new = self.next_node;
        self.next_node += 1;
        if let Some(r) = self.replicas.get_mut(&old) {
            r.begin_migration();
        }
        self.net.add_node(new);
        self.replicas.insert(new, KernelReplica::new(new, self.kernel));
        self.cursor.insert(new, 0);
        let retry = self.config.proposal_retry_ms.max(1);
        let deadline = t0 + self.config.step_limit_ms;
        loop {
            let done = self.replace_committed(old, new);
            if done {
                break;
            }
            let _ = self.net.reconfigure(old, new);
            let until = (self.now() + retry).min(deadline);
            self.advance("reconfigure", |g| g.now() >= until)?;
            if self.now() >= deadline {
                return Err(self.timeout("reconfigure"));
            }
        }
        self.members.retain(|m| *m != old);
        self.members.push(new);
        self.crash(old);
        // Replay: the newcomer catches up with the leader's commit index.
        self.advance("log replay", |g| {
            let Some(l) = g.net.leader() else { return false };
            g.net.node(new).last_applied() >= g.net.node(l).commit_index() && g.cursor[&new] == g.net.applied(new).len()
        })?;
        Ok((new, self.now() - t0))
    }

    /// The leader's configuration has `new` without `old` and no membership
    /// change is left uncommitted.
    fn replace_committed(&self, old: ReplicaId, new: ReplicaId) -> bool {
        let Some(l) = self.net.leader() else { return false };
        let node = self.net.node(l);
        if node.replace_status(old, new) == Some(MembershipStatus::Committed) {
            return true;
        }
        let v = node.voters();
        v.contains(&new)
            && !v.contains(&old)
            && !node.log()[node.commit_index() as usize..]
                .iter()
                .any(|e| matches!(e.payload, EntryPayload::Membership(_)))
    }

    /// Rebuild all replicas from a checkpoint after the group lost quorum.
    /// The new group starts with an empty log and the restored state.
    pub fn recreate(&mut self, version: u64, objects: &BTreeMap<String, (u64, u64)>) -> Result<Millis, GroupError> {
        let t0 = self.now();
        self.incarnation += 1;
        let base = self.next_node;
        let members: Vec<ReplicaId> = (base..base + REPLICAS as ReplicaId).collect();
        self.next_node = base + REPLICAS as ReplicaId;
        for m in self.members.clone() {
            self.crash(m);
        }
        self.net = Self::make_net(t0, self.seed, self.kernel, self.incarnation, &members, &self.config);
        self.crashed.clear();
        self.replicas.clear();
        self.cursor.clear();
        self.timers.clear();
        for &m in &members {
            let mut r = KernelReplica::new(m, self.kernel);
            for (key, (bytes, v)) in objects {
                r.on_committed(&KernelCommand::LargeObjectPointer {
                    key: key.clone(),
                    bytes: *bytes,
                    version: *v,
                });
            }
            r.on_committed(&KernelCommand::StateDelta { version, bytes: 0 });
            self.replicas.insert(m, r);
            self.cursor.insert(m, 0);
        }
        self.members = members;
        self.next_version = self.next_version.max(version);
        self.await_leader()?;
        Ok(self.now() - t0)
    }

    // ------------------------------------------------------------------
    // Full request with failure handling
    // ------------------------------------------------------------------

    /// Drive one request to completion the way the global scheduler would:
    /// route, elect, execute, and on a failed election or a replica failure
    /// migrate/replace and re-drive with a fresh attempt.
    pub fn run_request(&mut self, run: RequestRun) -> Result<RequestOutcome, GroupError> {
        let t0 = self.now();
        let mut election = ElectionId::new(self.kernel, run.seq);
        let mut out = RequestOutcome {
            seq: run.seq,
            executed_by: None,
            attempts: 1,
            migrated: false,
            failed_all_yield: false,
            error: false,
            elapsed_ms: 0,
        };
        if let Some((node, after)) = run.crash {
            self.schedule(t0 + after, Timer::Crash(node));
        }
        let mut detect_at: BTreeMap<ReplicaId, Millis> = BTreeMap::new();
        let mut handled: BTreeSet<ReplicaId> = self.crashed.clone();

        let avail: Vec<(ReplicaId, bool)> = self
            .live_members()
            .into_iter()
            .map(|m| (m, run.available.get(&m).copied().unwrap_or(false)))
            .collect();
        let designations = crate::scheduler::designate(&avail);
        self.deliver(election, t0, run.duration_ms, run.gpus, &designations);
        let mut scheduled_finish: BTreeSet<(ElectionId, ReplicaId)> = BTreeSet::new();
        let mut synced = false;

        let deadline = t0 + self.config.step_limit_ms * MAX_ATTEMPTS as Millis;
        loop {
            if self.now() > deadline {
                return Err(self.timeout("request"));
            }
            // Wait for something the scheduler reacts to.
            let e = election;
            self.advance("request", |g| {
                g.closes.contains_key(&e)
                    || g.outcome(e) == Outcome::FailedAllYield
                    || g.starts.iter().any(|(x, r)| *x == e && !scheduled_finish.contains(&(*x, *r)))
                    || g.crashed.iter().any(|c| !handled.contains(c) && !detect_at.contains_key(c))
                    || detect_at.values().any(|t| g.now() >= *t)
            })?;

            // Newly crashed members: the heartbeat timeout fires later.
            for c in self.crashed.clone() {
                if handled.contains(&c) || detect_at.contains_key(&c) {
                    continue;
                }
                if self.members.contains(&c) {
                    detect_at.insert(c, self.now() + self.config.heartbeat_timeout_ms);
                } else {
                    handled.insert(c);
                }
            }

            // Executions that just started: schedule their completion.
            for (x, r) in self.starts.clone() {
                if x == election && scheduled_finish.insert((x, r)) {
                    let busy = self.config.param_load_ms + run.duration_ms + self.config.copy_ms;
                    let at = self.now() + busy;
                    self.schedule(at, Timer::Finish { node: r, election: x });
                }
            }

            // Completed: replicate a small delta and finish.
            if let Some(Some(exec)) = self.closes.get(&election).copied() {
                if !synced {
                    synced = true;
                    out.executed_by = Some(exec);
                    if !self.crashed.contains(&exec) && self.live_members().len() >= 2 {
                        let k = self.kernel;
                        let _ = self.replicate(exec, 1024, u64::MAX, |v| format!("k{k}/v{v}"));
                    }
                }
                // Crash injections that have not fired no longer matter
                // to this request.
                self.timers.retain(|_, t| !matches!(t, Timer::Crash(_)));
                let Some(due_at) = detect_at.values().copied().min() else { break };
                self.advance("failure detection", |g| g.now() >= due_at)?;
                let due: Vec<ReplicaId> = detect_at.iter().filter(|(_, t)| self.now() >= **t).map(|(c, _)| *c).collect();
                for c in due {
                    detect_at.remove(&c);
                    handled.insert(c);
                    if self.members.contains(&c) {
                        self.replace(c)?;
                    }
                }
                continue;
            }

            // Failure detected: replace the dead member, fence the attempt
            // and re-drive on the replacement.
            let due: Vec<ReplicaId> = detect_at.iter().filter(|(_, t)| self.now() >= **t).map(|(c, _)| *c).collect();
            if !due.is_empty() {
                let mut replacement = None;
                for c in due {
                    detect_at.remove(&c);
                    handled.insert(c);
                    if self.members.contains(&c) {
                        replacement = Some(self.replace(c)?.0);
                    }
                }
                if !self.closes.contains_key(&election) {
                    if self.live_winner(election) || !self.fence(election)? {
                        continue;
                    }
                    if let Some(Some(_)) = self.closes.get(&election) {
                        continue;
                    }
                    let Some(target) = replacement.or_else(|| self.live_members().last().copied()) else {
                        return Err(GroupError::QuorumLost { kernel: self.kernel });
                    };
                    out.migrated = true;
                    election = self.redrive(election, target, &run, &mut out)?;
                }
                continue;
            }

            // All replicas yielded: migrate one and resubmit to it.
            if self.outcome(election) == Outcome::FailedAllYield && !self.closes.contains_key(&election) {
                out.failed_all_yield = true;
                let victim = self
                    .live_members()
                    .into_iter()
                    .find(|m| !run.available.get(m).copied().unwrap_or(false))
                    .or_else(|| self.live_members().first().copied())
                    .ok_or(GroupError::QuorumLost { kernel: self.kernel })?;
                let (target, _) = self.replace(victim)?;
                handled.insert(victim);
                let closed = self.fence(election)?;
                debug_assert!(closed);
                out.migrated = true;
                election = self.redrive(election, target, &run, &mut out)?;
                continue;
            }
        }
        out.elapsed_ms = self.now() - t0;
        Ok(out)
    }

    /// Close an attempt that will not run by committing a completion record
    /// without an executor. Whatever the log ordered first wins.
    /// The attempt has an elected or directly designated executor that is
    /// still alive.
    fn live_winner(&self, election: ElectionId) -> bool {
        let winner = match self.outcome(election) {
            Outcome::Winner(w) => Some(w),
            _ => self.designated.get(&election).copied(),
        };
        winner.is_some_and(|w| !self.crashed.contains(&w))
    }

    /// Close `election` unless it already has a live winner. Returns whether
    /// it closed.
    fn fence(&mut self, election: ElectionId) -> Result<bool, GroupError> {
        // Retries stay with the proposing node, so a proposer that crashes
        // before the entry is appended is replaced. Duplicates are no-ops.
        let retry = self.config.proposal_retry_ms.max(1);
        let deadline = self.now() + self.config.step_limit_ms;
        let mut proposer = None;
        loop {
            if self.closes.contains_key(&election) {
                return Ok(true);
            }
            // A winner decided before the fence makes it a no-op.
            if self.live_winner(election) {
                return Ok(false);
            }
            if self.now() >= deadline {
                return Err(self.timeout("fence"));
            }
            if proposer.is_none_or(|p| self.crashed.contains(&p)) {
                let p = *self.live_members().first().ok_or(GroupError::QuorumLost { kernel: self.kernel })?;
                let failed = self.crashed.iter().copied().collect();
                self.net.propose(p, KernelCommand::Fence { election, failed });
                proposer = Some(p);
            }
            let until = (self.now() + retry).min(deadline);
            self.advance("fence", |g| g.closes.contains_key(&election) || g.live_winner(election) || g.now() >= until)?;
        }
    }

    fn redrive(
        &mut self,
        election: ElectionId,
        target: ReplicaId,
        run: &RequestRun,
        out: &mut RequestOutcome,
    ) -> Result<ElectionId, GroupError> {
        if out.attempts >= MAX_ATTEMPTS {
            out.error = true;
            return Err(GroupError::Aborted {
                kernel: self.kernel,
                seq: run.seq,
                attempts: out.attempts,
            });
        }
        out.attempts += 1;
        let next = election.next_attempt();
        let designations: Vec<(ReplicaId, Designation, bool)> = self
            .live_members()
            .into_iter()
            .map(|m| {
                if m == target {
                    (m, Designation::Executor, true)
                } else {
                    (m, Designation::Standby, false)
                }
            })
            .collect();
        let now = self.now();
        self.deliver(next, now, run.duration_ms, run.gpus, &designations);
        Ok(next)
    }
}

fn new_audit(election: ElectionId) -> ElectionAudit {
    ElectionAudit {
        election_id: election.to_string(),
        proposals: Vec::new(),
        winner: None,
        failed_all_yield: false,
        bypassed: false,
        closed_by: None,
        steps: StepStamps::default(),
    }
}

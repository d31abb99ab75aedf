use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::Serialize;

use super::election::{ElectionEvent, ElectionState, Outcome};
use super::{Designation, ElectionId, ExecuteRequest, KernelCommand, KernelId, ReplicaId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    Electing,
    Executing,
    Synchronizing,
    Migrating,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplicaAction {
    Propose(KernelCommand),
    StartExecution { election: ElectionId, gpus: u32 },
    Resolved { election: ElectionId, outcome: Outcome },
    Closed { election: ElectionId, executor: Option<ReplicaId> },
}

/// One replica's state machine. It never talks to the network directly:
/// the caller feeds requests and committed log entries and carries out the
/// returned actions.
#[derive(Debug, Clone)]
pub struct KernelReplica {
    pub id: ReplicaId,
    pub kernel: KernelId,
    phase: Phase,
    queue: VecDeque<(ExecuteRequest, bool)>,
    requests: BTreeMap<ElectionId, ExecuteRequest>,
    elections: BTreeMap<ElectionId, ElectionState>,
    handled: BTreeSet<ElectionId>,
    voted: BTreeSet<ElectionId>,
    executing: Option<ElectionId>,
    started: Vec<ElectionId>,
    applied_state_version: u64,
    objects: BTreeMap<String, (u64, u64)>,
}

impl KernelReplica {
    pub fn new(id: ReplicaId, kernel: KernelId) -> Self {
        Self {
            id,
            kernel,
            phase: Phase::Idle,
            queue: VecDeque::new(),
            requests: BTreeMap::new(),
            elections: BTreeMap::new(),
            handled: BTreeSet::new(),
            voted: BTreeSet::new(),
            executing: None,
            started: Vec::new(),
            applied_state_version: 0,
            objects: BTreeMap::new(),
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn applied_state_version(&self) -> u64 {
        self.applied_state_version
    }

    pub fn executing(&self) -> Option<ElectionId> {
        self.executing
    }

    /// Every election this replica ever started executing.
    pub fn started(&self) -> &[ElectionId] {
        &self.started
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    pub fn election(&self, id: ElectionId) -> Option<&ElectionState> {
        self.elections.get(&id)
    }

    /// Live large objects referenced from the log: key -> (bytes, version).
    pub fn objects(&self) -> &BTreeMap<String, (u64, u64)> {
        &self.objects
    }

    pub fn begin_migration(&mut self) {
        self.phase = Phase::Migrating;
    }

    pub fn on_execute_request(&mut self, req: ExecuteRequest, gpus_available: bool) -> Vec<ReplicaAction> {
        if self.phase == Phase::Migrating || self.handled.contains(&req.election) {
            return Vec::new();
        }
        if self.phase == Phase::Synchronizing {
            // Held until replication finishes, then proposed in FIFO order.
            if !self.queue.iter().any(|(q, _)| q.election == req.election) {
                self.queue.push_back((req, gpus_available));
            }
            return Vec::new();
        }
        self.handle(req, gpus_available)
    }

    fn handle(&mut self, req: ExecuteRequest, gpus_available: bool) -> Vec<ReplicaAction> {
        let id = req.election;
        self.handled.insert(id);
        self.elections.entry(id).or_insert_with(|| ElectionState::new(id));
        let designation = req.designation;
        let gpus = req.gpus;
        self.requests.insert(id, req);
        match designation {
            Designation::Execute if gpus_available => {
                self.phase = Phase::Electing;
                vec![ReplicaAction::Propose(KernelCommand::lead(id, self.id))]
            }
            Designation::Execute | Designation::Yield => {
                self.phase = Phase::Electing;
                vec![ReplicaAction::Propose(KernelCommand::yield_(id, self.id))]
            }
            Designation::Executor => self.start(id, gpus),
            Designation::Standby => Vec::new(),
        }
    }

    fn start(&mut self, id: ElectionId, gpus: u32) -> Vec<ReplicaAction> {
        if self.executing.is_some() || self.elections.get(&id).is_some_and(|e| e.is_closed()) {
            return Vec::new();
        }
        self.executing = Some(id);
        self.started.push(id);
        self.phase = Phase::Executing;
        vec![ReplicaAction::StartExecution { election: id, gpus }]
    }

    pub fn on_committed(&mut self, cmd: &KernelCommand) -> Vec<ReplicaAction> {
        match cmd {
            KernelCommand::Proposal {
                kind,
                election,
                proposer,
                vote_target,
            } => {
                let st = self
                    .elections
                    .entry(*election)
                    .or_insert_with(|| ElectionState::new(*election));
                match st.on_commit(*kind, *proposer, *vote_target) {
                    Some(ElectionEvent::CastVote(target)) => {
                        if self.phase != Phase::Migrating && self.voted.insert(*election) {
                            vec![ReplicaAction::Propose(KernelCommand::vote(*election, self.id, target))]
                        } else {
                            Vec::new()
                        }
                    }
                    Some(ElectionEvent::Resolved(outcome)) => {
                        let mut out = vec![ReplicaAction::Resolved {
                            election: *election,
                            outcome,
                        }];
                        if self.phase == Phase::Electing {
                            self.phase = Phase::Idle;
                        }
                        if outcome == Outcome::Winner(self.id) && self.phase != Phase::Migrating {
                            let gpus = self.requests.get(election).map(|r| r.gpus).unwrap_or(0);
                            out.extend(self.start(*election, gpus));
                        }
                        out
                    }
                    None => Vec::new(),
                }
            }
            KernelCommand::Fence { election, failed } => {
                let st = self
                    .elections
                    .entry(*election)
                    .or_insert_with(|| ElectionState::new(*election));
                if matches!(st.outcome(), Outcome::Winner(w) if !failed.contains(&w)) {
                    return Vec::new();
                }
                self.on_committed(&KernelCommand::ExecutionComplete {
                    election: *election,
                    executor: None,
                })
            }
            KernelCommand::ExecutionComplete { election, executor } => {
                let st = self
                    .elections
                    .entry(*election)
                    .or_insert_with(|| ElectionState::new(*election));
                if st.is_closed() {
                    return Vec::new();
                }
                st.close();
                if self.executing == Some(*election) && *executor != Some(self.id) {
                    // Fenced while running: the result is discarded.
                    self.executing = None;
                    self.phase = Phase::Idle;
                }
                if self.phase == Phase::Electing {
                    self.phase = Phase::Idle;
                }
                vec![ReplicaAction::Closed {
                    election: *election,
                    executor: *executor,
                }]
            }
            KernelCommand::StateDelta { version, .. } => {
                self.apply_version(*version);
                Vec::new()
            }
            KernelCommand::LargeObjectPointer { key, bytes, version } => {
                self.objects.insert(key.clone(), (*bytes, *version));
                self.apply_version(*version);
                Vec::new()
            }
        }
    }

    fn apply_version(&mut self, version: u64) {
        // Retried syncs can commit the same version twice; later copies are
        // no-ops so versions stay strictly increasing.
        if version > self.applied_state_version {
            self.applied_state_version = version;
        }
    }

    /// The executor finished (including the GPU-to-host copy). Returns the
    /// completion proposal; the replica stays synchronizing until
    /// [`KernelReplica::sync_done`].
    pub fn finish_execution(&mut self, election: ElectionId) -> Vec<ReplicaAction> {
        if self.executing != Some(election) {
            return Vec::new();
        }
        self.executing = None;
        self.phase = Phase::Synchronizing;
        vec![ReplicaAction::Propose(KernelCommand::ExecutionComplete {
            election,
            executor: Some(self.id),
        })]
    }

    /// Execution aborted locally (host failure); nothing is proposed.
    pub fn abort_execution(&mut self) {
        self.executing = None;
        if self.phase == Phase::Executing {
            self.phase = Phase::Idle;
        }
    }

    /// Replication finished: drain requests queued meanwhile.
    pub fn sync_done(&mut self) -> Vec<ReplicaAction> {
        if self.phase == Phase::Synchronizing {
            self.phase = Phase::Idle;
        }
        let mut out = Vec::new();
        while let Some((req, avail)) = self.queue.pop_front() {
            if !self.handled.contains(&req.election) {
                out.extend(self.handle(req, avail));
            }
        }
        out
    }
}

//! Distributed-kernel replicas: executor election over the shared Raft log,
//! cell execution lifecycle and state synchronization.

mod election;
mod group;
mod replica;

pub use election::{ElectionState, Outcome};
pub use group::{
    ElectionAudit, ElectionReport, GroupConfig, GroupError, KernelGroup, RequestOutcome, RequestRun,
    StepStamps,
};
pub use replica::{KernelReplica, Phase, ReplicaAction};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::raft::{DescribeBody, NodeId};
use crate::sim::Millis;

pub type KernelId = u64;

/// Raft node id of a replica. The first three replicas of a kernel are 1, 2
/// and 3; replacements get fresh ids.
pub type ReplicaId = NodeId;

/// Replication factor. Two replicas cannot form a useful Raft quorum and
/// five cost too much, so it is fixed.
pub const REPLICAS: usize = 3;

/// One execution attempt of one cell. A request re-driven after migration
/// or failure keeps `seq` and bumps `attempt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ElectionId {
    pub kernel: KernelId,
    pub seq: u64,
    pub attempt: u32,
}

impl ElectionId {
    pub fn new(kernel: KernelId, seq: u64) -> Self {
        Self {
            kernel,
            seq,
            attempt: 0,
        }
    }

    pub fn next_attempt(self) -> Self {
        Self {
            attempt: self.attempt + 1,
            ..self
        }
    }
}

impl fmt::Display for ElectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k{}-r{}-a{}", self.kernel, self.seq, self.attempt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ProposalKind {
    Lead,
    Yield,
    Vote,
}

/// Body of a kernel's Raft log entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KernelCommand {
    Proposal {
        kind: ProposalKind,
        election: ElectionId,
        proposer: ReplicaId,
        vote_target: Option<ReplicaId>,
    },
    StateDelta {
        version: u64,
        bytes: u64,
    },
    LargeObjectPointer {
        key: String,
        bytes: u64,
        version: u64,
    },
    /// Closes an election. `executor` is `None` when the scheduler fences an
    /// attempt that will not run (its winner failed or it stalled).
    ExecutionComplete {
        election: ElectionId,
        executor: Option<ReplicaId>,
    },
    /// Scheduler fence: closes the election unless a winner outside `failed`
    /// was decided earlier in the log.
    Fence {
        election: ElectionId,
        failed: Vec<ReplicaId>,
    },
}

impl KernelCommand {
    pub fn lead(election: ElectionId, proposer: ReplicaId) -> Self {
        Self::Proposal {
            kind: ProposalKind::Lead,
            election,
            proposer,
            vote_target: None,
        }
    }

    pub fn yield_(election: ElectionId, proposer: ReplicaId) -> Self {
        Self::Proposal {
            kind: ProposalKind::Yield,
            election,
            proposer,
            vote_target: None,
        }
    }

    pub fn vote(election: ElectionId, proposer: ReplicaId, target: ReplicaId) -> Self {
        Self::Proposal {
            kind: ProposalKind::Vote,
            election,
            proposer,
            vote_target: Some(target),
        }
    }

    pub fn election(&self) -> Option<ElectionId> {
        match self {
            Self::Proposal { election, .. } | Self::ExecutionComplete { election, .. } | Self::Fence { election, .. } => {
                Some(*election)
            }
            _ => None,
        }
    }
}

impl DescribeBody for KernelCommand {
    fn body_kind(&self) -> &'static str {
        match self {
            Self::Proposal {
                kind: ProposalKind::Lead,
                ..
            } => "LEAD",
            Self::Proposal {
                kind: ProposalKind::Yield,
                ..
            } => "YIELD",
            Self::Proposal {
                kind: ProposalKind::Vote,
                ..
            } => "VOTE",
            Self::StateDelta { .. } => "state_delta",
            Self::LargeObjectPointer { .. } => "large_object_pointer",
            Self::ExecutionComplete { .. } => "execution_complete",
            Self::Fence { .. } => "fence",
        }
    }

    fn election_id(&self) -> Option<String> {
        self.election().map(|e| e.to_string())
    }
}

/// How the scheduler delivers a request to one replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Designation {
    /// Take part in the election; propose LEAD if GPUs are available.
    Execute,
    /// Yield request: always propose YIELD.
    Yield,
    /// Pre-selected by the scheduler; execute without an election.
    Executor,
    /// Another replica was pre-selected; do nothing until it completes.
    Standby,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExecuteRequest {
    pub election: ElectionId,
    pub submit_time: Millis,
    pub duration_ms: Millis,
    pub gpus: u32,
    pub designation: Designation,
}

#[cfg(test)]
mod tests;

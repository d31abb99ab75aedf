use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::{ElectionId, ProposalKind, ReplicaId, REPLICAS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome", content = "replica", rename_all = "snake_case")]
pub enum Outcome {
    Pending,
    Winner(ReplicaId),
    FailedAllYield,
}

/// What a replica must do after feeding a committed proposal to the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElectionEvent {
    /// The first LEAD committed; every replica votes for its proposer.
    CastVote(ReplicaId),
    Resolved(Outcome),
}

/// Election state derived purely from the committed log, so every replica
/// that has applied the same prefix computes the same outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ElectionState {
    pub id: ElectionId,
    proposals: BTreeMap<ReplicaId, ProposalKind>,
    commit_order: Vec<(ReplicaId, ProposalKind)>,
    first_committed_lead: Option<ReplicaId>,
    votes: BTreeSet<ReplicaId>,
    outcome: Outcome,
    closed: bool,
}

impl ElectionState {
    pub fn new(id: ElectionId) -> Self {
        Self {
            id,
            proposals: BTreeMap::new(),
            commit_order: Vec::new(),
            first_committed_lead: None,
            votes: BTreeSet::new(),
            outcome: Outcome::Pending,
            closed: false,
        }
    }

    pub fn outcome(&self) -> Outcome {
        self.outcome
    }

    pub fn first_committed_lead(&self) -> Option<ReplicaId> {
        self.first_committed_lead
    }

    pub fn commit_order(&self) -> &[(ReplicaId, ProposalKind)] {
        &self.commit_order
    }

    pub fn votes(&self) -> &BTreeSet<ReplicaId> {
        &self.votes
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    /// Feed one committed proposal. Duplicates and anything arriving after
    /// the election closed are ignored.
    pub fn on_commit(
        &mut self,
        kind: ProposalKind,
        proposer: ReplicaId,
        vote_target: Option<ReplicaId>,
    ) -> Option<ElectionEvent> {
        if self.closed {
            return None;
        }
        match kind {
            ProposalKind::Lead | ProposalKind::Yield => {
                if self.proposals.contains_key(&proposer) {
                    return None;
                }
                self.proposals.insert(proposer, kind);
                self.commit_order.push((proposer, kind));
                if kind == ProposalKind::Lead && self.first_committed_lead.is_none() {
                    self.first_committed_lead = Some(proposer);
                    return Some(ElectionEvent::CastVote(proposer));
                }
                let yields = self.proposals.values().filter(|k| **k == ProposalKind::Yield).count();
                if self.first_committed_lead.is_none() && yields >= REPLICAS {
                    self.outcome = Outcome::FailedAllYield;
                    return Some(ElectionEvent::Resolved(self.outcome));
                }
                None
            }
            ProposalKind::Vote => {
                let target = vote_target?;
                // Votes are identical by construction; the first one decides.
                if Some(target) != self.first_committed_lead || !self.votes.insert(proposer) {
                    return None;
                }
                self.commit_order.push((proposer, kind));
                if self.outcome == Outcome::Pending {
                    self.outcome = Outcome::Winner(target);
                    return Some(ElectionEvent::Resolved(self.outcome));
                }
                None
            }
        }
    }

    /// Outcome of a committed sequence of LEAD/YIELD proposals, assuming
    /// every replica votes once the first LEAD commits.
    pub fn resolve(id: ElectionId, order: &[(ReplicaId, ProposalKind)]) -> Outcome {
        let mut st = Self::new(id);
        for &(proposer, kind) in order {
            if let Some(ElectionEvent::CastVote(target)) = st.on_commit(kind, proposer, None) {
                st.on_commit(ProposalKind::Vote, proposer, Some(target));
            }
        }
        st.outcome
    }
}

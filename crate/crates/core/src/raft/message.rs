use serde::Serialize;

use super::{LogIndex, NodeId, Term};

/// Identifies one proposal by the node that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ProposalId {
    pub node: NodeId,
    pub seq: u64,
}

/// Single-server membership change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MembershipChange {
    Add(NodeId),
    Remove(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum EntryPayload<C> {
    /// Appended by every new leader so entries of earlier terms can commit.
    Noop,
    Command(C),
    Membership(MembershipChange),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Entry<C> {
    pub term: Term,
    pub index: LogIndex,
    pub origin: Option<ProposalId>,
    pub payload: EntryPayload<C>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message<C> {
    RequestVote {
        term: Term,
        candidate: NodeId,
        last_log_index: LogIndex,
        last_log_term: Term,
    },
    RequestVoteResponse {
        term: Term,
        granted: bool,
    },
    AppendEntries {
        term: Term,
        leader: NodeId,
        prev_log_index: LogIndex,
        prev_log_term: Term,
        entries: Vec<Entry<C>>,
        leader_commit: LogIndex,
    },
    AppendEntriesResponse {
        term: Term,
        success: bool,
        /// On success: highest index known to match the leader.
        match_index: LogIndex,
        /// On failure: where the leader should retry from.
        hint_index: LogIndex,
    },
    /// A follower relays a proposal to the leader it knows about.
    Forward {
        proposal: ProposalId,
        payload: EntryPayload<C>,
    },
    /// The leader tells the proposer where its proposal landed.
    ForwardAck {
        proposal: ProposalId,
        index: LogIndex,
        term: Term,
    },
}

impl<C> Message<C> {
    pub fn term(&self) -> Option<Term> {
        match self {
            Message::RequestVote { term, .. }
            | Message::RequestVoteResponse { term, .. }
            | Message::AppendEntries { term, .. }
            | Message::AppendEntriesResponse { term, .. } => Some(*term),
            Message::Forward { .. } | Message::ForwardAck { .. } => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Message::RequestVote { .. } => "request_vote",
            Message::RequestVoteResponse { .. } => "request_vote_response",
            Message::AppendEntries { .. } => "append_entries",
            Message::AppendEntriesResponse { .. } => "append_entries_response",
            Message::Forward { .. } => "forward",
            Message::ForwardAck { .. } => "forward_ack",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope<C> {
    pub from: NodeId,
    pub to: NodeId,
    pub msg: Message<C>,
}

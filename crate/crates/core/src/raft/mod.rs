//! Compact Raft: leader election, log replication, commitment and
//! single-server membership changes. Nodes are pure state machines; a driver
//! moves messages between them (see [`RaftNet`] for the test harness).

mod message;
mod monitor;
mod net;
mod node;

pub use message::{Entry, EntryPayload, Envelope, MembershipChange, Message, ProposalId};
pub use monitor::{SafetyMonitor, SafetyViolation};
pub use net::{NetConfig, RaftNet};
pub use node::{MembershipStatus, ProposalStatus, RaftConfig, RaftNode, Ready, Role};

use std::io::Write;

use serde::Serialize;

pub type NodeId = u64;
pub type Term = u64;
pub type LogIndex = u64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RaftError {
    #[error("not the leader (hint: {leader_hint:?})")]
    NotLeader { leader_hint: Option<NodeId> },
    #[error("remove and add name the same node {0}")]
    SameNode(NodeId),
    #[error("another membership change is still in progress")]
    MembershipChangeInProgress,
    #[error("no live quorum")]
    NoQuorum,
}

/// Labels a command for the log dump.
pub trait DescribeBody {
    fn body_kind(&self) -> &'static str;
    fn election_id(&self) -> Option<String> {
        None
    }
}

impl DescribeBody for u64 {
    fn body_kind(&self) -> &'static str {
        "command"
    }
}

#[derive(Serialize)]
struct DumpLine<'a> {
    index: LogIndex,
    term: Term,
    body_kind: &'a str,
    election_id: Option<String>,
}

/// Write a node's log as newline-delimited JSON, one entry per line.
pub fn dump_log<C: DescribeBody, W: Write>(entries: &[Entry<C>], mut out: W) -> std::io::Result<()> {
    for e in entries {
        let (body_kind, election_id) = match &e.payload {
            EntryPayload::Noop => ("noop", None),
            EntryPayload::Membership(MembershipChange::Add(_)) => ("membership_add", None),
            EntryPayload::Membership(MembershipChange::Remove(_)) => ("membership_remove", None),
            EntryPayload::Command(c) => (c.body_kind(), c.election_id()),
        };
        let line = DumpLine {
            index: e.index,
            term: e.term,
            body_kind,
            election_id,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

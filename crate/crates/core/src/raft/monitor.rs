use std::collections::BTreeMap;

use super::message::Entry;
use super::node::{RaftNode, Role};
use super::{LogIndex, NodeId, Term};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SafetyViolation {
    #[error("two leaders in term {term}: {first} and {second}")]
    ElectionSafety { term: Term, first: NodeId, second: NodeId },
    #[error("log matching broken at index {index} term {term} (node {node})")]
    LogMatching { node: NodeId, index: LogIndex, term: Term },
    #[error("node {node} applied a different entry at index {index}")]
    StateMachineSafety { node: NodeId, index: LogIndex },
    #[error("node {node}: commit {commit} beyond last index {last}")]
    CommitBeyondLog { node: NodeId, commit: LogIndex, last: LogIndex },
}

/// Cross-node checker for the core Raft safety properties. Feed it every
/// node after each step and every applied entry as it is surfaced.
#[derive(Debug, Clone)]
pub struct SafetyMonitor<C> {
    leaders: BTreeMap<Term, NodeId>,
    /// (index, term) -> (entry, term of the previous entry).
    seen: BTreeMap<(LogIndex, Term), (Entry<C>, Term)>,
    applied_reference: Vec<Entry<C>>,
    applied_len: BTreeMap<NodeId, usize>,
}

impl<C> Default for SafetyMonitor<C> {
    fn default() -> Self {
        Self {
            leaders: BTreeMap::new(),
            seen: BTreeMap::new(),
            applied_reference: Vec::new(),
            applied_len: BTreeMap::new(),
        }
    }
}

impl<C: Clone + PartialEq> SafetyMonitor<C> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaders(&self) -> &BTreeMap<Term, NodeId> {
        &self.leaders
    }

    /// The longest applied sequence observed at any node.
    pub fn applied(&self) -> &[Entry<C>] {
        &self.applied_reference
    }

    pub fn observe_node(&mut self, node: &RaftNode<C>) -> Result<(), SafetyViolation> {
        if node.commit_index() > node.last_index() {
            return Err(SafetyViolation::CommitBeyondLog {
                node: node.id(),
                commit: node.commit_index(),
                last: node.last_index(),
            });
        }
        if node.role() == Role::Leader {
            let term = node.term();
            match self.leaders.get(&term) {
                Some(&other) if other != node.id() => {
                    return Err(SafetyViolation::ElectionSafety {
                        term,
                        first: other,
                        second: node.id(),
                    })
                }
                Some(_) => {}
                None => {
                    self.leaders.insert(term, node.id());
                }
            }
        }
        // Two logs agree up to an (index, term) iff every such pair maps to
        // one entry and one predecessor term across all nodes.
        let mut prev_term = 0;
        for e in node.log() {
            match self.seen.get(&(e.index, e.term)) {
                Some((entry, pt)) => {
                    if entry != e || *pt != prev_term {
                        return Err(SafetyViolation::LogMatching {
                            node: node.id(),
                            index: e.index,
                            term: e.term,
                        });
                    }
                }
                None => {
                    self.seen.insert((e.index, e.term), (e.clone(), prev_term));
                }
            }
            prev_term = e.term;
        }
        Ok(())
    }

    pub fn observe_applied(&mut self, node: NodeId, entries: &[Entry<C>]) -> Result<(), SafetyViolation> {
        let len = self.applied_len.entry(node).or_insert(0);
        for e in entries {
            let pos = *len;
            if pos < self.applied_reference.len() {
                if self.applied_reference[pos] != *e {
                    return Err(SafetyViolation::StateMachineSafety { node, index: e.index });
                }
            } else {
                self.applied_reference.push(e.clone());
            }
            *len += 1;
        }
        Ok(())
    }
}

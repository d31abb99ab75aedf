use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::message::{Entry, EntryPayload, Envelope, MembershipChange, Message, ProposalId};
use super::{LogIndex, NodeId, RaftError, Term};
use crate::sim::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Follower,
    Candidate,
    Leader,
}

/// Timer settings in ticks. The defaults assume a 10 ms tick: election
/// timeout uniform in [150, 300] ms, heartbeat every 50 ms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RaftConfig {
    pub election_timeout_min_ticks: u32,
    pub election_timeout_max_ticks: u32,
    pub heartbeat_ticks: u32,
    pub max_entries_per_append: usize,
}

impl Default for RaftConfig {
    fn default() -> Self {
        Self {
            election_timeout_min_ticks: 15,
            election_timeout_max_ticks: 30,
            heartbeat_ticks: 5,
            max_entries_per_append: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalStatus {
    /// Sent or buffered; no leader has acknowledged it yet.
    Pending,
    /// A leader placed it at `(index, term)`; not yet committed.
    Appended { index: LogIndex, term: Term },
    Committed { index: LogIndex },
    /// The slot it was appended to committed with a different entry.
    Superseded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MembershipStatus {
    InProgress,
    Committed,
    Failed,
}

/// Replace-one-member request tracked by the leader that accepted it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PendingReplace {
    remove: NodeId,
    add: NodeId,
    term: Term,
}

/// Output drained by the driver after each call into the node.
#[derive(Debug, Clone, PartialEq)]
pub struct Ready<C> {
    pub messages: Vec<Envelope<C>>,
    pub committed: Vec<Entry<C>>,
    pub proposals: Vec<(ProposalId, ProposalStatus)>,
}

impl<C> Default for Ready<C> {
    fn default() -> Self {
        Self {
            messages: Vec::new(),
            committed: Vec::new(),
            proposals: Vec::new(),
        }
    }
}

impl<C> Ready<C> {
    pub fn is_empty(&self) -> bool {
        self.messages.is_empty() && self.committed.is_empty() && self.proposals.is_empty()
    }
}

/// One Raft participant. Pure state machine: no I/O, no clock. The driver
/// delivers messages with [`RaftNode::step`], advances time with
/// [`RaftNode::tick`] and drains [`RaftNode::take_ready`].
#[derive(Debug, Clone)]
pub struct RaftNode<C> {
    id: NodeId,
    config: RaftConfig,
    rng: RngStream,

    current_term: Term,
    voted_for: Option<NodeId>,
    role: Role,
    leader_hint: Option<NodeId>,

    log: Vec<Entry<C>>,
    commit_index: LogIndex,
    last_applied: LogIndex,

    initial_voters: BTreeSet<NodeId>,
    voters: BTreeSet<NodeId>,
    origin_index: BTreeMap<ProposalId, LogIndex>,

    election_elapsed: u32,
    election_timeout: u32,
    heartbeat_elapsed: u32,
    votes: BTreeSet<NodeId>,

    next_index: BTreeMap<NodeId, LogIndex>,
    match_index: BTreeMap<NodeId, LogIndex>,

    next_proposal_seq: u64,
    buffered: Vec<(ProposalId, EntryPayload<C>)>,
    proposals: BTreeMap<ProposalId, ProposalStatus>,
    pending_replace: Option<PendingReplace>,
    replace_status: BTreeMap<(NodeId, NodeId), MembershipStatus>,

    ready: Ready<C>,
}

impl<C: Clone> RaftNode<C> {
    /// `initial_voters` is the bootstrap configuration shared by the whole
    /// group. A node added later is created with the same bootstrap set and
    /// learns its own membership by replaying the log.
    pub fn new(
        id: NodeId,
        initial_voters: impl IntoIterator<Item = NodeId>,
        config: RaftConfig,
        rng: RngStream,
    ) -> Self {
        let initial_voters: BTreeSet<NodeId> = initial_voters.into_iter().collect();
        let mut node = Self {
            id,
            config,
            rng,
            current_term: 0,
            voted_for: None,
            role: Role::Follower,
            leader_hint: None,
            log: Vec::new(),
            commit_index: 0,
            last_applied: 0,
            voters: initial_voters.clone(),
            initial_voters,
            origin_index: BTreeMap::new(),
            election_elapsed: 0,
            election_timeout: 0,
            heartbeat_elapsed: 0,
            votes: BTreeSet::new(),
            next_index: BTreeMap::new(),
            match_index: BTreeMap::new(),
            next_proposal_seq: 0,
            buffered: Vec::new(),
            proposals: BTreeMap::new(),
            pending_replace: None,
            replace_status: BTreeMap::new(),
            ready: Ready::default(),
        };
        node.reset_election_timer();
        node
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn term(&self) -> Term {
        self.current_term
    }

    pub fn voted_for(&self) -> Option<NodeId> {
        self.voted_for
    }

    pub fn leader_hint(&self) -> Option<NodeId> {
        self.leader_hint
    }

    pub fn commit_index(&self) -> LogIndex {
        self.commit_index
    }

    pub fn last_applied(&self) -> LogIndex {
        self.last_applied
    }

    pub fn log(&self) -> &[Entry<C>] {
        &self.log
    }

    pub fn voters(&self) -> &BTreeSet<NodeId> {
        &self.voters
    }

    pub fn is_voter(&self) -> bool {
        self.voters.contains(&self.id)
    }

    pub fn last_index(&self) -> LogIndex {
        self.log.len() as LogIndex
    }

    pub fn last_term(&self) -> Term {
        self.log.last().map(|e| e.term).unwrap_or(0)
    }

    fn term_at(&self, index: LogIndex) -> Option<Term> {
        if index == 0 {
            Some(0)
        } else {
            self.log.get(index as usize - 1).map(|e| e.term)
        }
    }

    pub fn entry(&self, index: LogIndex) -> Option<&Entry<C>> {
        if index == 0 {
            None
        } else {
            self.log.get(index as usize - 1)
        }
    }

    pub fn proposal_status(&self, id: ProposalId) -> Option<ProposalStatus> {
        self.proposals.get(&id).copied()
    }

    pub fn replace_status(&self, remove: NodeId, add: NodeId) -> Option<MembershipStatus> {
        self.replace_status.get(&(remove, add)).copied()
    }

    fn quorum(&self) -> usize {
        self.voters.len() / 2 + 1
    }

    fn reset_election_timer(&mut self) {
        self.election_elapsed = 0;
        let lo = self.config.election_timeout_min_ticks as u64;
        let hi = self.config.election_timeout_max_ticks.max(self.config.election_timeout_min_ticks) as u64;
        self.election_timeout = self.rng.range_inclusive(lo, hi) as u32;
    }

    fn send(&mut self, to: NodeId, msg: Message<C>) {
        self.ready.messages.push(Envelope {
            from: self.id,
            to,
            msg,
        });
    }

    pub fn take_ready(&mut self) -> Ready<C> {
        std::mem::take(&mut self.ready)
    }

    // ------------------------------------------------------------------
    // Proposals
    // ------------------------------------------------------------------

    /// Propose a command. Leaders append immediately; followers forward to
    /// the known leader or buffer until one is known.
    pub fn propose(&mut self, command: C) -> ProposalId {
        let id = ProposalId {
            node: self.id,
            seq: self.next_proposal_seq,
        };
        self.next_proposal_seq += 1;
        self.proposals.insert(id, ProposalStatus::Pending);
        self.submit(id, EntryPayload::Command(command));
        id
    }

    /// Re-send a proposal that has not committed. Safe to call repeatedly;
    /// the leader deduplicates by proposal id for entries still in its log.
    pub fn repropose(&mut self, id: ProposalId, command: C) {
        match self.proposals.get(&id) {
            Some(ProposalStatus::Committed { .. }) | None => {}
            Some(_) => {
                self.proposals.insert(id, ProposalStatus::Pending);
                self.submit(id, EntryPayload::Command(command));
            }
        }
    }

    fn submit(&mut self, id: ProposalId, payload: EntryPayload<C>) {
        match self.role {
            Role::Leader => {
                let (index, term) = self.leader_accept(id, payload);
                self.note_appended(id, index, term);
            }
            _ => match self.leader_hint {
                Some(leader) if leader != self.id => {
                    self.send(
                        leader,
                        Message::Forward {
                            proposal: id,
                            payload,
                        },
                    );
                }
                _ => {
                    self.buffered.retain(|(p, _)| *p != id);
                    self.buffered.push((id, payload));
                }
            },
        }
    }

    fn note_appended(&mut self, id: ProposalId, index: LogIndex, term: Term) {
        if let Some(status) = self.proposals.get_mut(&id) {
            if matches!(status, ProposalStatus::Pending) {
                *status = ProposalStatus::Appended { index, term };
                self.ready.proposals.push((id, *status));
            }
        }
    }

    /// Leader-side append with origin deduplication.
    fn leader_accept(&mut self, id: ProposalId, payload: EntryPayload<C>) -> (LogIndex, Term) {
        if let Some(&index) = self.origin_index.get(&id) {
            let term = self.term_at(index).expect("indexed entry exists");
            return (index, term);
        }
        let index = self.append_local(Some(id), payload);
        self.broadcast_append();
        (index, self.current_term)
    }

    fn append_local(&mut self, origin: Option<ProposalId>, payload: EntryPayload<C>) -> LogIndex {
        let index = self.last_index() + 1;
        if let EntryPayload::Membership(change) = &payload {
            apply_change(&mut self.voters, *change);
            self.on_membership_appended(*change);
        }
        if let Some(origin) = origin {
            self.origin_index.insert(origin, index);
        }
        self.log.push(Entry {
            term: self.current_term,
            index,
            origin,
            payload,
        });
        self.match_index.insert(self.id, index);
        index
    }

    fn on_membership_appended(&mut self, change: MembershipChange) {
        if self.role != Role::Leader {
            return;
        }
        if let MembershipChange::Add(node) = change {
            if node != self.id {
                self.next_index.insert(node, self.last_index() + 1);
                self.match_index.insert(node, 0);
            }
        }
    }

    fn has_uncommitted_membership(&self) -> bool {
        self.log[self.commit_index as usize..]
            .iter()
            .any(|e| matches!(e.payload, EntryPayload::Membership(_)))
    }

    /// Replace `remove` with `add` as two single-server changes (add first,
    /// then remove). Only the leader accepts the request; the returned
    /// status is tracked via [`RaftNode::replace_status`].
    pub fn reconfigure(&mut self, remove: NodeId, add: NodeId) -> Result<(), RaftError> {
        if remove == add {
            return Err(RaftError::SameNode(remove));
        }
        if self.role != Role::Leader {
            return Err(RaftError::NotLeader {
                leader_hint: self.leader_hint,
            });
        }
        if let Some(p) = self.pending_replace {
            if p.remove == remove && p.add == add {
                return Ok(());
            }
            return Err(RaftError::MembershipChangeInProgress);
        }
        if self.has_uncommitted_membership() {
            return Err(RaftError::MembershipChangeInProgress);
        }
        self.pending_replace = Some(PendingReplace {
            remove,
            add,
            term: self.current_term,
        });
        self.replace_status
            .insert((remove, add), MembershipStatus::InProgress);
        self.drive_replace();
        Ok(())
    }

    fn drive_replace(&mut self) {
        let Some(p) = self.pending_replace else { return };
        if self.role != Role::Leader || p.term != self.current_term {
            return;
        }
        if self.has_uncommitted_membership() {
            return;
        }
        // Add before remove: while the old member is still alive the group
        // keeps a live quorum through both steps.
        if !self.voters.contains(&p.add) {
            self.append_local(None, EntryPayload::Membership(MembershipChange::Add(p.add)));
            self.broadcast_append();
        } else if self.voters.contains(&p.remove) {
            self.append_local(None, EntryPayload::Membership(MembershipChange::Remove(p.remove)));
            self.broadcast_append();
        } else {
            self.pending_replace = None;
            self.replace_status
                .insert((p.remove, p.add), MembershipStatus::Committed);
        }
    }

    fn flush_buffered(&mut self) {
        if self.buffered.is_empty() {
            return;
        }
        let buffered = std::mem::take(&mut self.buffered);
        for (id, payload) in buffered {
            self.submit(id, payload);
        }
    }

    // ------------------------------------------------------------------
    // Time
    // ------------------------------------------------------------------

    pub fn tick(&mut self) {
        match self.role {
            Role::Leader => {
                self.heartbeat_elapsed += 1;
                if self.heartbeat_elapsed >= self.config.heartbeat_ticks {
                    self.heartbeat_elapsed = 0;
                    self.broadcast_append();
                }
            }
            Role::Follower | Role::Candidate => {
                if !self.may_campaign() {
                    return;
                }
                self.election_elapsed += 1;
                if self.election_elapsed >= self.election_timeout {
                    self.start_election();
                }
            }
        }
    }

    /// Start an election immediately, as if the timer had expired.
    pub fn campaign(&mut self) {
        if self.role != Role::Leader && self.may_campaign() {
            self.start_election();
        }
    }

    /// Voters campaign, and so does a server whose own removal is not yet
    /// committed: it may hold the only up-to-date log.
    fn may_campaign(&self) -> bool {
        self.is_voter()
            || self.log[self.commit_index as usize..]
                .iter()
                .any(|e| matches!(e.payload, EntryPayload::Membership(MembershipChange::Remove(n)) if n == self.id))
    }

    fn start_election(&mut self) {
        self.current_term += 1;
        self.role = Role::Candidate;
        self.voted_for = Some(self.id);
        self.leader_hint = None;
        self.votes.clear();
        self.votes.insert(self.id);
        self.reset_election_timer();
        if self.votes.iter().filter(|v| self.voters.contains(v)).count() >= self.quorum() {
            self.become_leader();
            return;
        }
        let (last_log_index, last_log_term) = (self.last_index(), self.last_term());
        let peers: Vec<NodeId> = self.voters.iter().copied().filter(|&n| n != self.id).collect();
        for peer in peers {
            self.send(
                peer,
                Message::RequestVote {
                    term: self.current_term,
                    candidate: self.id,
                    last_log_index,
                    last_log_term,
                },
            );
        }
    }

    fn become_follower(&mut self, term: Term, leader: Option<NodeId>) {
        if term > self.current_term {
            self.current_term = term;
            self.voted_for = None;
        }
        if self.role == Role::Leader {
            self.abandon_replace();
        }
        self.role = Role::Follower;
        self.leader_hint = leader;
        self.votes.clear();
    }

    fn abandon_replace(&mut self) {
        if let Some(p) = self.pending_replace.take() {
            self.replace_status
                .insert((p.remove, p.add), MembershipStatus::Failed);
        }
    }

    fn become_leader(&mut self) {
        self.role = Role::Leader;
        self.leader_hint = Some(self.id);
        self.heartbeat_elapsed = 0;
        self.next_index.clear();
        self.match_index.clear();
        let next = self.last_index() + 1;
        for &peer in &self.voters {
            if peer != self.id {
                self.next_index.insert(peer, next);
                self.match_index.insert(peer, 0);
            }
        }
        self.append_local(None, EntryPayload::Noop);
        self.flush_buffered();
        self.broadcast_append();
        self.maybe_advance_commit();
    }

    fn peers(&self) -> Vec<NodeId> {
        self.next_index
            .keys()
            .copied()
            .filter(|n| *n != self.id && self.voters.contains(n))
            .collect()
    }

    fn broadcast_append(&mut self) {
        if self.role != Role::Leader {
            return;
        }
        for peer in self.peers() {
            self.send_append(peer);
        }
    }

    fn send_append(&mut self, peer: NodeId) {
        let next = *self.next_index.get(&peer).unwrap_or(&(self.last_index() + 1));
        let prev_log_index = next.saturating_sub(1);
        let prev_log_term = self.term_at(prev_log_index).unwrap_or(0);
        let start = prev_log_index as usize;
        let end = (start + self.config.max_entries_per_append).min(self.log.len());
        let entries = self.log[start..end].to_vec();
        self.send(
            peer,
            Message::AppendEntries {
                term: self.current_term,
                leader: self.id,
                prev_log_index,
                prev_log_term,
                entries,
                leader_commit: self.commit_index,
            },
        );
    }

    // ------------------------------------------------------------------
    // Messages
    // ------------------------------------------------------------------

    pub fn step(&mut self, envelope: Envelope<C>) {
        let Envelope { from, to, msg } = envelope;
        debug_assert_eq!(to, self.id, "message routed to the wrong node");
        if let Some(term) = msg.term() {
            if term > self.current_term {
                let leader = match &msg {
                    Message::AppendEntries { leader, .. } => Some(*leader),
                    _ => None,
                };
                self.become_follower(term, leader);
            }
        }
        match msg {
            Message::RequestVote {
                term,
                candidate,
                last_log_index,
                last_log_term,
            } => self.on_request_vote(term, candidate, last_log_index, last_log_term),
            Message::RequestVoteResponse { term, granted } => {
                self.on_vote_response(from, term, granted)
            }
            Message::AppendEntries {
                term,
                leader,
                prev_log_index,
                prev_log_term,
                entries,
                leader_commit,
            } => self.on_append(term, leader, prev_log_index, prev_log_term, entries, leader_commit),
            Message::AppendEntriesResponse {
                term,
                success,
                match_index,
                hint_index,
            } => self.on_append_response(from, term, success, match_index, hint_index),
            Message::Forward { proposal, payload } => self.on_forward(proposal, payload),
            Message::ForwardAck {
                proposal,
                index,
                term,
            } => {
                if proposal.node == self.id {
                    self.note_appended(proposal, index, term);
                    self.check_superseded();
                }
            }
        }
    }

    fn on_request_vote(
        &mut self,
        term: Term,
        candidate: NodeId,
        last_log_index: LogIndex,
        last_log_term: Term,
    ) {
        let up_to_date = last_log_term > self.last_term()
            || (last_log_term == self.last_term() && last_log_index >= self.last_index());
        let granted = term == self.current_term
            && self.role != Role::Leader
            && self.voted_for.is_none_or(|v| v == candidate)
            && up_to_date;
        if granted {
            self.voted_for = Some(candidate);
            self.reset_election_timer();
        }
        self.send(
            candidate,
            Message::RequestVoteResponse {
                term: self.current_term,
                granted,
            },
        );
    }

    fn on_vote_response(&mut self, from: NodeId, term: Term, granted: bool) {
        if self.role != Role::Candidate || term != self.current_term || !granted {
            return;
        }
        if self.voters.contains(&from) {
            self.votes.insert(from);
        }
        let counted = self.votes.iter().filter(|v| self.voters.contains(v)).count();
        if counted >= self.quorum() {
            self.become_leader();
        }
    }

    fn on_append(
        &mut self,
        term: Term,
        leader: NodeId,
        prev_log_index: LogIndex,
        prev_log_term: Term,
        entries: Vec<Entry<C>>,
        leader_commit: LogIndex,
    ) {
        if term < self.current_term {
            self.send(
                leader,
                Message::AppendEntriesResponse {
                    term: self.current_term,
                    success: false,
                    match_index: 0,
                    hint_index: 0,
                },
            );
            return;
        }
        // Same term: a candidate concedes to the elected leader.
        if self.role != Role::Follower || self.leader_hint != Some(leader) {
            self.become_follower(term, Some(leader));
        }
        self.reset_election_timer();
        self.flush_buffered();

        match self.term_at(prev_log_index) {
            None => {
                let hint = self.last_index() + 1;
                self.send(
                    leader,
                    Message::AppendEntriesResponse {
                        term: self.current_term,
                        success: false,
                        match_index: 0,
                        hint_index: hint,
                    },
                );
                return;
            }
            Some(t) if t != prev_log_term => {
                // Back up to the first index of the conflicting term.
                let mut hint = prev_log_index;
                while hint > self.commit_index + 1 && self.term_at(hint - 1) == Some(t) {
                    hint -= 1;
                }
                self.send(
                    leader,
                    Message::AppendEntriesResponse {
                        term: self.current_term,
                        success: false,
                        match_index: 0,
                        hint_index: hint.max(1),
                    },
                );
                return;
            }
            Some(_) => {}
        }

        let last_new = prev_log_index + entries.len() as LogIndex;
        let mut truncated = false;
        for entry in entries {
            let idx = entry.index;
            match self.term_at(idx) {
                Some(t) if t == entry.term => continue,
                Some(_) => {
                    assert!(
                        idx > self.commit_index,
                        "node {} asked to truncate committed index {idx}",
                        self.id
                    );
                    self.log.truncate(idx as usize - 1);
                    truncated = true;
                    self.push_replicated(entry);
                }
                None => self.push_replicated(entry),
            }
        }
        if truncated {
            self.rebuild_derived_state();
        }
        if leader_commit > self.commit_index {
            let new_commit = leader_commit.min(last_new);
            if new_commit > self.commit_index {
                self.commit_to(new_commit);
            }
        }
        self.send(
            leader,
            Message::AppendEntriesResponse {
                term: self.current_term,
                success: true,
                match_index: last_new,
                hint_index: 0,
            },
        );
    }

    fn push_replicated(&mut self, entry: Entry<C>) {
        debug_assert_eq!(entry.index, self.last_index() + 1);
        if let EntryPayload::Membership(change) = &entry.payload {
            apply_change(&mut self.voters, *change);
        }
        if let Some(origin) = entry.origin {
            self.origin_index.insert(origin, entry.index);
        }
        self.log.push(entry);
    }

    fn rebuild_derived_state(&mut self) {
        self.voters = self.initial_voters.clone();
        self.origin_index.clear();
        for e in &self.log {
            if let EntryPayload::Membership(change) = &e.payload {
                apply_change(&mut self.voters, *change);
            }
            if let Some(origin) = e.origin {
                self.origin_index.insert(origin, e.index);
            }
        }
    }

    fn on_append_response(
        &mut self,
        from: NodeId,
        term: Term,
        success: bool,
        match_index: LogIndex,
        hint_index: LogIndex,
    ) {
        if self.role != Role::Leader || term != self.current_term {
            return;
        }
        if !self.next_index.contains_key(&from) {
            return;
        }
        if success {
            let m = self.match_index.entry(from).or_insert(0);
            if match_index > *m {
                *m = match_index;
            }
            let m = *m;
            self.next_index.insert(from, m + 1);
            self.maybe_advance_commit();
            if m < self.last_index() {
                self.send_append(from);
            }
        } else {
            let matched = *self.match_index.get(&from).unwrap_or(&0);
            let next = *self.next_index.get(&from).unwrap_or(&1);
            let retry = hint_index.min(next.saturating_sub(1)).max(matched + 1).max(1);
            self.next_index.insert(from, retry);
            self.send_append(from);
        }
    }

    fn on_forward(&mut self, proposal: ProposalId, payload: EntryPayload<C>) {
        match self.role {
            Role::Leader => {
                let (index, term) = self.leader_accept(proposal, payload);
                if proposal.node == self.id {
                    self.note_appended(proposal, index, term);
                } else {
                    self.send(
                        proposal.node,
                        Message::ForwardAck {
                            proposal,
                            index,
                            term,
                        },
                    );
                }
            }
            _ => {
                if let Some(leader) = self.leader_hint {
                    if leader != self.id {
                        self.send(leader, Message::Forward { proposal, payload });
                    }
                }
            }
        }
    }

    fn maybe_advance_commit(&mut self) {
        if self.role != Role::Leader {
            return;
        }
        let quorum = self.quorum();
        let mut n = self.last_index();
        while n > self.commit_index {
            if self.term_at(n) == Some(self.current_term) {
                let acks = self
                    .voters
                    .iter()
                    .filter(|v| {
                        if **v == self.id {
                            true
                        } else {
                            self.match_index.get(v).copied().unwrap_or(0) >= n
                        }
                    })
                    .count();
                if acks >= quorum {
                    self.commit_to(n);
                    self.broadcast_append();
                    break;
                }
            } else {
                break;
            }
            n -= 1;
        }
    }

    fn commit_to(&mut self, index: LogIndex) {
        debug_assert!(index <= self.last_index());
        self.commit_index = index;
        while self.last_applied < self.commit_index {
            self.last_applied += 1;
            let entry = self.log[self.last_applied as usize - 1].clone();
            if let Some(origin) = entry.origin {
                if let Some(status) = self.proposals.get_mut(&origin) {
                    if !matches!(status, ProposalStatus::Committed { .. }) {
                        *status = ProposalStatus::Committed { index: entry.index };
                        self.ready.proposals.push((origin, *status));
                    }
                }
            }
            self.ready.committed.push(entry);
        }
        self.check_superseded();
        if self.role == Role::Leader {
            self.drive_replace();
            if !self.voters.contains(&self.id) {
                // Committed our own removal; hand off.
                self.become_follower(self.current_term, None);
            }
        }
    }

    fn check_superseded(&mut self) {
        let commit = self.commit_index;
        let mut changed = Vec::new();
        for (id, status) in self.proposals.iter_mut() {
            if let ProposalStatus::Appended { index, term } = *status {
                if index <= commit {
                    let actual = self.log.get(index as usize - 1);
                    let same = actual.is_some_and(|e| e.term == term && e.origin == Some(*id));
                    if !same {
                        *status = ProposalStatus::Superseded;
                        changed.push((*id, *status));
                    }
                }
            }
        }
        self.ready.proposals.extend(changed);
    }
}

fn apply_change(voters: &mut BTreeSet<NodeId>, change: MembershipChange) {
    match change {
        MembershipChange::Add(n) => {
            voters.insert(n);
        }
        MembershipChange::Remove(n) => {
            voters.remove(&n);
        }
    }
}

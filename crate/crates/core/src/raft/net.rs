use std::collections::{BTreeMap, BTreeSet};

use super::message::{Entry, Envelope, ProposalId};
use super::monitor::{SafetyMonitor, SafetyViolation};
use super::node::{ProposalStatus, RaftConfig, RaftNode, Role};
use super::{NodeId, RaftError};
use crate::sim::{ComponentId, LinkModel, Millis, RngStream, Simulation, TraceEvent};

#[derive(Debug, Clone)]
pub struct NetConfig {
    pub tick_ms: Millis,
    pub link: LinkModel,
    /// Re-send uncommitted proposals this often.
    pub retry_ms: Millis,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            tick_ms: 10,
            link: LinkModel::reliable(1),
            retry_ms: 500,
        }
    }
}

#[derive(Debug, Clone)]
enum NetEvent<C> {
    Tick(NodeId),
    Deliver(Envelope<C>),
}

impl<C> TraceEvent for NetEvent<C> {
    fn kind(&self) -> &'static str {
        match self {
            NetEvent::Tick(_) => "tick",
            NetEvent::Deliver(env) => env.msg.kind(),
        }
    }
}

#[derive(Debug, Clone)]
struct Outstanding<C> {
    command: C,
    last_sent: Millis,
}

/// Drives a set of [`RaftNode`]s over a simulated lossy network and checks
/// the safety properties after every event.
pub struct RaftNet<C> {
    sim: Simulation<NetEvent<C>>,
    components: BTreeMap<NodeId, ComponentId>,
    nodes: BTreeMap<NodeId, RaftNode<C>>,
    initial_voters: Vec<NodeId>,
    crashed: BTreeSet<NodeId>,
    isolated: BTreeSet<NodeId>,
    blocked: BTreeSet<(NodeId, NodeId)>,
    raft_config: RaftConfig,
    net: NetConfig,
    seed: u64,
    link_rng: RngStream,
    monitor: SafetyMonitor<C>,
    applied: BTreeMap<NodeId, Vec<Entry<C>>>,
    outstanding: BTreeMap<ProposalId, Outstanding<C>>,
    statuses: BTreeMap<ProposalId, ProposalStatus>,
    delivered: u64,
    violation: Option<SafetyViolation>,
}

impl<C: Clone + PartialEq> RaftNet<C> {
    pub fn new(seed: u64, voters: &[NodeId], raft_config: RaftConfig, net: NetConfig) -> Self {
        Self::starting_at(0, seed, voters, raft_config, net)
    }

    /// Like [`RaftNet::new`] with the clock starting at `start`.
    pub fn starting_at(start: Millis, seed: u64, voters: &[NodeId], raft_config: RaftConfig, net: NetConfig) -> Self {
        let mut this = Self {
            sim: Simulation::new(),
            components: BTreeMap::new(),
            nodes: BTreeMap::new(),
            initial_voters: voters.to_vec(),
            crashed: BTreeSet::new(),
            isolated: BTreeSet::new(),
            blocked: BTreeSet::new(),
            raft_config,
            net,
            seed,
            link_rng: RngStream::new(seed, "raftnet/link"),
            monitor: SafetyMonitor::new(),
            applied: BTreeMap::new(),
            outstanding: BTreeMap::new(),
            statuses: BTreeMap::new(),
            delivered: 0,
            violation: None,
        };
        this.sim.advance_to(start);
        for &id in voters {
            this.add_node(id);
        }
        this
    }

    /// Start a node with the bootstrap configuration and an empty log.
    pub fn add_node(&mut self, id: NodeId) {
        assert!(!self.nodes.contains_key(&id), "node {id} already exists");
        let rng = RngStream::new(self.seed, format!("raftnet/node/{id}"));
        let node = RaftNode::new(id, self.initial_voters.iter().copied(), self.raft_config.clone(), rng);
        let comp = self.sim.register(format!("raft-{id}"));
        self.components.insert(id, comp);
        self.nodes.insert(id, node);
        self.applied.insert(id, Vec::new());
        let offset = id % self.net.tick_ms.max(1);
        self.sim.schedule_in(offset + 1, comp, NetEvent::Tick(id));
    }

    pub fn now(&self) -> Millis {
        self.sim.now()
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    pub fn node(&self, id: NodeId) -> &RaftNode<C> {
        &self.nodes[&id]
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.keys().copied().collect()
    }

    pub fn applied(&self, id: NodeId) -> &[Entry<C>] {
        &self.applied[&id]
    }

    pub fn monitor(&self) -> &SafetyMonitor<C> {
        &self.monitor
    }

    pub fn set_link(&mut self, link: LinkModel) {
        self.net.link = link;
    }

    /// Crash-stop: the node never runs again.
    pub fn crash(&mut self, id: NodeId) {
        self.crashed.insert(id);
    }

    pub fn is_live(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id) && !self.crashed.contains(&id)
    }

    /// Cut a node off from the network without stopping it.
    pub fn isolate(&mut self, id: NodeId) {
        self.isolated.insert(id);
    }

    pub fn heal(&mut self, id: NodeId) {
        self.isolated.remove(&id);
    }

    /// Live leader with the highest term, if any.
    pub fn leader(&self) -> Option<NodeId> {
        self.nodes
            .values()
            .filter(|n| !self.crashed.contains(&n.id()) && n.role() == Role::Leader)
            .max_by_key(|n| n.term())
            .map(|n| n.id())
    }

    pub fn status(&self, id: ProposalId) -> Option<ProposalStatus> {
        self.statuses.get(&id).copied()
    }

    /// Propose at `at`; the harness re-sends until it commits.
    pub fn propose(&mut self, at: NodeId, command: C) -> ProposalId {
        let node = self.nodes.get_mut(&at).expect("unknown node");
        let id = node.propose(command.clone());
        self.statuses.insert(id, ProposalStatus::Pending);
        self.outstanding.insert(
            id,
            Outstanding {
                command,
                last_sent: self.sim.now(),
            },
        );
        self.flush(at);
        id
    }

    /// Propose without automatic retries.
    pub fn propose_once(&mut self, at: NodeId, command: C) -> ProposalId {
        let node = self.nodes.get_mut(&at).expect("unknown node");
        let id = node.propose(command);
        self.statuses.insert(id, ProposalStatus::Pending);
        self.flush(at);
        id
    }

    pub fn reconfigure(&mut self, remove: NodeId, add: NodeId) -> Result<NodeId, RaftError> {
        if remove == add {
            return Err(RaftError::SameNode(remove));
        }
        let leader = self.leader().ok_or(RaftError::NotLeader { leader_hint: None })?;
        self.nodes.get_mut(&leader).unwrap().reconfigure(remove, add)?;
        self.flush(leader);
        Ok(leader)
    }

    fn flush(&mut self, id: NodeId) {
        let ready = self.nodes.get_mut(&id).unwrap().take_ready();
        for env in ready.messages {
            self.transmit(env);
        }
        if !ready.committed.is_empty() {
            self.applied.get_mut(&id).unwrap().extend(ready.committed.iter().cloned());
        }
        for (pid, status) in ready.proposals {
            if pid.node == id {
                self.statuses.insert(pid, status);
                if matches!(status, ProposalStatus::Committed { .. }) {
                    self.outstanding.remove(&pid);
                }
            }
        }
        if let Err(v) = self.monitor.observe_applied(id, &ready.committed) {
            self.violation.get_or_insert(v);
        }
    }

    fn transmit(&mut self, env: Envelope<C>) {
        if self.isolated.contains(&env.from)
            || self.isolated.contains(&env.to)
            || self.blocked.contains(&(env.from, env.to))
        {
            return;
        }
        let Some(&target) = self.components.get(&env.to) else { return };
        self.sim.send(target, NetEvent::Deliver(env), &self.net.link, &mut self.link_rng);
    }

    /// Process one event. Returns false when the queue is empty.
    pub fn step(&mut self) -> Result<bool, SafetyViolation> {
        let Some(ev) = self.sim.pop_until(Millis::MAX) else {
            return Ok(false);
        };
        let id = match ev.payload {
            NetEvent::Tick(id) => {
                if self.crashed.contains(&id) {
                    return Ok(true);
                }
                self.nodes.get_mut(&id).unwrap().tick();
                self.retry_outstanding(id);
                let comp = self.components[&id];
                self.sim.schedule_in(self.net.tick_ms, comp, NetEvent::Tick(id));
                id
            }
            NetEvent::Deliver(env) => {
                let id = env.to;
                if self.crashed.contains(&id) || self.isolated.contains(&id) || self.isolated.contains(&env.from)
                {
                    return Ok(true);
                }
                self.delivered += 1;
                self.nodes.get_mut(&id).unwrap().step(env);
                id
            }
        };
        self.flush(id);
        if let Some(v) = self.violation.take() {
            return Err(v);
        }
        self.monitor.observe_node(&self.nodes[&id])?;
        Ok(true)
    }

    fn retry_outstanding(&mut self, id: NodeId) {
        let now = self.sim.now();
        let due: Vec<ProposalId> = self
            .outstanding
            .iter()
            .filter(|(pid, o)| pid.node == id && o.last_sent + self.net.retry_ms <= now)
            .map(|(pid, _)| *pid)
            .collect();
        for pid in due {
            let o = self.outstanding.get_mut(&pid).unwrap();
            o.last_sent = now;
            let cmd = o.command.clone();
            self.nodes.get_mut(&id).unwrap().repropose(pid, cmd);
        }
    }

    /// Fire time of the next queued event.
    pub fn next_time(&mut self) -> Option<Millis> {
        self.sim.peek_time()
    }

    /// Move the clock forward without processing events. `t` must not pass
    /// the next queued event.
    pub fn advance_clock(&mut self, t: Millis) {
        debug_assert!(self.sim.peek_time().is_none_or(|n| n >= t));
        self.sim.advance_to(t);
    }

    pub fn run_for(&mut self, ms: Millis) -> Result<(), SafetyViolation> {
        let end = self.sim.now() + ms;
        while self.sim.peek_time().is_some_and(|t| t <= end) {
            self.step()?;
        }
        self.sim.advance_to(end);
        Ok(())
    }

    /// Run until `pred` holds or `max_ms` elapses. Returns whether it held.
    pub fn run_until<F>(&mut self, max_ms: Millis, mut pred: F) -> Result<bool, SafetyViolation>
    where
        F: FnMut(&Self) -> bool,
    {
        let end = self.sim.now() + max_ms;
        loop {
            if pred(self) {
                return Ok(true);
            }
            match self.sim.peek_time() {
                Some(t) if t <= end => {
                    self.step()?;
                }
                _ => return Ok(false),
            }
        }
    }

    pub fn run_until_leader(&mut self, max_ms: Millis) -> Result<Option<NodeId>, SafetyViolation> {
        self.run_until(max_ms, |n| n.leader().is_some())?;
        Ok(self.leader())
    }

    /// Retried proposals that have not committed yet.
    pub fn pending_proposals(&self) -> Vec<ProposalId> {
        self.outstanding.keys().copied().collect()
    }

    /// All outstanding (retried) proposals committed.
    pub fn quiescent(&self) -> bool {
        self.outstanding.is_empty()
    }

    /// Force `id` to start an election now.
    pub fn campaign(&mut self, id: NodeId) {
        self.nodes.get_mut(&id).unwrap().campaign();
        self.flush(id);
    }

    /// Drop every message sent from `from` to `to` until unblocked.
    pub fn block(&mut self, from: NodeId, to: NodeId) {
        self.blocked.insert((from, to));
    }

    pub fn unblock_all(&mut self) {
        self.blocked.clear();
    }
}

//! The replicated-kernel policy: three replicas per kernel, GPUs bound per
//! task by election, migration when no replica can run a task.

use std::collections::BTreeSet;

use super::{Ev, Inflight, Platform, PlatformError, ReplicaSlot, SlotState};
use crate::kernel::{Designation, ElectionId, KernelGroup, Outcome, ReplicaId};
use crate::policies::SrLimitMode;
use crate::scheduler::{
    choose_target, choose_victim, designate, find_candidates, place_kernel, MigrationOutcome,
    MigrationRecord, PlacementDecision, SchedulerEvent,
};
use crate::sim::Millis;

impl Platform {
    fn placement(&self, kid: u64, gpus: u32) -> Result<PlacementDecision, usize> {
        match self.cfg.policy.sr_limit {
            SrLimitMode::Dynamic { floor } => place_kernel(&self.cluster, kid, gpus, floor),
            SrLimitMode::Fixed { limit } => {
                let (cands, rejected) = find_candidates(&self.cluster, gpus, limit, &BTreeSet::new());
                let r = self.cluster.replicas() as usize;
                if cands.len() < r {
                    return Err(r - cands.len());
                }
                Ok(PlacementDecision {
                    kernel_id: kid,
                    chosen: cands[..r].to_vec(),
                    rejected,
                    sr_limit: limit,
                })
            }
        }
    }

    /// Place and provision a kernel, or defer it until hosts are added.
    pub(super) fn start_kernel(&mut self, s: usize, t: Millis) -> Result<(), PlatformError> {
        if !self.try_place(s, t)? {
            self.slots[s].state = SlotState::Deferred;
            self.deferred.push_back(s);
        }
        Ok(())
    }

    fn try_place(&mut self, s: usize, t: Millis) -> Result<bool, PlatformError> {
        let kid = self.sessions[s].session_id;
        let req = self.sessions[s].request;
        let decision = match self.placement(kid, req.gpus) {
            Ok(d) => d,
            Err(missing) => {
                if !self.slots[s].deferred_logged {
                    self.slots[s].deferred_logged = true;
                    self.log.push(SchedulerEvent::PlacementDeferred {
                        time_ms: t,
                        kernel_id: kid,
                        missing_hosts: missing,
                    });
                }
                self.request_hosts(missing, t)?;
                return Ok(false);
            }
        };
        for &h in &decision.chosen {
            if req.gpus > 0 && self.cluster.sr_after(h, req.gpus).unwrap_or(f64::INFINITY) > decision.sr_limit + 1e-12 {
                return Err(self.invariant(format!("placement on host {h} exceeds the SR limit")));
            }
        }
        let group = KernelGroup::new(kid, self.cfg.seed, self.cfg.kernel.clone())?;
        let boot = group.now();
        let mut ready = 0;
        let members: Vec<ReplicaId> = group.members().to_vec();
        for (&r, &h) in members.iter().zip(&decision.chosen) {
            self.cluster.subscribe(h, (kid, r), req)?;
            let (ms, _) = self.cluster.provision_container(h, true)?;
            ready = ready.max(ms);
            self.slots[s].replicas.insert(r, ReplicaSlot { host: h });
        }
        self.log.push(SchedulerEvent::Placement {
            time_ms: t,
            decision,
        });
        let slot = &mut self.slots[s];
        slot.group = Some(group);
        slot.state = SlotState::Provisioning;
        self.at(t + ready + boot, Ev::KernelReady(s));
        Ok(true)
    }

    pub(super) fn retry_deferred(&mut self, t: Millis) -> Result<(), PlatformError> {
        while let Some(&s) = self.deferred.front() {
            if self.slots[s].state != SlotState::Deferred {
                self.deferred.pop_front();
                continue;
            }
            if !self.try_place(s, t)? {
                break;
            }
            self.deferred.pop_front();
        }
        Ok(())
    }

    fn hosts_of(&self, s: usize) -> Vec<(ReplicaId, u32)> {
        let g = self.slots[s].group.as_ref().unwrap();
        g.live_members()
            .into_iter()
            .map(|r| (r, self.slots[s].replicas[&r].host))
            .collect()
    }

    /// Route one request through the global and local schedulers and run
    /// the executor election.
    pub(super) fn route(&mut self, s: usize, e: usize, submit: Millis, t: Millis, queued: bool) -> Result<(), PlatformError> {
        let ev = self.sessions[s].events[e].clone();
        let kid = self.sessions[s].session_id;
        let gs = self.cfg.latency.gs_processing.clone();
        let ls = self.cfg.latency.ls_processing.clone();
        let pre = self.cfg.latency.replica_preprocessing.clone();
        let mut d = [0; 9];
        d[0] = (t - submit) + self.sample(&gs);
        d[1] = self.hop();
        d[2] = self.sample(&ls);
        let t_route = submit + d[0] + d[1] + d[2];

        let avail: Vec<(ReplicaId, bool)> = self
            .hosts_of(s)
            .into_iter()
            .map(|(r, h)| {
                let ok = self.cluster.host(h).is_some_and(|x| x.is_ready() && x.free_gpus() >= ev.gpus);
                (r, ok)
            })
            .collect();
        let designations = designate(&avail);
        let election = ElectionId::new(kid, e as u64 + 1);
        let group = self.slots[s].group.as_mut().unwrap();
        let report = group.submit(election, t_route, ev.duration_ms, ev.gpus, &designations)?;
        d[3] = report.steps.delivered.unwrap_or(0);
        d[4] = self.sample(&pre);
        d[5] = report.elapsed_ms.saturating_sub(d[3]);
        let mut inf = Inflight {
            submit_ms: submit,
            d,
            failed_at: 0,
            election: Some(election),
            executor: None,
            host: None,
            grant: None,
            migrated: false,
            waited: queued,
            attempts: 0,
            post_critical: false,
        };
        match (report.executor, report.outcome) {
            (Some(r), _) => {
                let host = self.slots[s].replicas[&r].host;
                inf.executor = Some(r);
                inf.host = Some(host);
                self.start_execution(s, e, inf, t)
            }
            (None, Outcome::FailedAllYield) => {
                inf.failed_at = submit + d[..6].iter().sum::<Millis>();
                self.inflight.insert((s, e), inf);
                self.migrate(s, e, t)
            }
            (None, _) => {
                self.record_error();
                self.slots[s].busy = false;
                self.next_queued(s, t)
            }
        }
    }

    /// Bind GPUs on the executor's host and schedule the end of execution.
    fn start_execution(&mut self, s: usize, e: usize, mut inf: Inflight, t: Millis) -> Result<(), PlatformError> {
        let kid = self.sessions[s].session_id;
        let ev = &self.sessions[s].events[e];
        let (gpus, duration) = (ev.gpus, ev.duration_ms);
        let mut req = self.sessions[s].request;
        req.gpus = gpus;
        let host = inf.host.unwrap();
        inf.grant = self.commit(host, (kid, inf.executor.unwrap()), req)?;
        self.standby_replicas -= 1;
        self.exec_gpus += gpus as u64;
        self.active_trainings += 1;
        let k = &self.cfg.kernel;
        inf.d[6] = k.param_load_ms;
        inf.d[7] = duration + k.copy_ms;
        let exec_end = inf.submit_ms + inf.d[..8].iter().sum::<Millis>();
        self.inflight.insert((s, e), inf);
        self.at(exec_end.max(t), Ev::ExecEnd(s, e));
        Ok(())
    }

    /// Move one replica to a host that can run the task and resubmit there.
    pub(super) fn migrate(&mut self, s: usize, e: usize, t: Millis) -> Result<(), PlatformError> {
        let kid = self.sessions[s].session_id;
        let req = self.sessions[s].request;
        let gpus = self.sessions[s].events[e].gpus;
        let placed = self.hosts_of(s);
        let exclude: BTreeSet<u32> = placed.iter().map(|p| p.1).collect();
        let mut inf = self.inflight.remove(&(s, e)).expect("migrating request is in flight");
        inf.attempts += 1;
        let Some((victim, source)) = choose_victim(&placed, &self.cluster) else {
            return Err(self.invariant(format!("kernel {kid} has no live replica")));
        };
        let Some(target) = choose_target(&self.cluster, gpus, &exclude) else {
            if inf.attempts > self.migration.retries {
                return self.abort_migration(s, inf, victim, source, t);
            }
            self.request_hosts(1, t)?;
            self.inflight.insert((s, e), inf);
            let at = t + self.migration.retry_interval_ms;
            self.at(at, Ev::MigrationRetry(s, e));
            return Ok(());
        };

        let state_bytes: u64 = self.slots[s].group.as_ref().unwrap().objects().values().map(|v| v.0).sum();
        let persist = self.store.sample_write(state_bytes.max(1));
        let (provision, used_prewarm) = self.cluster.provision_container(target, true)?;
        let group = self.slots[s].group.as_mut().unwrap();
        let (new, replace_ms) = group.replace(victim)?;
        let keys: Vec<String> = group.objects().keys().cloned().collect();
        self.cluster.unsubscribe(source, (kid, victim))?;
        self.cluster.subscribe(target, (kid, new), req)?;
        self.slots[s].replicas.remove(&victim);
        self.slots[s].replicas.insert(new, ReplicaSlot { host: target });
        let (restore, _) = self.store.restore(keys.iter().map(String::as_str), target)?;
        let delay = persist.max(provision) + restore + replace_ms;

        let avail: Vec<(ReplicaId, bool)> = self
            .hosts_of(s)
            .into_iter()
            .map(|(r, _)| (r, r == new))
            .collect();
        let designations = designate(&avail);
        debug_assert!(designations.iter().any(|d| d.0 == new && d.1 == Designation::Executor));
        let election = inf.election.unwrap().next_attempt();
        let ev = self.sessions[s].events[e].clone();
        let resubmit_at = t.max(inf.failed_at) + delay;
        let group = self.slots[s].group.as_mut().unwrap();
        let report = group.submit(election, resubmit_at, ev.duration_ms, ev.gpus, &designations)?;
        if report.executor != Some(new) {
            return Err(self.invariant(format!("resubmitted {election} not executed by migrated replica {new}")));
        }
        let started = resubmit_at + report.elapsed_ms;
        inf.d[5] = started - (inf.submit_ms + inf.d[..5].iter().sum::<Millis>());
        inf.election = Some(election);
        inf.executor = Some(new);
        inf.host = Some(target);
        inf.migrated = true;
        let record = MigrationRecord {
            kernel_id: kid,
            replica: victim,
            source,
            target: Some(target),
            used_prewarm,
            attempts: inf.attempts,
            outcome: MigrationOutcome::Success,
            delay_ms: started - inf.failed_at,
        };
        self.migrations += 1;
        self.log.push(SchedulerEvent::Migration { time_ms: t, record });
        self.start_execution(s, e, inf, t)
    }

    fn abort_migration(&mut self, s: usize, inf: Inflight, victim: ReplicaId, source: u32, t: Millis) -> Result<(), PlatformError> {
        let record = MigrationRecord {
            kernel_id: self.sessions[s].session_id,
            replica: victim,
            source,
            target: None,
            used_prewarm: false,
            attempts: inf.attempts - 1,
            outcome: MigrationOutcome::Aborted,
            delay_ms: t - inf.failed_at.min(t),
        };
        self.aborted_migrations += 1;
        self.log.push(SchedulerEvent::Migration { time_ms: t, record });
        self.record_error();
        self.slots[s].busy = false;
        self.next_queued(s, t)
    }

    /// Release GPUs, commit completion, replicate the new state and reply.
    pub(super) fn finish_replicated(&mut self, s: usize, e: usize, t: Millis) -> Result<(), PlatformError> {
        let mut inf = self.inflight.remove(&(s, e)).expect("finished request is in flight");
        let kid = self.sessions[s].session_id;
        let ev = self.sessions[s].events[e].clone();
        self.release(inf.grant)?;
        self.standby_replicas += 1;
        self.exec_gpus -= ev.gpus as u64;
        self.active_trainings -= 1;

        let executor = inf.executor.unwrap();
        let host = inf.host.unwrap();
        let threshold = self.cfg.latency.large_object_threshold_bytes;
        let election = inf.election.unwrap();
        let group = self.slots[s].group.as_mut().unwrap();
        group.complete(election, executor)?;
        let sync = self.cfg.latency.sync.clone();
        let key = format!("k{kid}/state");
        let sync_ms = if ev.delta_bytes > threshold {
            let w = self.store.put(&key, ev.delta_bytes, host, t)?;
            let group = self.slots[s].group.as_mut().unwrap();
            group.replicate(executor, ev.delta_bytes, threshold, |_| key.clone())?;
            let ms = w.latency_ms + self.sample(&sync);
            self.large_syncs += 1;
            let next = self.sessions[s].events.get(e + 1).map(|n| n.submit_ms);
            if next.is_none_or(|n| t + ms <= n) {
                self.large_syncs_within_iat += 1;
            }
            ms
        } else {
            group.replicate(executor, ev.delta_bytes, threshold, |_| key.clone())?;
            self.sample(&sync)
        };
        self.sync_samples.push(sync_ms as f64);
        inf.d[8] = sync_ms;
        let hop = self.hop();
        self.record(s, e, inf, hop, election.to_string());
        Ok(())
    }

    pub(super) fn teardown_kernel(&mut self, s: usize) -> Result<(), PlatformError> {
        let kid = self.sessions[s].session_id;
        let was_ready = self.slots[s].state == SlotState::Ready;
        let replicas: Vec<(ReplicaId, ReplicaSlot)> = self.slots[s].replicas.iter().map(|(&r, &x)| (r, x)).collect();
        for (r, x) in &replicas {
            self.cluster.unsubscribe(x.host, (kid, *r))?;
        }
        if was_ready {
            self.standby_replicas -= replicas.len() as u64;
        }
        self.slots[s].replicas.clear();
        if let Some(g) = self.slots[s].group.take() {
            self.collect_audits(&g)?;
        }
        self.slots[s].state = SlotState::Ended;
        Ok(())
    }
}

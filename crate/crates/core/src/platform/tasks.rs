//! Single-replica policies: reservation, FCFS and the warm-pool variant.

use super::{Ev, Inflight, Platform, PlatformError, SlotState};
use crate::billing::ReservationBilling;
use crate::cluster::HostId;
use crate::policies::PolicyKind;
use crate::sim::Millis;

/// Marks a queued reservation session in the shared FIFO.
const SESSION: usize = usize::MAX;

impl Platform {
    /// Ready host with the least free capacity that still fits `gpus`.
    fn best_fit(&self, gpus: u32) -> Option<HostId> {
        self.cluster
            .ready_hosts()
            .filter(|h| h.free_gpus() >= gpus)
            .min_by_key(|h| (h.free_gpus(), h.id))
            .map(|h| h.id)
    }

    fn first_fit(&self, gpus: u32) -> Option<HostId> {
        self.cluster.ready_hosts().find(|h| h.free_gpus() >= gpus).map(|h| h.id)
    }

    fn whole_session(&self) -> bool {
        self.cfg.billing.reservation == ReservationBilling::WholeSession
    }

    pub(super) fn start_reservation(&mut self, s: usize, t: Millis) -> Result<(), PlatformError> {
        if !self.try_reserve(s, t)? {
            self.slots[s].state = SlotState::Deferred;
            self.fifo.push_back((s, SESSION, t));
            self.request_hosts(1, t)?;
        }
        Ok(())
    }

    /// Bind the session's GPUs for its lifetime and start its container.
    fn try_reserve(&mut self, s: usize, t: Millis) -> Result<bool, PlatformError> {
        let req = self.sessions[s].request;
        let Some(host) = self.best_fit(req.gpus) else {
            return Ok(false);
        };
        let kid = self.sessions[s].session_id;
        let grant = self.commit(host, (kid, 0), req)?;
        let (ms, _) = self.cluster.provision_container(host, false)?;
        self.cluster.container_started(host)?;
        if self.whole_session() {
            self.reserved_gpus += req.gpus as u64;
        }
        let slot = &mut self.slots[s];
        slot.host = Some(host);
        slot.grant = grant;
        slot.state = SlotState::Provisioning;
        self.at(t + ms, Ev::KernelReady(s));
        Ok(true)
    }

    pub(super) fn retry_reservations(&mut self, t: Millis) -> Result<(), PlatformError> {
        while let Some(&(s, _, _)) = self.fifo.front() {
            if self.slots[s].state != SlotState::Deferred {
                self.fifo.pop_front();
                continue;
            }
            if !self.try_reserve(s, t)? {
                self.request_hosts(1, t)?;
                break;
            }
            self.fifo.pop_front();
        }
        Ok(())
    }

    /// The container is already running: only the routing hops precede
    /// execution.
    pub(super) fn run_reserved(&mut self, s: usize, e: usize, submit: Millis, t: Millis, queued: bool) -> Result<(), PlatformError> {
        let ev = self.sessions[s].events[e].clone();
        let gs = self.cfg.latency.gs_processing.clone();
        let ls = self.cfg.latency.ls_processing.clone();
        let pre = self.cfg.latency.replica_preprocessing.clone();
        let mut d = [0; 9];
        d[0] = (t - submit) + self.sample(&gs);
        d[1] = self.hop();
        d[2] = self.sample(&ls);
        d[3] = self.hop();
        d[4] = self.sample(&pre);
        d[7] = ev.duration_ms;
        if !self.whole_session() {
            self.exec_gpus += ev.gpus as u64;
        }
        self.active_trainings += 1;
        let end = submit + d[..8].iter().sum::<Millis>();
        self.inflight.insert(
            (s, e),
            Inflight {
                submit_ms: submit,
                d,
                failed_at: 0,
                election: None,
                executor: None,
                host: self.slots[s].host,
                grant: None,
                migrated: false,
                waited: queued,
                attempts: 0,
                post_critical: false,
            },
        );
        self.at(end, Ev::ExecEnd(s, e));
        Ok(())
    }

    pub(super) fn finish_reserved(&mut self, s: usize, e: usize, _t: Millis) -> Result<(), PlatformError> {
        let inf = self.inflight.remove(&(s, e)).expect("finished request is in flight");
        if !self.whole_session() {
            self.exec_gpus -= self.sessions[s].events[e].gpus as u64;
        }
        self.active_trainings -= 1;
        let hop = self.hop();
        let id = format!("s{}-e{e}", self.sessions[s].session_id);
        self.record(s, e, inf, hop, id);
        Ok(())
    }

    pub(super) fn teardown_reservation(&mut self, s: usize) -> Result<(), PlatformError> {
        let slot = &mut self.slots[s];
        let (host, grant) = (slot.host.take(), slot.grant.take());
        slot.state = SlotState::Ended;
        if let Some(h) = host {
            self.release(grant)?;
            self.cluster.container_stopped(h)?;
            if self.whole_session() {
                self.reserved_gpus -= self.sessions[s].request.gpus as u64;
            }
        }
        Ok(())
    }

    /// Start queued tasks in arrival order until the head no longer fits.
    pub(super) fn dispatch_tasks(&mut self, t: Millis) -> Result<(), PlatformError> {
        while let Some(&(s, e, submit)) = self.fifo.front() {
            let gpus = self.sessions[s].events[e].gpus;
            let host = match self.kind {
                PolicyKind::Lcp => self
                    .cluster
                    .ready_hosts()
                    .filter(|h| h.free_gpus() >= gpus)
                    .min_by_key(|h| (h.prewarm == 0, h.id))
                    .map(|h| h.id),
                _ => self.first_fit(gpus),
            };
            let Some(host) = host else {
                self.request_hosts(1, t)?;
                break;
            };
            self.fifo.pop_front();
            self.start_task(s, e, submit, host, t)?;
        }
        Ok(())
    }

    fn start_task(&mut self, s: usize, e: usize, submit: Millis, host: HostId, t: Millis) -> Result<(), PlatformError> {
        if !self.executed.insert((s, e)) {
            return Err(self.invariant(format!("session {s} event {e} dispatched twice")));
        }
        let ev = self.sessions[s].events[e].clone();
        let mut req = self.sessions[s].request;
        req.gpus = ev.gpus;
        let lcp = self.kind == PolicyKind::Lcp;
        let grant = self.commit(host, (self.sessions[s].session_id, e as u64 + 1), req)?;
        self.cluster.container_started(host)?;
        let (provision, warm) = self.cluster.provision_container(host, lcp)?;
        let gs = self.cfg.latency.gs_processing.clone();
        let ls = self.cfg.latency.ls_processing.clone();
        let pre = self.cfg.latency.replica_preprocessing.clone();
        let mut d = [0; 9];
        d[0] = (t - submit) + self.sample(&gs) + provision;
        d[1] = self.hop();
        d[2] = self.sample(&ls);
        d[3] = self.hop();
        d[4] = self.sample(&pre);
        // Model and dataset download before the cell can run.
        d[6] = self.store.sample_read();
        d[7] = ev.duration_ms;
        let post_critical = !lcp;
        if post_critical {
            d[8] = self.store.sample_write(ev.delta_bytes.max(1));
        }
        self.exec_gpus += ev.gpus as u64;
        self.active_trainings += 1;
        let end = submit + d[..8].iter().sum::<Millis>() + d[8] * post_critical as Millis;
        self.inflight.insert(
            (s, e),
            Inflight {
                submit_ms: submit,
                d,
                failed_at: 0,
                election: None,
                executor: None,
                host: Some(host),
                grant,
                migrated: false,
                waited: t > submit || !warm,
                attempts: 0,
                post_critical,
            },
        );
        self.at(end, Ev::ExecEnd(s, e));
        Ok(())
    }

    pub(super) fn finish_task(&mut self, s: usize, e: usize, _t: Millis) -> Result<(), PlatformError> {
        let inf = self.inflight.remove(&(s, e)).expect("finished task is in flight");
        let host = inf.host.unwrap();
        self.release(inf.grant)?;
        self.cluster.container_stopped(host)?;
        if self.kind == PolicyKind::Lcp && self.cluster.host(host).is_some_and(|h| h.prewarm < self.prewarm_min) {
            self.cluster.return_to_pool(host);
        }
        self.exec_gpus -= self.sessions[s].events[e].gpus as u64;
        self.active_trainings -= 1;
        let hop = self.hop();
        let id = format!("s{}-e{e}", self.sessions[s].session_id);
        self.record(s, e, inf, hop, id);
        Ok(())
    }
}

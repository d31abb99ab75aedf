//! Hosts, GPU binding, subscription accounting and container provisioning.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::sim::{LatencyDist, Millis, RngStream};

pub type HostId = u32;

/// Who holds a subscription or a grant: (kernel or task id, replica slot).
pub type OwnerKey = (u64, u64);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceRequest {
    pub millicpus: u64,
    pub memory_mb: u64,
    pub gpus: u32,
    pub vram_gb: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub gpus_per_host: u32,
    pub millicpus_per_host: u64,
    pub memory_mb_per_host: u64,
    pub vram_gb_per_gpu: u32,
    pub initial_hosts: u32,
    pub max_hosts: u32,
    pub replicas: u32,
    /// Per-host subscription ratio ceiling.
    pub high_watermark: f64,
    pub prewarm_per_host: u32,
    pub warm_start_ms: Millis,
    pub cold_start: LatencyDist,
    pub host_boot: LatencyDist,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            gpus_per_host: 8,
            millicpus_per_host: 64_000,
            memory_mb_per_host: 512 * 1024,
            vram_gb_per_gpu: 40,
            initial_hosts: 4,
            max_hosts: 256,
            replicas: 3,
            high_watermark: 7.0,
            prewarm_per_host: 1,
            warm_start_ms: 500,
            cold_start: LatencyDist::lognormal(12_000.0, 0.5),
            host_boot: LatencyDist::lognormal(90_000.0, 0.2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClusterError {
    #[error("host {0} does not exist")]
    UnknownHost(HostId),
    #[error("host {0} is not ready")]
    HostNotReady(HostId),
    #[error("host {host}: {requested} GPUs requested, {free} free")]
    Insufficient { host: HostId, requested: u32, free: u32 },
    #[error("grant {0} is not outstanding")]
    UnknownGrant(u64),
    #[error("grant size must be at least 1")]
    EmptyGrant,
    #[error("host {0} still has tenants")]
    HostBusy(HostId),
    #[error("cluster is at its host limit")]
    HostLimit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Grant {
    pub id: u64,
    pub host: HostId,
    pub owner: OwnerKey,
    pub devices: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HostState {
    Booting { ready_at: Millis },
    Ready,
}

#[derive(Debug, Clone, Serialize)]
pub struct Host {
    pub id: HostId,
    pub gpus: u32,
    pub state: HostState,
    pub created_at: Millis,
    /// Device id -> holding grant.
    devices: Vec<Option<u64>>,
    subscriptions: BTreeMap<OwnerKey, ResourceRequest>,
    subscribed_gpus: u32,
    committed_millicpus: u64,
    committed_memory_mb: u64,
    pub prewarm: u32,
    pub prewarm_pending: u32,
    /// Per-task containers currently running (non-replicated policies).
    pub containers: u32,
}

impl Host {
    fn new(id: HostId, gpus: u32, state: HostState, now: Millis) -> Self {
        Self {
            id,
            gpus,
            state,
            created_at: now,
            devices: vec![None; gpus as usize],
            subscriptions: BTreeMap::new(),
            subscribed_gpus: 0,
            committed_millicpus: 0,
            committed_memory_mb: 0,
            prewarm: 0,
            prewarm_pending: 0,
            containers: 0,
        }
    }

    pub fn is_ready(&self) -> bool {
        self.state == HostState::Ready
    }

    /// C: GPUs bound to running work.
    pub fn committed(&self) -> u32 {
        self.devices.iter().filter(|d| d.is_some()).count() as u32
    }

    pub fn free_gpus(&self) -> u32 {
        self.gpus - self.committed()
    }

    /// S: GPUs requested by the replicas registered here.
    pub fn subscribed(&self) -> u32 {
        self.subscribed_gpus
    }

    pub fn subscriptions(&self) -> &BTreeMap<OwnerKey, ResourceRequest> {
        &self.subscriptions
    }

    pub fn hosts_owner(&self, owner: OwnerKey) -> bool {
        self.subscriptions.contains_key(&owner)
    }

    pub fn committed_millicpus(&self) -> u64 {
        self.committed_millicpus
    }

    pub fn committed_memory_mb(&self) -> u64 {
        self.committed_memory_mb
    }

    /// No replicas, containers or grants.
    pub fn is_idle(&self) -> bool {
        self.subscriptions.is_empty() && self.containers == 0 && self.committed() == 0
    }

    /// S / (G * R).
    pub fn subscription_ratio(&self, replicas: u32) -> f64 {
        subscription_ratio(self.subscribed_gpus as u64, self.gpus as u64, replicas)
    }
}

pub fn subscription_ratio(subscribed: u64, gpus: u64, replicas: u32) -> f64 {
    assert!(gpus >= 1 && replicas >= 1);
    subscribed as f64 / (gpus as f64 * replicas as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HostSnapshot {
    pub time_ms: Millis,
    pub host_id: HostId,
    pub state: &'static str,
    #[serde(rename = "G")]
    pub g: u32,
    #[serde(rename = "C")]
    pub c: u32,
    #[serde(rename = "S")]
    pub s: u32,
    pub sr: f64,
    pub prewarm: u32,
}

pub struct Cluster {
    config: ClusterConfig,
    hosts: BTreeMap<HostId, Host>,
    grants: BTreeMap<u64, Grant>,
    grant_requests: BTreeMap<u64, ResourceRequest>,
    next_host: HostId,
    next_grant: u64,
    rng: RngStream,
}

impl Cluster {
    /// A cluster whose initial hosts are ready at time zero.
    pub fn new(config: ClusterConfig, rng: RngStream) -> Self {
        let mut c = Self {
            hosts: BTreeMap::new(),
            grants: BTreeMap::new(),
            grant_requests: BTreeMap::new(),
            next_host: 0,
            next_grant: 0,
            rng,
            config,
        };
        for _ in 0..c.config.initial_hosts {
            let id = c.next_host;
            c.next_host += 1;
            c.hosts.insert(id, Host::new(id, c.config.gpus_per_host, HostState::Ready, 0));
        }
        c
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn replicas(&self) -> u32 {
        self.config.replicas
    }

    pub fn host(&self, id: HostId) -> Option<&Host> {
        self.hosts.get(&id)
    }

    pub fn hosts(&self) -> impl Iterator<Item = &Host> {
        self.hosts.values()
    }

    pub fn ready_hosts(&self) -> impl Iterator<Item = &Host> {
        self.hosts.values().filter(|h| h.is_ready())
    }

    pub fn host_count(&self) -> usize {
        self.hosts.len()
    }

    pub fn grant(&self, id: u64) -> Option<&Grant> {
        self.grants.get(&id)
    }

    fn host_mut(&mut self, id: HostId) -> Result<&mut Host, ClusterError> {
        self.hosts.get_mut(&id).ok_or(ClusterError::UnknownHost(id))
    }

    /// Total GPUs of all hosts, booting ones included.
    pub fn total_gpus(&self) -> u64 {
        self.hosts.values().map(|h| h.gpus as u64).sum()
    }

    pub fn ready_gpus(&self) -> u64 {
        self.ready_hosts().map(|h| h.gpus as u64).sum()
    }

    pub fn committed_gpus(&self) -> u64 {
        self.hosts.values().map(|h| h.committed() as u64).sum()
    }

    pub fn subscribed_gpus(&self) -> u64 {
        self.hosts.values().map(|h| h.subscribed() as u64).sum()
    }

    /// ΣS / (ΣG · R) over ready hosts, or `None` for an empty cluster.
    pub fn cluster_sr(&self) -> Option<f64> {
        let g: u64 = self.ready_gpus();
        if g == 0 {
            return None;
        }
        let s: u64 = self.ready_hosts().map(|h| h.subscribed() as u64).sum();
        Some(subscription_ratio(s, g, self.config.replicas))
    }

    // ------------------------------------------------------------------
    // Host lifecycle
    // ------------------------------------------------------------------

    /// Start booting a host. Returns its id and ready time.
    pub fn add_host(&mut self, now: Millis) -> Result<(HostId, Millis), ClusterError> {
        if self.hosts.len() as u32 >= self.config.max_hosts {
            return Err(ClusterError::HostLimit);
        }
        let id = self.next_host;
        self.next_host += 1;
        let ready_at = now + self.config.host_boot.sample_ms(&mut self.rng);
        self.hosts
            .insert(id, Host::new(id, self.config.gpus_per_host, HostState::Booting { ready_at }, now));
        Ok((id, ready_at))
    }

    pub fn mark_ready(&mut self, id: HostId) -> Result<(), ClusterError> {
        self.host_mut(id)?.state = HostState::Ready;
        Ok(())
    }

    pub fn remove_host(&mut self, id: HostId) -> Result<(), ClusterError> {
        let h = self.hosts.get(&id).ok_or(ClusterError::UnknownHost(id))?;
        if !h.is_idle() {
            return Err(ClusterError::HostBusy(id));
        }
        self.hosts.remove(&id);
        Ok(())
    }

    // ------------------------------------------------------------------
    // Subscriptions
    // ------------------------------------------------------------------

    /// Register a replica's request on a host; S rises immediately.
    pub fn subscribe(&mut self, host: HostId, owner: OwnerKey, req: ResourceRequest) -> Result<(), ClusterError> {
        let h = self.host_mut(host)?;
        if let Some(old) = h.subscriptions.insert(owner, req) {
            h.subscribed_gpus -= old.gpus;
        }
        h.subscribed_gpus += req.gpus;
        Ok(())
    }

    pub fn unsubscribe(&mut self, host: HostId, owner: OwnerKey) -> Result<Option<ResourceRequest>, ClusterError> {
        let h = self.host_mut(host)?;
        let old = h.subscriptions.remove(&owner);
        if let Some(o) = old {
            h.subscribed_gpus -= o.gpus;
        }
        Ok(old)
    }

    /// SR the host would have after adding `gpus` more subscribed GPUs.
    pub fn sr_after(&self, host: HostId, gpus: u32) -> Option<f64> {
        let h = self.hosts.get(&host)?;
        Some(subscription_ratio(
            (h.subscribed() + gpus) as u64,
            h.gpus as u64,
            self.config.replicas,
        ))
    }

    // ------------------------------------------------------------------
    // GPU binding
    // ------------------------------------------------------------------

    /// Exclusively bind `n` GPUs, lowest free device ids first.
    pub fn commit_gpus(&mut self, host: HostId, owner: OwnerKey, n: u32, req: ResourceRequest) -> Result<Grant, ClusterError> {
        if n == 0 {
            return Err(ClusterError::EmptyGrant);
        }
        let id = self.next_grant;
        let h = self.host_mut(host)?;
        if !h.is_ready() {
            return Err(ClusterError::HostNotReady(host));
        }
        let free = h.free_gpus();
        if free < n {
            return Err(ClusterError::Insufficient {
                host,
                requested: n,
                free,
            });
        }
        let mut devices = Vec::with_capacity(n as usize);
        for (d, slot) in h.devices.iter_mut().enumerate() {
            if devices.len() == n as usize {
                break;
            }
            if slot.is_none() {
                *slot = Some(id);
                devices.push(d as u32);
            }
        }
        h.committed_millicpus += req.millicpus;
        h.committed_memory_mb += req.memory_mb;
        self.next_grant += 1;
        let g = Grant {
            id,
            host,
            owner,
            devices,
        };
        self.grants.insert(id, g.clone());
        self.grant_requests.insert(id, req);
        Ok(g)
    }

    pub fn release_gpus(&mut self, grant: u64) -> Result<Grant, ClusterError> {
        let g = self.grants.remove(&grant).ok_or(ClusterError::UnknownGrant(grant))?;
        let req = self.grant_requests.remove(&grant).unwrap_or_default();
        if let Some(h) = self.hosts.get_mut(&g.host) {
            for &d in &g.devices {
                h.devices[d as usize] = None;
            }
            h.committed_millicpus -= req.millicpus;
            h.committed_memory_mb -= req.memory_mb;
        }
        Ok(g)
    }

    // ------------------------------------------------------------------
    // Containers
    // ------------------------------------------------------------------

    /// Ready latency of a new container on `host`: a pre-warmed one if
    /// allowed and available, otherwise a cold start.
    pub fn provision_container(&mut self, host: HostId, use_prewarm: bool) -> Result<(Millis, bool), ClusterError> {
        let warm = self.config.warm_start_ms;
        let h = self.host_mut(host)?;
        if !h.is_ready() {
            return Err(ClusterError::HostNotReady(host));
        }
        if use_prewarm && h.prewarm > 0 {
            h.prewarm -= 1;
            return Ok((warm, true));
        }
        Ok((self.config.cold_start.sample_ms(&mut self.rng), false))
    }

    pub fn sample_cold_start(&mut self) -> Millis {
        self.config.cold_start.sample_ms(&mut self.rng)
    }

    pub fn container_started(&mut self, host: HostId) -> Result<(), ClusterError> {
        self.host_mut(host)?.containers += 1;
        Ok(())
    }

    pub fn container_stopped(&mut self, host: HostId) -> Result<(), ClusterError> {
        let h = self.host_mut(host)?;
        h.containers = h.containers.saturating_sub(1);
        Ok(())
    }

    /// Hosts whose pool (ready plus in flight) is below `min`, with how many
    /// containers each should start warming. Marks them in flight.
    pub fn maintain_prewarm_pool(&mut self, min: u32) -> Vec<(HostId, u32)> {
        let mut out = Vec::new();
        for h in self.hosts.values_mut().filter(|h| h.is_ready()) {
            let have = h.prewarm + h.prewarm_pending;
            if have < min {
                h.prewarm_pending += min - have;
                out.push((h.id, min - have));
            }
        }
        out
    }

    /// A warming container finished on `host`.
    pub fn prewarm_ready(&mut self, host: HostId) {
        if let Some(h) = self.hosts.get_mut(&host) {
            h.prewarm_pending = h.prewarm_pending.saturating_sub(1);
            h.prewarm += 1;
        }
    }

    /// Return a used container to the pool (LCP reuse).
    pub fn return_to_pool(&mut self, host: HostId) {
        if let Some(h) = self.hosts.get_mut(&host) {
            h.prewarm += 1;
        }
    }

    pub fn snapshot(&self, time_ms: Millis) -> Vec<HostSnapshot> {
        self.hosts
            .values()
            .map(|h| HostSnapshot {
                time_ms,
                host_id: h.id,
                state: if h.is_ready() { "ready" } else { "booting" },
                g: h.gpus,
                c: h.committed(),
                s: h.subscribed(),
                sr: h.subscription_ratio(self.config.replicas),
                prewarm: h.prewarm,
            })
            .collect()
    }

    /// Full recomputation of the accounting invariants.
    pub fn check_invariants(&self) -> Result<(), String> {
        for h in self.hosts.values() {
            if h.committed() > h.gpus {
                return Err(format!("host {}: C > G", h.id));
            }
            let s: u32 = h.subscriptions.values().map(|r| r.gpus).sum();
            if s != h.subscribed_gpus {
                return Err(format!("host {}: S drifted ({} vs {})", h.id, h.subscribed_gpus, s));
            }
            let held: u32 = self.grants.values().filter(|g| g.host == h.id).map(|g| g.devices.len() as u32).sum();
            if held != h.committed() {
                return Err(format!("host {}: C={} but grants hold {}", h.id, h.committed(), held));
            }
            let mut seen = BTreeSet::new();
            for g in self.grants.values().filter(|g| g.host == h.id) {
                for d in &g.devices {
                    if !seen.insert(*d) || h.devices[*d as usize] != Some(g.id) {
                        return Err(format!("host {}: device {} bound twice", h.id, d));
                    }
                }
            }
        }
        Ok(())
    }
}

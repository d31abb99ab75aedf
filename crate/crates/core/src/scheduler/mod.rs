//! Global and local scheduling: routing, placement, migration planning,
//! autoscaling and failure detection.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cluster::{Cluster, HostId};
use crate::kernel::{Designation, KernelId, ReplicaId};
use crate::sim::Millis;

/// Routing rule for one request given which replicas' hosts can bind the
/// requested GPUs right now.
///
/// No viable host: every replica gets a yield request so the election fails
/// fast and the scheduler migrates. Exactly one: it is pre-selected and the
/// election is skipped. Otherwise the viable replicas race.
pub fn designate(available: &[(ReplicaId, bool)]) -> Vec<(ReplicaId, Designation, bool)> {
    let viable = available.iter().filter(|(_, a)| *a).count();
    available
        .iter()
        .map(|&(r, a)| {
            let d = match (viable, a) {
                (0, _) => Designation::Yield,
                (1, true) => Designation::Executor,
                (1, false) => Designation::Standby,
                (_, true) => Designation::Execute,
                (_, false) => Designation::Yield,
            };
            (r, d, a)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    InsufficientCapacity,
    SrLimit,
    NotReady,
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlacementDecision {
    pub kernel_id: KernelId,
    pub chosen: Vec<HostId>,
    pub rejected: Vec<(HostId, RejectReason)>,
    /// Limit the candidates were checked against.
    pub sr_limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlacementConfig {
    /// The dynamic limit never drops below this, so an empty or evenly
    /// loaded cluster can still place kernels.
    pub sr_floor: f64,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        Self { sr_floor: 3.0 }
    }
}

/// Dynamic SR limit: the current cluster-wide ratio, raised to the floor and
/// capped by the per-host high watermark.
pub fn sr_limit(cluster: &Cluster, floor: f64) -> f64 {
    cluster
        .cluster_sr()
        .unwrap_or(0.0)
        .max(floor)
        .min(cluster.config().high_watermark)
}

/// Hosts able to take one replica requesting `gpus`, least active GPUs
/// first, ties by host id.
pub fn find_candidates(
    cluster: &Cluster,
    gpus: u32,
    limit: f64,
    exclude: &BTreeSet<HostId>,
) -> (Vec<HostId>, Vec<(HostId, RejectReason)>) {
    let mut ok = Vec::new();
    let mut rejected = Vec::new();
    for h in cluster.hosts() {
        let reason = if exclude.contains(&h.id) {
            Some(RejectReason::Excluded)
        } else if !h.is_ready() {
            Some(RejectReason::NotReady)
        } else if h.gpus < gpus {
            Some(RejectReason::InsufficientCapacity)
        } else if gpus > 0 && cluster.sr_after(h.id, gpus).unwrap_or(f64::INFINITY) > limit + 1e-12 {
            Some(RejectReason::SrLimit)
        } else {
            None
        };
        match reason {
            Some(r) => rejected.push((h.id, r)),
            None => ok.push((h.committed(), h.id)),
        }
    }
    ok.sort_unstable();
    (ok.into_iter().map(|(_, id)| id).collect(), rejected)
}

/// Pick `replicas` distinct hosts for a new kernel, or report how many are
/// missing.
pub fn place_kernel(
    cluster: &Cluster,
    kernel_id: KernelId,
    gpus: u32,
    floor: f64,
) -> Result<PlacementDecision, usize> {
    let limit = sr_limit(cluster, floor);
    let (cands, rejected) = find_candidates(cluster, gpus, limit, &BTreeSet::new());
    let r = cluster.replicas() as usize;
    if cands.len() < r {
        return Err(r - cands.len());
    }
    Ok(PlacementDecision {
        kernel_id,
        chosen: cands[..r].to_vec(),
        rejected,
        sr_limit: limit,
    })
}

/// Replica to move after a failed election: the one whose host has the most
/// GPUs bound, ties by replica id.
pub fn choose_victim(replicas: &[(ReplicaId, HostId)], cluster: &Cluster) -> Option<(ReplicaId, HostId)> {
    replicas
        .iter()
        .copied()
        .max_by_key(|&(r, h)| (cluster.host(h).map_or(0, |x| x.committed()), std::cmp::Reverse(r)))
}

/// Host that can bind `gpus` immediately, outside `exclude`: hosts with a
/// pre-warmed container first, then fewest active GPUs, then id.
pub fn choose_target(cluster: &Cluster, gpus: u32, exclude: &BTreeSet<HostId>) -> Option<HostId> {
    let wm = cluster.config().high_watermark;
    cluster
        .ready_hosts()
        .filter(|h| !exclude.contains(&h.id) && h.free_gpus() >= gpus)
        .filter(|h| cluster.sr_after(h.id, gpus).unwrap_or(f64::INFINITY) <= wm + 1e-12)
        .min_by_key(|h| (h.prewarm == 0, h.committed(), h.id))
        .map(|h| h.id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MigrationOutcome {
    Success,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MigrationRecord {
    pub kernel_id: KernelId,
    pub replica: ReplicaId,
    pub source: HostId,
    pub target: Option<HostId>,
    pub used_prewarm: bool,
    pub attempts: u32,
    pub outcome: MigrationOutcome,
    pub delay_ms: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MigrationConfig {
    pub retries: u32,
    pub retry_interval_ms: Millis,
}

impl Default for MigrationConfig {
    fn default() -> Self {
        Self {
            retries: 3,
            retry_interval_ms: 5_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoscalerConfig {
    pub enabled: bool,
    pub f: f64,
    pub interval_ms: Millis,
    pub min_hosts: u32,
    pub max_scale_in: u32,
    /// Extra idle hosts kept on top of f·ΣC.
    pub buffer_hosts: u32,
}

impl Default for AutoscalerConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            f: 1.05,
            interval_ms: 30_000,
            min_hosts: 1,
            max_scale_in: 2,
            buffer_hosts: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalingKind {
    ScaleOut { hosts: u32 },
    ScaleIn { hosts: Vec<HostId> },
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingTrigger {
    FailedPlacement,
    Autoscaler,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScalingAction {
    #[serde(flatten)]
    pub kind: ScalingKind,
    pub trigger: ScalingTrigger,
    pub time_ms: Millis,
}

/// One autoscaler evaluation.
///
/// `sum_g` counts every provisioned host including those still booting;
/// `idle` lists removable hosts in preferred removal order. Scale-in stops
/// short of dropping capacity below the target so the next tick does not
/// scale straight back out.
pub fn autoscale(
    sum_c: u64,
    sum_g: u64,
    gpus_per_host: u32,
    host_count: u32,
    idle: &[HostId],
    cfg: &AutoscalerConfig,
) -> ScalingKind {
    let g = gpus_per_host as f64;
    let target = cfg.f * sum_c as f64 + cfg.buffer_hosts as f64 * g;
    let have = sum_g as f64;
    if have < target - 1e-9 {
        return ScalingKind::ScaleOut {
            hosts: ((target - have) / g - 1e-9).ceil() as u32,
        };
    }
    if target < have - 1e-9 {
        let surplus = ((have - target) / g + 1e-9).floor() as u32;
        let above_floor = host_count.saturating_sub(cfg.min_hosts);
        let n = surplus.min(above_floor).min(cfg.max_scale_in).min(idle.len() as u32);
        if n > 0 {
            return ScalingKind::ScaleIn {
                hosts: idle[..n as usize].to_vec(),
            };
        }
    }
    ScalingKind::None
}

/// Idle hosts in removal order: newest first so long-lived hosts keep their
/// warm caches.
pub fn idle_hosts(cluster: &Cluster) -> Vec<HostId> {
    let mut v: Vec<_> = cluster
        .ready_hosts()
        .filter(|h| h.is_idle())
        .map(|h| (std::cmp::Reverse(h.id), h.id))
        .collect();
    v.sort_unstable();
    v.into_iter().map(|(_, id)| id).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeartbeatConfig {
    pub interval_ms: Millis,
    pub timeout_ms: Millis,
}

impl Default for HeartbeatConfig {
    fn default() -> Self {
        Self {
            interval_ms: 1_000,
            timeout_ms: 5_000,
        }
    }
}

/// Declares a component failed once no heartbeat arrived for the timeout.
#[derive(Debug, Clone, Default)]
pub struct FailureDetector {
    timeout_ms: Millis,
    last: BTreeMap<(KernelId, ReplicaId), Millis>,
    failed: BTreeSet<(KernelId, ReplicaId)>,
}

impl FailureDetector {
    pub fn new(timeout_ms: Millis) -> Self {
        Self {
            timeout_ms,
            ..Self::default()
        }
    }

    pub fn heartbeat(&mut self, who: (KernelId, ReplicaId), now: Millis) {
        if !self.failed.contains(&who) {
            self.last.insert(who, now);
        }
    }

    pub fn forget(&mut self, who: (KernelId, ReplicaId)) {
        self.last.remove(&who);
        self.failed.remove(&who);
    }

    /// Newly failed components.
    pub fn check(&mut self, now: Millis) -> Vec<(KernelId, ReplicaId)> {
        let mut out = Vec::new();
        for (&who, &t) in &self.last {
            if now.saturating_sub(t) > self.timeout_ms && self.failed.insert(who) {
                out.push(who);
            }
        }
        for who in &out {
            self.last.remove(who);
        }
        out
    }
}

/// What to do about a kernel given how many of its replicas failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Recovery {
    None,
    Replace,
    Recreate,
}

pub fn recovery_for(failed: usize) -> Recovery {
    match failed {
        0 => Recovery::None,
        1 => Recovery::Replace,
        _ => Recovery::Recreate,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SchedulerEvent {
    Placement {
        time_ms: Millis,
        #[serde(flatten)]
        decision: PlacementDecision,
    },
    PlacementDeferred {
        time_ms: Millis,
        kernel_id: KernelId,
        missing_hosts: usize,
    },
    Migration {
        time_ms: Millis,
        #[serde(flatten)]
        record: MigrationRecord,
    },
    Scaling {
        #[serde(flatten)]
        action: ScalingAction,
        cluster_sr: f64,
    },
    HostReady {
        time_ms: Millis,
        host_id: HostId,
    },
    Failure {
        time_ms: Millis,
        kernel_id: KernelId,
        replicas: Vec<ReplicaId>,
        recovery: Recovery,
    },
    Reclamation {
        time_ms: Millis,
        session_id: u64,
        lost_gpu_seconds: f64,
    },
}

impl SchedulerEvent {
    pub fn time_ms(&self) -> Millis {
        match self {
            Self::Placement { time_ms, .. }
            | Self::PlacementDeferred { time_ms, .. }
            | Self::Migration { time_ms, .. }
            | Self::HostReady { time_ms, .. }
            | Self::Failure { time_ms, .. }
            | Self::Reclamation { time_ms, .. } => *time_ms,
            Self::Scaling { action, .. } => action.time_ms,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct EventLog {
    events: Vec<SchedulerEvent>,
}

impl EventLog {
    pub fn push(&mut self, e: SchedulerEvent) {
        self.events.push(e);
    }

    pub fn events(&self) -> &[SchedulerEvent] {
        &self.events
    }

    pub fn write_ndjson(&self, mut out: impl Write) -> std::io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

//! Scheduling policies and the idle-reclamation model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::sim::Millis;
use crate::workload::Session;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// One long-running container per session with GPUs bound for its
    /// whole lifetime.
    Reservation,
    /// A fresh container per task, cluster-wide FIFO queue.
    Fcfs,
    /// Three replicas per kernel, GPUs bound per task by election.
    DefaultReplicated,
    /// Per-task containers served from a large warm pool.
    Lcp,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::Reservation,
        PolicyKind::Fcfs,
        PolicyKind::DefaultReplicated,
        PolicyKind::Lcp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Reservation => "reservation",
            PolicyKind::Fcfs => "fcfs",
            PolicyKind::DefaultReplicated => "default_replicated",
            PolicyKind::Lcp => "lcp",
        }
    }

    pub fn default_replicas(self) -> u32 {
        match self {
            PolicyKind::DefaultReplicated => 3,
            _ => 1,
        }
    }

    pub fn default_prewarm(self) -> u32 {
        match self {
            PolicyKind::DefaultReplicated => 1,
            PolicyKind::Lcp => 4,
            _ => 0,
        }
    }

    /// Idle hosts the autoscaler keeps on top of f·ΣC.
    pub fn default_buffer_hosts(self) -> u32 {
        match self {
            PolicyKind::DefaultReplicated => 2,
            PolicyKind::Lcp => 1,
            _ => 0,
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PolicyError {
    #[error("unknown policy kind `{0}`")]
    UnknownKind(String),
    #[error("policy.{field}: {msg}")]
    Invalid { field: &'static str, msg: String },
}

impl FromStr for PolicyKind {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| PolicyError::UnknownKind(s.to_string()))
    }
}

/// How the per-host subscription-ratio ceiling for placement is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SrLimitMode {
    /// Follow the cluster-wide ratio, never below `floor`.
    Dynamic { floor: f64 },
    /// A constant ceiling; also caps the cluster-wide ratio the autoscaler
    /// maintains.
    Fixed { limit: f64 },
}

impl Default for SrLimitMode {
    fn default() -> Self {
        SrLimitMode::Dynamic { floor: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Replicas per kernel; the policy's own value when omitted.
    #[serde(default)]
    pub replicas: Option<u32>,
    #[serde(default)]
    pub prewarm_per_host: Option<u32>,
    #[serde(default)]
    pub sr_limit: SrLimitMode,
    /// Idle-reclamation intervals to evaluate, in hours.
    #[serde(default = "default_intervals")]
    pub reclamation_intervals_h: Vec<f64>,
}

fn default_intervals() -> Vec<f64> {
    vec![1.0, 2.0, 4.0, 8.0, 12.0]
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            replicas: None,
            prewarm_per_host: None,
            sr_limit: SrLimitMode::default(),
            reclamation_intervals_h: default_intervals(),
        }
    }

    pub fn replicas(&self) -> u32 {
        self.replicas.unwrap_or(self.kind.default_replicas())
    }

    pub fn prewarm(&self) -> u32 {
        self.prewarm_per_host.unwrap_or(self.kind.default_prewarm())
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |field, msg: String| Err(PolicyError::Invalid { field, msg });
        let r = self.replicas();
        if r != self.kind.default_replicas() {
            return bad("replicas", format!("{} requires {} replicas, got {r}", self.kind, self.kind.default_replicas()));
        }
        if self.kind == PolicyKind::Lcp && self.prewarm() <= PolicyKind::DefaultReplicated.default_prewarm() {
            return bad("prewarm_per_host", "lcp needs a larger pool than the replicated policy".into());
        }
        match self.sr_limit {
            SrLimitMode::Dynamic { floor } if !(floor > 0.0 && floor.is_finite()) => {
                return bad("sr_limit.floor", format!("must be positive, got {floor}"));
            }
            SrLimitMode::Fixed { limit } if !(limit > 0.0 && limit.is_finite()) => {
                return bad("sr_limit.limit", format!("must be positive, got {limit}"));
            }
            _ => {}
        }
        if self.reclamation_intervals_h.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
            return bad("reclamation_intervals_h", "intervals must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReclamationEvent {
    pub session_id: u64,
    pub reclaimed_at_ms: Millis,
    /// GPU-seconds of every cell executed before the reclamation.
    pub lost_state_gpu_seconds: f64,
    /// The session submitted again afterwards and would have replayed.
    pub replayed: bool,
    pub resumed_at_ms: Option<Millis>,
}

/// Reclamations an idle-culling platform would perform on this trace.
///
/// A session is idle from its start to its first submit, between one
/// event's end and the next submit, and from its last event to its end.
/// Any idle stretch of at least `interval_ms` is reclaimed `interval_ms`
/// after it began. Replay is full: a resumed session re-runs every cell it
/// had executed.
pub fn idle_reclamations(sessions: &[Session], interval_ms: Millis) -> Vec<ReclamationEvent> {
    assert!(interval_ms > 0, "reclamation interval must be positive");
    let mut out = Vec::new();
    for s in sessions {
        let mut idle_from = s.start_ms;
        let mut lost = 0.0;
        for e in &s.events {
            if e.submit_ms.saturating_sub(idle_from) >= interval_ms {
                out.push(ReclamationEvent {
                    session_id: s.session_id,
                    reclaimed_at_ms: idle_from + interval_ms,
                    lost_state_gpu_seconds: lost,
                    replayed: true,
                    resumed_at_ms: Some(e.submit_ms),
                });
            }
            lost += e.duration_ms as f64 / 1000.0 * e.gpus as f64;
            idle_from = e.end_ms();
        }
        if s.end_ms.saturating_sub(idle_from) >= interval_ms {
            out.push(ReclamationEvent {
                session_id: s.session_id,
                reclaimed_at_ms: idle_from + interval_ms,
                lost_state_gpu_seconds: lost,
                replayed: false,
                resumed_at_ms: None,
            });
        }
    }
    out.sort_by_key(|r| (r.reclaimed_at_ms, r.session_id));
    out
}

/// Cumulative GPU-hours of re-execution avoided, evaluated at each sample
/// time. Savings are credited when the reclaimed session resumes.
pub fn gpu_hours_saved(reclamations: &[ReclamationEvent], times: &[Millis]) -> Vec<f64> {
    let mut credits: Vec<(Millis, f64)> = reclamations
        .iter()
        .filter(|r| r.replayed)
        .filter_map(|r| r.resumed_at_ms.map(|t| (t, r.lost_state_gpu_seconds / 3600.0)))
        .collect();
    credits.sort_by_key(|a| a.0);
    let mut out = Vec::with_capacity(times.len());
    let mut i = 0;
    let mut acc = 0.0;
    for &t in times {
        while i < credits.len() && credits[i].0 <= t {
            acc += credits[i].1;
            i += 1;
        }
        out.push(acc);
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::cluster::ResourceRequest;
    use crate::workload::{compute_stats, generate, GenParams, TrainingEvent};

    const H: Millis = 3_600_000;

    fn session(id: u64, start: Millis, end: Millis, gpus: u32, events: &[(Millis, Millis)]) -> Session {
        Session {
            session_id: id,
            start_ms: start,
            end_ms: end,
            request: ResourceRequest {
                gpus,
                ..ResourceRequest::default()
            },
            events: events
                .iter()
                .map(|&(submit_ms, duration_ms)| TrainingEvent {
                    session_id: id,
                    submit_ms,
                    duration_ms,
                    gpus,
                    vram_gb: 0,
                    delta_bytes: 1,
                })
                .collect(),
        }
    }

    #[test]
    fn kinds_parse_and_validate() {
        for k in PolicyKind::ALL {
            assert_eq!(k.name().parse::<PolicyKind>().unwrap(), k);
            PolicyConfig::new(k).validate().unwrap();
        }
        assert!(matches!("round_robin".parse::<PolicyKind>(), Err(PolicyError::UnknownKind(_))));
        let mut c = PolicyConfig::new(PolicyKind::Reservation);
        c.replicas = Some(3);
        assert!(c.validate().is_err());
        let mut c = PolicyConfig::new(PolicyKind::Lcp);
        c.prewarm_per_host = Some(1);
        assert!(c.validate().is_err());
        let c: PolicyConfig = toml::from_str("kind = \"lcp\"").unwrap();
        assert_eq!(c.prewarm(), 4);
        assert!(toml::from_str::<PolicyConfig>("kind = \"bogus\"").is_err());
    }

    #[test]
    fn reservation_hours_example() {
        // 4 GPUs reserved for 10 h, 20 minutes of training.
        let s = session(1, 0, 10 * H, 4, &[(H, 20 * 60_000)]);
        let st = compute_stats(&[s], 15_000);
        assert!((st.reserved_gpu_hours - 40.0).abs() < 1e-9);
        assert!((st.used_gpu_hours - 4.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn reclaim_threshold() {
        let s = session(1, 0, 10 * H, 1, &[(61 * 60_000, 1_000)]);
        let r = idle_reclamations(std::slice::from_ref(&s), H);
        assert_eq!(r[0].reclaimed_at_ms, H);
        assert_eq!(r[0].lost_state_gpu_seconds, 0.0);
        // 59 idle minutes before the first cell: not reclaimed.
        let s2 = session(2, 0, 61 * 60_000, 1, &[(59 * 60_000, 60_000)]);
        assert!(idle_reclamations(&[s2], H).is_empty());
    }

    #[test]
    fn running_session_not_reclaimed() {
        // A 3 h task inside a 4 h session leaves at most 30 min idle.
        let s = session(1, 0, 4 * H, 1, &[(H / 2, 3 * H)]);
        assert!(idle_reclamations(&[s], H).is_empty());
    }

    #[test]
    fn saved_hours_example() {
        // One 600 s cell on 2 GPUs, 2 h idle, then another cell.
        let s = session(1, 0, 10 * H, 2, &[(0, 600_000), (600_000 + 2 * H, 1_000)]);
        let r = idle_reclamations(&[s], H);
        assert_eq!(r.len(), 2);
        assert!(r[0].replayed);
        let saved = gpu_hours_saved(&r, &[10 * H]);
        assert!((saved[0] - 600.0 * 2.0 / 3600.0).abs() < 1e-12);
    }

    #[test]
    fn never_resumed_saves_nothing() {
        let s = session(1, 0, 10 * H, 2, &[(0, 600_000)]);
        let r = idle_reclamations(&[s], H);
        assert_eq!(r.len(), 1);
        assert!(!r[0].replayed);
        assert_eq!(gpu_hours_saved(&r, &[10 * H]), vec![0.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn sweep_is_ordered(seed in 0u64..500) {
            let s = generate(&GenParams { sessions: 30, ..GenParams::default() }, seed).unwrap();
            let times: Vec<Millis> = (0..=70).map(|i| i * 15 * 60_000).collect();
            let mut prev_count = usize::MAX;
            let mut prev_curve: Option<Vec<f64>> = None;
            for h in [1, 2, 4, 8, 12] {
                let r = idle_reclamations(&s, h * H);
                prop_assert!(r.len() <= prev_count);
                prev_count = r.len();
                let curve = gpu_hours_saved(&r, &times);
                prop_assert!(curve.windows(2).all(|w| w[0] <= w[1]));
                if let Some(p) = &prev_curve {
                    prop_assert!(p.iter().zip(&curve).all(|(a, b)| a + 1e-9 >= *b));
                }
                prev_curve = Some(curve);
            }
        }
    }
}

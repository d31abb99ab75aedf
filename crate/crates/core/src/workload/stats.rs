use serde::Serialize;

use super::Session;
use crate::sim::Millis;

/// Nearest-rank percentile of sorted data, `p` in [0, 100].
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct Percentiles {
    pub count: usize,
    pub min: f64,
    pub p50: f64,
    pub p75: f64,
    pub p90: f64,
    pub p95: f64,
    pub p99: f64,
    pub max: f64,
    pub mean: f64,
}

impl Percentiles {
    /// Summary of unsorted samples. Empty input gives all zeros.
    pub fn of(mut v: Vec<f64>) -> Self {
        if v.is_empty() {
            return Self::default();
        }
        v.sort_by(f64::total_cmp);
        let p = |q| percentile(&v, q).unwrap();
        Self {
            count: v.len(),
            min: v[0],
            p50: p(50.0),
            p75: p(75.0),
            p90: p(90.0),
            p95: p(95.0),
            p99: p(99.0),
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimelinePoint {
    pub time_s: f64,
    pub reserved_gpus: u64,
    pub used_gpus: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceStats {
    pub sessions: usize,
    pub events: usize,
    /// Seconds.
    pub durations: Percentiles,
    /// Gaps between consecutive submits within one session, in seconds.
    pub iats: Percentiles,
    /// Per-session share of reserved GPU time spent training, sorted.
    pub session_utilization: Vec<f64>,
    /// 1 - used / reserved GPU-seconds over the whole trace.
    pub idle_fraction: f64,
    pub reserved_gpu_hours: f64,
    pub used_gpu_hours: f64,
    pub max_concurrent_sessions: usize,
    pub timeline: Vec<TimelinePoint>,
}

pub fn compute_stats(sessions: &[Session], sample_ms: Millis) -> TraceStats {
    let sample_ms = sample_ms.max(1);
    let mut durations = Vec::new();
    let mut iats = Vec::new();
    let mut util = Vec::with_capacity(sessions.len());
    let mut reserved = 0u128;
    let mut used = 0u128;
    for s in sessions {
        let life = (s.end_ms - s.start_ms) as u128 * s.request.gpus as u128;
        let busy: u128 = s.events.iter().map(|e| e.duration_ms as u128 * e.gpus as u128).sum();
        reserved += life;
        used += busy;
        if life > 0 {
            util.push(busy as f64 / life as f64);
        }
        durations.extend(s.events.iter().map(|e| e.duration_ms as f64 / 1000.0));
        iats.extend(s.events.windows(2).map(|w| (w[1].submit_ms - w[0].submit_ms) as f64 / 1000.0));
    }
    util.sort_by(f64::total_cmp);

    // Sessions occupy [start, end); at equal times ends come first.
    let mut edges: Vec<(Millis, i32)> = sessions.iter().flat_map(|s| [(s.start_ms, 1), (s.end_ms, -1)]).collect();
    edges.sort();
    let mut cur = 0i64;
    let mut max_conc = 0i64;
    for (_, d) in edges {
        cur += d as i64;
        max_conc = max_conc.max(cur);
    }

    let horizon = sessions.iter().map(|s| s.end_ms).max().unwrap_or(0);
    let mut timeline = Vec::new();
    let mut t = 0;
    while t <= horizon && !sessions.is_empty() {
        let mut r = 0u64;
        let mut u = 0u64;
        for s in sessions {
            if s.start_ms <= t && t < s.end_ms {
                r += s.request.gpus as u64;
                u += s
                    .events
                    .iter()
                    .filter(|e| e.submit_ms <= t && t < e.end_ms())
                    .map(|e| e.gpus as u64)
                    .sum::<u64>();
            }
        }
        timeline.push(TimelinePoint {
            time_s: t as f64 / 1000.0,
            reserved_gpus: r,
            used_gpus: u,
        });
        t += sample_ms;
    }

    TraceStats {
        sessions: sessions.len(),
        events: durations.len(),
        durations: Percentiles::of(durations),
        iats: Percentiles::of(iats),
        session_utilization: util,
        idle_fraction: if reserved == 0 { 0.0 } else { 1.0 - used as f64 / reserved as f64 },
        reserved_gpu_hours: reserved as f64 / 3.6e6,
        used_gpu_hours: used as f64 / 3.6e6,
        max_concurrent_sessions: max_conc as usize,
        timeline,
    }
}

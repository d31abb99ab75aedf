use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Session, TrainingEvent};
use crate::cluster::ResourceRequest;
use crate::sim::{Millis, RngStream};

const KB: u64 = 1 << 10;
const MB: u64 = 1 << 20;
const GB: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeneratorError {
    #[error("percentile knots must start at p=0 and be increasing in p and value")]
    NonMonotone,
    #[error("invalid parameter {0}")]
    BadParam(&'static str),
}

/// Piecewise-linear inverse CDF through (p, seconds) knots with an
/// exponential tail past the last knot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileCurve {
    pub knots: Vec<(f64, f64)>,
    pub tail_scale_s: f64,
}

impl PercentileCurve {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        if self.knots.first().is_none_or(|k| k.0 != 0.0) {
            return Err(GeneratorError::NonMonotone);
        }
        for w in self.knots.windows(2) {
            if !(w[1].0 > w[0].0 && w[1].1 >= w[0].1) {
                return Err(GeneratorError::NonMonotone);
            }
        }
        let last = self.knots.last().unwrap();
        if last.0 >= 1.0 || self.knots.iter().any(|k| k.1 < 0.0) || !(self.tail_scale_s >= 0.0) {
            return Err(GeneratorError::NonMonotone);
        }
        Ok(())
    }

    pub fn quantile(&self, u: f64) -> f64 {
        let (pl, vl) = *self.knots.last().unwrap();
        if u >= pl {
            let tail = ((1.0 - u) / (1.0 - pl)).max(f64::MIN_POSITIVE);
            return vl - self.tail_scale_s * tail.ln();
        }
        let i = self.knots.partition_point(|k| k.0 <= u);
        let (p0, v0) = self.knots[i - 1];
        let (p1, v1) = self.knots[i];
        v0 + (v1 - v0) * (u - p0) / (p1 - p0)
    }

    pub fn durations() -> Self {
        Self {
            knots: vec![
                (0.0, 1.0),
                (0.5, 120.0),
                (0.75, 300.0),
                (0.9, 1020.0),
                (0.95, 2160.0),
                (0.99, 10920.0),
            ],
            tail_scale_s: 2190.0,
        }
    }

    pub fn iats() -> Self {
        Self {
            knots: vec![
                (0.0, 240.0),
                (0.5, 300.0),
                (0.75, 480.0),
                (0.9, 3600.0),
                (0.95, 10800.0),
                (0.99, 28800.0),
            ],
            tail_scale_s: 4500.0,
        }
    }
}

/// Post-execution state size: mostly small deltas, some large objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeltaMix {
    pub small_fraction: f64,
    pub small_min_bytes: u64,
    pub small_max_bytes: u64,
    pub large_min_bytes: u64,
    pub large_max_bytes: u64,
}

impl Default for DeltaMix {
    fn default() -> Self {
        Self {
            small_fraction: 0.9,
            small_min_bytes: KB,
            small_max_bytes: MB,
            large_min_bytes: 100 * MB,
            large_max_bytes: 2 * GB,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenParams {
    pub sessions: u32,
    pub horizon_s: f64,
    /// Sessions start uniformly within this fraction of the horizon.
    pub start_spread: f64,
    /// Share of sessions left open until the horizon after their last event.
    pub persist_fraction: f64,
    pub events_min: u32,
    pub events_max: u32,
    pub duration: PercentileCurve,
    pub iat: PercentileCurve,
    pub iat_floor_s: f64,
    /// Draw event quantiles from equal-width strata instead of independently.
    pub stratified: bool,
    /// Minimum idle time between one event's end and the next submit.
    pub min_gap_s: f64,
    /// (GPUs, weight) for the session request.
    pub gpu_weights: Vec<(u32, f64)>,
    /// Fraction of the session's GPUs each event uses.
    pub event_gpu_fraction: f64,
    pub delta: DeltaMix,
    pub millicpus_per_gpu: u64,
    pub mem_mb_per_gpu: u64,
    pub vram_gb_per_gpu: u32,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            sessions: 100,
            horizon_s: 17.5 * 3600.0,
            start_spread: 0.8,
            persist_fraction: 0.85,
            events_min: 6,
            events_max: 18,
            duration: PercentileCurve::durations(),
            iat: PercentileCurve::iats(),
            iat_floor_s: 240.0,
            stratified: true,
            min_gap_s: 180.0,
            gpu_weights: vec![(1, 0.3), (2, 0.3), (4, 0.3), (8, 0.1)],
            event_gpu_fraction: 1.0,
            delta: DeltaMix::default(),
            millicpus_per_gpu: 4_000,
            mem_mb_per_gpu: 16_384,
            vram_gb_per_gpu: 40,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        self.duration.validate()?;
        self.iat.validate()?;
        if !(self.horizon_s > 0.0) {
            return Err(GeneratorError::BadParam("horizon_s"));
        }
        if !(self.start_spread > 0.0 && self.start_spread <= 1.0) {
            return Err(GeneratorError::BadParam("start_spread"));
        }
        if !(0.0..=1.0).contains(&self.persist_fraction) {
            return Err(GeneratorError::BadParam("persist_fraction"));
        }
        if self.events_min == 0 || self.events_max < self.events_min {
            return Err(GeneratorError::BadParam("events_min/events_max"));
        }
        if self.gpu_weights.is_empty() || self.gpu_weights.iter().any(|w| !(w.1 >= 0.0)) {
            return Err(GeneratorError::BadParam("gpu_weights"));
        }
        if !(self.event_gpu_fraction > 0.0 && self.event_gpu_fraction <= 1.0) {
            return Err(GeneratorError::BadParam("event_gpu_fraction"));
        }
        let d = &self.delta;
        if !(0.0..=1.0).contains(&d.small_fraction)
            || d.small_min_bytes > d.small_max_bytes
            || d.large_min_bytes > d.large_max_bytes
        {
            return Err(GeneratorError::BadParam("delta"));
        }
        Ok(())
    }
}

fn ms(s: f64) -> Millis {
    (s * 1000.0).round() as Millis
}

/// Generate a synthetic trace. One uniform draw drives both an event's
/// duration and the gap to the next submit, so long tasks come with long
/// pauses.
pub fn generate(params: &GenParams, seed: u64) -> Result<Vec<Session>, GeneratorError> {
    params.validate()?;
    let horizon = ms(params.horizon_s);
    let total_w: f64 = params.gpu_weights.iter().map(|w| w.1).sum();

    let mut rngs = Vec::with_capacity(params.sessions as usize);
    let mut shapes = Vec::with_capacity(params.sessions as usize);
    for id in 0..params.sessions as u64 {
        let mut rng = RngStream::new(seed, format!("workload/session/{id}"));
        let mut pick = rng.unit() * total_w;
        let mut gpus = params.gpu_weights.last().unwrap().0;
        for &(g, w) in &params.gpu_weights {
            if pick < w {
                gpus = g;
                break;
            }
            pick -= w;
        }
        let n = rng.range_inclusive(params.events_min as u64, params.events_max as u64) as usize;
        shapes.push((gpus, n));
        rngs.push(rng);
    }

    // Event quantiles: one per stratum of [0, 1) when stratified, shuffled
    // across the trace.
    let total: usize = shapes.iter().map(|s| s.1).sum();
    let mut strata = RngStream::new(seed, "workload/strata");
    let mut us: Vec<f64> = if params.stratified {
        (0..total).map(|k| (k as f64 + strata.unit()) / total as f64).collect()
    } else {
        (0..total).map(|_| strata.unit()).collect()
    };
    us.shuffle(&mut strata);
    let mut us = us.into_iter();

    let mut out = Vec::with_capacity(params.sessions as usize);
    for (id, ((gpus, n), mut rng)) in shapes.into_iter().zip(rngs).enumerate() {
        let id = id as u64;
        let request = ResourceRequest {
            millicpus: params.millicpus_per_gpu * gpus.max(1) as u64,
            memory_mb: params.mem_mb_per_gpu * gpus.max(1) as u64,
            gpus,
            vram_gb: params.vram_gb_per_gpu * gpus,
        };
        let event_gpus = ((gpus as f64 * params.event_gpu_fraction).round() as u32).clamp(gpus.min(1), gpus);
        let persist = rng.bernoulli(params.persist_fraction);
        let draws: Vec<(f64, u64)> = (0..n)
            .map(|_| {
                let delta = if rng.bernoulli(params.delta.small_fraction) {
                    rng.range_inclusive(params.delta.small_min_bytes, params.delta.small_max_bytes)
                } else {
                    rng.range_inclusive(params.delta.large_min_bytes, params.delta.large_max_bytes)
                };
                (us.next().unwrap(), delta)
            })
            .collect();

        // Retry the placement until at least one event fits in the horizon.
        let session = loop {
            let start = ms(rng.unit() * params.horizon_s * params.start_spread);
            let lead = params.iat.quantile(rng.unit()).max(params.iat_floor_s);
            let mut t = start + ms(lead);
            let mut events = Vec::with_capacity(n);
            for &(u, delta_bytes) in &draws {
                let dur = ms(params.duration.quantile(u).max(0.001));
                let iat = ms(params.iat.quantile(u).max(params.iat_floor_s)).max(dur + ms(params.min_gap_s));
                events.push((
                    TrainingEvent {
                        session_id: id,
                        submit_ms: t,
                        duration_ms: dur,
                        gpus: event_gpus,
                        vram_gb: params.vram_gb_per_gpu * event_gpus,
                        delta_bytes,
                    },
                    t + iat,
                ));
                t += iat;
            }
            // A session closes one gap after its last event unless the user
            // leaves it open; either way it is cut at the horizon.
            events.retain(|(e, _)| e.end_ms() <= horizon);
            if let Some(&(_, next)) = events.last() {
                break Session {
                    session_id: id,
                    start_ms: start,
                    end_ms: if persist { horizon } else { next.min(horizon) },
                    request,
                    events: events.into_iter().map(|(e, _)| e).collect(),
                };
            }
        };
        out.push(session);
    }
    Ok(out)
}

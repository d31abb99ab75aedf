//! Latency distributions used by links, provisioning and the data store.

use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::rng::RngStream;

/// A non-negative latency distribution in milliseconds.
///
/// `LogNormal` is parameterized by its median and the sigma of the
/// underlying normal. `Mixture` weights need not sum to one; they are
/// normalized on use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatencyDist {
    Constant { ms: f64 },
    Uniform { lo_ms: f64, hi_ms: f64 },
    LogNormal { median_ms: f64, sigma: f64 },
    Mixture { components: Vec<WeightedDist> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedDist {
    pub weight: f64,
    pub dist: LatencyDist,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DistError {
    #[error("latency distribution parameter `{0}` must be finite and non-negative")]
    Negative(&'static str),
    #[error("uniform distribution has lo > hi ({lo} > {hi})")]
    InvertedRange { lo: f64, hi: f64 },
    #[error("mixture must have at least one component with positive weight")]
    EmptyMixture,
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

impl LatencyDist {
    pub const ZERO: LatencyDist = LatencyDist::Constant { ms: 0.0 };

    pub fn constant(ms: f64) -> Self {
        LatencyDist::Constant { ms }
    }

    pub fn lognormal(median_ms: f64, sigma: f64) -> Self {
        LatencyDist::LogNormal { median_ms, sigma }
    }

    /// Lognormal whose `p`-quantile equals `value_ms`, with the median set to
    /// `value_ms / ratio`.
    pub fn lognormal_from_quantile(value_ms: f64, p: f64, ratio: f64) -> Self {
        let z = standard_normal().inverse_cdf(p);
        let sigma = ratio.ln() / z;
        LatencyDist::LogNormal {
            median_ms: value_ms / ratio,
            sigma,
        }
    }

    pub fn validate(&self) -> Result<(), DistError> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        match self {
            LatencyDist::Constant { ms } => {
                if !ok(*ms) {
                    return Err(DistError::Negative("ms"));
                }
            }
            LatencyDist::Uniform { lo_ms, hi_ms } => {
                if !ok(*lo_ms) {
                    return Err(DistError::Negative("lo_ms"));
                }
                if !ok(*hi_ms) {
                    return Err(DistError::Negative("hi_ms"));
                }
                if lo_ms > hi_ms {
                    return Err(DistError::InvertedRange {
                        lo: *lo_ms,
                        hi: *hi_ms,
                    });
                }
            }
            LatencyDist::LogNormal { median_ms, sigma } => {
                if !ok(*median_ms) {
                    return Err(DistError::Negative("median_ms"));
                }
                if !ok(*sigma) {
                    return Err(DistError::Negative("sigma"));
                }
            }
            LatencyDist::Mixture { components } => {
                if !components.iter().any(|c| c.weight > 0.0) {
                    return Err(DistError::EmptyMixture);
                }
                for c in components {
                    if !ok(c.weight) {
                        return Err(DistError::Negative("weight"));
                    }
                    c.dist.validate()?;
                }
            }
        }
        Ok(())
    }

    /// Draw one latency in (fractional) milliseconds.
    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        match self {
            LatencyDist::Constant { ms } => *ms,
            LatencyDist::Uniform { lo_ms, hi_ms } => lo_ms + (hi_ms - lo_ms) * rng.unit(),
            LatencyDist::LogNormal { median_ms, sigma } => {
                if *sigma == 0.0 || *median_ms == 0.0 {
                    return *median_ms;
                }
                LogNormal::new(median_ms.ln(), *sigma)
                    .expect("validated lognormal")
                    .sample(rng)
            }
            LatencyDist::Mixture { components } => {
                let total: f64 = components.iter().map(|c| c.weight).sum();
                let mut pick = rng.unit() * total;
                for c in components {
                    if pick < c.weight {
                        return c.dist.sample(rng);
                    }
                    pick -= c.weight;
                }
                components
                    .iter()
                    .rev()
                    .find(|c| c.weight > 0.0)
                    .expect("validated mixture")
                    .dist
                    .sample(rng)
            }
        }
    }

    /// Draw and round to whole milliseconds.
    pub fn sample_ms(&self, rng: &mut RngStream) -> u64 {
        self.sample(rng).max(0.0).round() as u64
    }

    pub fn cdf(&self, x_ms: f64) -> f64 {
        match self {
            LatencyDist::Constant { ms } => {
                if x_ms >= *ms {
                    1.0
                } else {
                    0.0
                }
            }
            LatencyDist::Uniform { lo_ms, hi_ms } => {
                if x_ms < *lo_ms {
                    0.0
                } else if x_ms >= *hi_ms {
                    1.0
                } else {
                    (x_ms - lo_ms) / (hi_ms - lo_ms)
                }
            }
            LatencyDist::LogNormal { median_ms, sigma } => {
                if x_ms <= 0.0 {
                    return 0.0;
                }
                if *sigma == 0.0 {
                    return if x_ms >= *median_ms { 1.0 } else { 0.0 };
                }
                standard_normal().cdf((x_ms.ln() - median_ms.ln()) / sigma)
            }
            LatencyDist::Mixture { components } => {
                let total: f64 = components.iter().map(|c| c.weight).sum();
                components
                    .iter()
                    .map(|c| c.weight * c.dist.cdf(x_ms))
                    .sum::<f64>()
                    / total
            }
        }
    }

    /// Inverse CDF. Closed form where available, bisection for mixtures.
    pub fn quantile(&self, p: f64) -> f64 {
        let p = p.clamp(0.0, 1.0);
        match self {
            LatencyDist::Constant { ms } => *ms,
            LatencyDist::Uniform { lo_ms, hi_ms } => lo_ms + (hi_ms - lo_ms) * p,
            LatencyDist::LogNormal { median_ms, sigma } => {
                median_ms * (sigma * standard_normal().inverse_cdf(p)).exp()
            }
            LatencyDist::Mixture { .. } => {
                let mut lo = 0.0_f64;
                let mut hi = 1.0_f64;
                while self.cdf(hi) < p {
                    hi *= 2.0;
                    if hi > 1e15 {
                        return f64::INFINITY;
                    }
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if self.cdf(mid) < p {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                hi
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_is_degenerate() {
        let mut rng = RngStream::new(0, "t");
        let d = LatencyDist::constant(3.0);
        assert_eq!(d.sample_ms(&mut rng), 3);
        assert_eq!(d.quantile(0.99), 3.0);
    }

    #[test]
    fn lognormal_quantile_roundtrip() {
        let d = LatencyDist::lognormal_from_quantile(3950.0, 0.99, 8.0);
        assert!((d.quantile(0.99) - 3950.0).abs() < 1e-6);
        assert!((d.quantile(0.5) - 3950.0 / 8.0).abs() < 1e-9);
        assert!((d.cdf(3950.0) - 0.99).abs() < 1e-9);
    }

    #[test]
    fn mixture_quantile_inverts_cdf() {
        let d = LatencyDist::Mixture {
            components: vec![
                WeightedDist {
                    weight: 0.9,
                    dist: LatencyDist::lognormal(20.0, 0.5),
                },
                WeightedDist {
                    weight: 0.1,
                    dist: LatencyDist::lognormal(200.0, 0.5),
                },
            ],
        };
        for p in [0.1, 0.5, 0.9, 0.99] {
            assert!((d.cdf(d.quantile(p)) - p).abs() < 1e-9);
        }
    }

    #[test]
    fn validation_rejects_bad_params() {
        assert!(LatencyDist::Uniform {
            lo_ms: 5.0,
            hi_ms: 1.0
        }
        .validate()
        .is_err());
        assert!(LatencyDist::lognormal(-1.0, 0.5).validate().is_err());
        assert!(LatencyDist::Mixture { components: vec![] }.validate().is_err());
    }
}

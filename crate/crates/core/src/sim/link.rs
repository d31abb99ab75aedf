//! Fault-injectable message delivery.

use serde::{Deserialize, Serialize};

use super::dist::{DistError, LatencyDist};
use super::rng::RngStream;
use super::Millis;

/// One-way link behavior: fixed base latency, sampled jitter and an
/// independent per-message drop probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub base_latency_ms: u64,
    pub jitter: LatencyDist,
    pub drop_probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    DeliveredAt(Millis),
    Dropped,
}

impl Default for LinkModel {
    fn default() -> Self {
        Self::reliable(1)
    }
}

impl LinkModel {
    pub fn reliable(base_latency_ms: u64) -> Self {
        Self {
            base_latency_ms,
            jitter: LatencyDist::ZERO,
            drop_probability: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), DistError> {
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(DistError::Negative("drop_probability"));
        }
        self.jitter.validate()
    }

    /// Decide the fate of one message sent at `now`.
    ///
    /// The drop draw happens first and is always taken, so a link's random
    /// stream advances identically whether or not jitter is configured.
    pub fn deliver(&self, now: Millis, rng: &mut RngStream) -> Delivery {
        if rng.bernoulli(self.drop_probability) {
            return Delivery::Dropped;
        }
        let jitter = self.jitter.sample_ms(rng);
        Delivery::DeliveredAt(now + self.base_latency_ms + jitter)
    }

    /// Latency of a hop that is retried until it gets through, each attempt
    /// costing `retry_timeout_ms` when lost.
    pub fn reliable_latency(&self, rng: &mut RngStream, retry_timeout_ms: u64) -> Millis {
        let mut waited = 0;
        loop {
            match self.deliver(0, rng) {
                Delivery::DeliveredAt(t) => return waited + t,
                Delivery::Dropped => waited += retry_timeout_ms,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_link_is_exact() {
        let mut rng = RngStream::new(3, "l");
        let link = LinkModel::reliable(1);
        assert_eq!(link.deliver(10, &mut rng), Delivery::DeliveredAt(11));
    }

    #[test]
    fn certain_drop() {
        let mut rng = RngStream::new(3, "l");
        let link = LinkModel {
            drop_probability: 1.0,
            ..LinkModel::reliable(1)
        };
        for _ in 0..100 {
            assert_eq!(link.deliver(0, &mut rng), Delivery::Dropped);
        }
    }

    #[test]
    fn drop_fraction_within_binomial_bound() {
        // n = 10_000, p = 0.1: sd = sqrt(p(1-p)/n) = 0.003, so +-0.01 is > 3 sd.
        let mut rng = RngStream::new(11, "drops");
        let link = LinkModel {
            drop_probability: 0.1,
            ..LinkModel::reliable(1)
        };
        let dropped = (0..10_000)
            .filter(|_| link.deliver(0, &mut rng) == Delivery::Dropped)
            .count();
        let frac = dropped as f64 / 10_000.0;
        assert!((frac - 0.1).abs() <= 0.01, "drop fraction {frac}");
    }
}

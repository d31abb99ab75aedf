//! Provider cost, user revenue and profit margin in exact rational dollars.

use num_rational::Ratio;
use num_traits::{Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::sim::Millis;

pub type Dollars = Ratio<i128>;

const MS_PER_HOUR: i128 = 3_600_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReservationBilling {
    /// Reserved GPUs are billed for the whole session.
    WholeSession,
    /// Only while a task runs.
    UsageOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BillingConfig {
    /// Provider price of one full host, dollars per hour.
    pub host_rate: f64,
    pub user_multiplier: f64,
    pub standby_fraction: f64,
    pub reservation: ReservationBilling,
}

impl Default for BillingConfig {
    fn default() -> Self {
        Self {
            host_rate: 10.0,
            user_multiplier: 1.15,
            standby_fraction: 0.125,
            reservation: ReservationBilling::WholeSession,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("billing.{field}: {msg}")]
pub struct BillingError {
    pub field: &'static str,
    pub msg: String,
}

impl BillingConfig {
    pub fn validate(&self) -> Result<(), BillingError> {
        let err = |field, msg: &str| {
            Err(BillingError {
                field,
                msg: msg.to_string(),
            })
        };
        if !(self.host_rate >= 0.0 && self.host_rate.is_finite()) {
            return err("host_rate", "must be finite and non-negative");
        }
        if !(self.user_multiplier >= 1.0 && self.user_multiplier.is_finite()) {
            return err("user_multiplier", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.standby_fraction) {
            return err("standby_fraction", "must lie in [0, 1]");
        }
        Ok(())
    }

    fn rate(&self) -> Dollars {
        dollars(self.host_rate)
    }

    fn user_rate(&self) -> Dollars {
        self.rate() * dollars(self.user_multiplier)
    }
}

/// Exact value of a configured decimal, to the micro-unit.
pub fn dollars(x: f64) -> Dollars {
    Ratio::new((x * 1e6).round() as i128, 1_000_000)
}

pub fn hours(ms: Millis) -> Dollars {
    Ratio::new(ms as i128, MS_PER_HOUR)
}

/// What a replica (or reserved container) is doing during an interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplicaState {
    Standby,
    Executing { gpus: u32 },
    Reserved { gpus: u32 },
}

/// User charge for one replica over `dt_ms`.
pub fn bill_interval(state: ReplicaState, host_gpus: u32, dt_ms: Millis, cfg: &BillingConfig) -> Dollars {
    let dt = hours(dt_ms);
    let g = Ratio::from_integer(host_gpus.max(1) as i128);
    match state {
        ReplicaState::Standby => cfg.user_rate() * dollars(cfg.standby_fraction) * dt,
        ReplicaState::Executing { gpus } | ReplicaState::Reserved { gpus } => {
            cfg.user_rate() * Ratio::from_integer(gpus as i128) / g * dt
        }
    }
}

/// Provider cost of keeping `hosts` provisioned for `dt_ms`.
pub fn provider_cost(hosts: u64, host_rate: f64, dt_ms: Millis) -> Dollars {
    Ratio::from_integer(hosts as i128) * dollars(host_rate) * hours(dt_ms)
}

/// (revenue - cost) / revenue, undefined without revenue.
pub fn profit_margin(revenue: &Dollars, cost: &Dollars) -> Option<f64> {
    if !revenue.is_positive() {
        return None;
    }
    ((revenue - cost) / revenue).to_f64()
}

/// Whole cents, half away from zero.
pub fn to_cents(d: &Dollars) -> i128 {
    let c = d * Ratio::from_integer(100);
    let r = c.abs().round();
    let v = r.to_integer();
    if c.is_negative() {
        -v
    } else {
        v
    }
}

/// Serde helper writing dollars as a cents string.
pub fn serialize_dollars<S: serde::Serializer>(d: &Dollars, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format_cents(d))
}

pub fn format_cents(d: &Dollars) -> String {
    let c = to_cents(d);
    let sign = if c < 0 { "-" } else { "" };
    format!("{sign}{}.{:02}", c.abs() / 100, c.abs() % 100)
}

/// Running totals for one simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Ledger {
    pub cost: Dollars,
    pub revenue: Dollars,
}

impl Default for Ledger {
    fn default() -> Self {
        Self {
            cost: Dollars::zero(),
            revenue: Dollars::zero(),
        }
    }
}

impl Ledger {
    pub fn margin(&self) -> Option<f64> {
        profit_margin(&self.revenue, &self.cost)
    }
}

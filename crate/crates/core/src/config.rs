//! Experiment configuration: one TOML file per run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::billing::BillingConfig;
use crate::cluster::ClusterConfig;
use crate::datastore::DatastoreConfig;
use crate::kernel::GroupConfig;
use crate::policies::{PolicyConfig, SrLimitMode};
use crate::scheduler::{AutoscalerConfig, MigrationConfig};
use crate::sim::{LatencyDist, Millis, WeightedDist};
use crate::workload::{generate, parse_trace, GenParams, Session};

/// Environment variable that replaces the config path given on the command
/// line.
pub const CONFIG_ENV: &str = "NBSIM_CONFIG";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{field}: {msg}")]
    Invalid { field: String, msg: String },
}

fn invalid(field: impl Into<String>, msg: impl ToString) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        msg: msg.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub horizon_s: f64,
    pub sample_interval_s: f64,
    /// Write every fired event to trace.ndjson.
    pub trace: bool,
    /// Host snapshots are written every this many samples.
    pub host_snapshot_every: u32,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            horizon_s: 63_000.0,
            sample_interval_s: 15.0,
            trace: false,
            host_snapshot_every: 20,
        }
    }
}

/// Scheduler-side latencies on the request path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyConfig {
    pub gs_processing: LatencyDist,
    /// Global to local scheduler, and the reply path.
    pub gs_ls_hop: LatencyDist,
    pub ls_processing: LatencyDist,
    pub replica_preprocessing: LatencyDist,
    /// Replication of a small state delta.
    pub sync: LatencyDist,
    /// Deltas above this go through the data store.
    pub large_object_threshold_bytes: u64,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            gs_processing: LatencyDist::lognormal(2.0, 0.5),
            gs_ls_hop: LatencyDist::lognormal(1.0, 0.3),
            ls_processing: LatencyDist::lognormal(1.0, 0.3),
            replica_preprocessing: LatencyDist::lognormal(2.0, 0.3),
            sync: default_sync(),
            large_object_threshold_bytes: 10 << 20,
        }
    }
}

/// Two-component fit of the small-delta synchronization latency: a fast
/// body and a slow mode. The slow mode carries 3% of the mass so that P99
/// falls where the CDF is steep and a finite sample pins it down.
pub fn default_sync() -> LatencyDist {
    LatencyDist::Mixture {
        components: vec![
            WeightedDist {
                weight: 0.97,
                dist: LatencyDist::lognormal(33.307, 0.3411),
            },
            WeightedDist {
                weight: 0.03,
                dist: LatencyDist::lognormal(216.28, 0.5),
            },
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoscalerSection {
    pub enabled: bool,
    pub f: f64,
    pub interval_s: f64,
    pub min_hosts: u32,
    pub max_scale_in: u32,
    /// The policy's own buffer when omitted.
    pub buffer_hosts: Option<u32>,
}

impl Default for AutoscalerSection {
    fn default() -> Self {
        let d = AutoscalerConfig::default();
        Self {
            enabled: d.enabled,
            f: d.f,
            interval_s: d.interval_ms as f64 / 1000.0,
            min_hosts: d.min_hosts,
            max_scale_in: d.max_scale_in,
            buffer_hosts: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MigrationSection {
    pub retries: u32,
    pub retry_interval_s: f64,
}

impl Default for MigrationSection {
    fn default() -> Self {
        Self {
            retries: 3,
            retry_interval_s: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    /// CSV trace, relative to the config file.
    #[serde(default)]
    pub trace: Option<PathBuf>,
    /// Synthetic trace parameters, used when no trace is given.
    #[serde(default)]
    pub synthetic: Option<GenParams>,
    /// Generator seed; the experiment seed when omitted.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        Self {
            trace: None,
            synthetic: Some(GenParams::default()),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sim: SimSection,
    pub policy: PolicyConfig,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub kernel: GroupConfig,
    #[serde(default)]
    pub latency: LatencyConfig,
    #[serde(default)]
    pub datastore: DatastoreConfig,
    #[serde(default)]
    pub billing: BillingConfig,
    #[serde(default)]
    pub workload: WorkloadSection,
    #[serde(default)]
    pub autoscaler: AutoscalerSection,
    #[serde(default)]
    pub migration: MigrationSection,
    #[serde(default)]
    pub output: OutputSection,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn secs_to_ms(s: f64) -> Millis {
    (s * 1000.0).round() as Millis
}

impl ExperimentConfig {
    /// A synthetic-trace experiment with every default.
    pub fn new(policy: PolicyConfig) -> Self {
        Self {
            seed: 0,
            sim: SimSection::default(),
            policy,
            cluster: ClusterConfig::default(),
            kernel: GroupConfig::default(),
            latency: LatencyConfig::default(),
            datastore: DatastoreConfig::default(),
            billing: BillingConfig::default(),
            workload: WorkloadSection::default(),
            autoscaler: AutoscalerSection::default(),
            migration: MigrationSection::default(),
            output: OutputSection::default(),
            base_dir: PathBuf::from("."),
        }
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base)
    }

    pub fn horizon_ms(&self) -> Millis {
        secs_to_ms(self.sim.horizon_s)
    }

    pub fn sample_interval_ms(&self) -> Millis {
        secs_to_ms(self.sim.sample_interval_s)
    }

    pub fn autoscaler(&self) -> AutoscalerConfig {
        let a = &self.autoscaler;
        AutoscalerConfig {
            enabled: a.enabled,
            f: a.f,
            interval_ms: secs_to_ms(a.interval_s),
            min_hosts: a.min_hosts,
            max_scale_in: a.max_scale_in,
            buffer_hosts: a.buffer_hosts.unwrap_or(self.policy.kind.default_buffer_hosts()),
        }
    }

    pub fn migration(&self) -> MigrationConfig {
        MigrationConfig {
            retries: self.migration.retries,
            retry_interval_ms: secs_to_ms(self.migration.retry_interval_s),
        }
    }

    /// Cluster settings with the policy's replica count and pool size, and
    /// a fixed SR limit also applied as the per-host watermark.
    pub fn effective_cluster(&self) -> ClusterConfig {
        let mut c = self.cluster.clone();
        c.replicas = self.policy.replicas();
        c.prewarm_per_host = self.policy.prewarm();
        if let SrLimitMode::Fixed { limit } = self.policy.sr_limit {
            c.high_watermark = c.high_watermark.min(limit);
        }
        c
    }

    pub fn trace_path(&self) -> Option<PathBuf> {
        self.workload.trace.as_ref().map(|p| self.base_dir.join(p))
    }

    /// The trace this experiment replays.
    pub fn sessions(&self) -> Result<Vec<Session>, ConfigError> {
        if let Some(path) = self.trace_path() {
            let f = fs::File::open(&path).map_err(|source| ConfigError::Io { path: path.clone(), source })?;
            return parse_trace(f).map_err(|e| invalid("workload.trace", format!("{}: {e}", path.display())));
        }
        let params = self.workload.synthetic.clone().unwrap_or_default();
        generate(&params, self.workload.seed.unwrap_or(self.seed)).map_err(|e| invalid("workload.synthetic", e))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.policy.validate().map_err(|e| match e {
            crate::policies::PolicyError::Invalid { field, msg } => invalid(format!("policy.{field}"), msg),
            other => invalid("policy.kind", other),
        })?;
        let pos = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(field, format!("must be positive, got {v}")))
            }
        };
        pos("sim.horizon_s", self.sim.horizon_s)?;
        pos("sim.sample_interval_s", self.sim.sample_interval_s)?;
        if self.sim.host_snapshot_every == 0 {
            return Err(invalid("sim.host_snapshot_every", "must be at least 1"));
        }

        let c = &self.cluster;
        if c.gpus_per_host == 0 {
            return Err(invalid("cluster.gpus_per_host", "must be at least 1"));
        }
        if c.max_hosts < c.initial_hosts {
            return Err(invalid("cluster.max_hosts", "below initial_hosts"));
        }
        if c.max_hosts < self.policy.replicas() {
            return Err(invalid("cluster.max_hosts", "fewer hosts than replicas per kernel"));
        }
        pos("cluster.high_watermark", c.high_watermark)?;
        for (field, d) in [("cluster.cold_start", &c.cold_start), ("cluster.host_boot", &c.host_boot)] {
            d.validate().map_err(|e| invalid(field, e))?;
        }

        let l = &self.latency;
        for (field, d) in [
            ("latency.gs_processing", &l.gs_processing),
            ("latency.gs_ls_hop", &l.gs_ls_hop),
            ("latency.ls_processing", &l.ls_processing),
            ("latency.replica_preprocessing", &l.replica_preprocessing),
            ("latency.sync", &l.sync),
            ("datastore.read", &self.datastore.read),
            ("datastore.write", &self.datastore.write),
        ] {
            d.validate().map_err(|e| invalid(field, e))?;
        }
        for (field, link) in [("kernel.link", &self.kernel.link), ("kernel.ls_link", &self.kernel.ls_link)] {
            link.validate().map_err(|e| invalid(field, e))?;
        }
        if self.kernel.tick_ms == 0 {
            return Err(invalid("kernel.tick_ms", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.datastore.write_failure_probability) {
            return Err(invalid("datastore.write_failure_probability", "must lie in [0, 1)"));
        }

        self.billing.validate().map_err(|e| invalid(format!("billing.{}", e.field), e.msg))?;

        let a = &self.autoscaler;
        if !(a.f >= 1.0 && a.f.is_finite()) {
            return Err(invalid("autoscaler.f", format!("must be at least 1, got {}", a.f)));
        }
        pos("autoscaler.interval_s", a.interval_s)?;
        pos("migration.retry_interval_s", self.migration.retry_interval_s.max(f64::MIN_POSITIVE))?;

        match (&self.workload.trace, &self.workload.synthetic) {
            (Some(_), Some(_)) => return Err(invalid("workload", "set either trace or synthetic, not both")),
            (Some(_), None) => {
                let p = self.trace_path().unwrap();
                if !p.is_file() {
                    return Err(invalid("workload.trace", format!("{} does not exist", p.display())));
                }
            }
            (None, Some(g)) => g.validate().map_err(|e| invalid("workload.synthetic", e))?,
            (None, None) => {}
        }
        Ok(())
    }
}

//! Per-request timelines, periodic samples and result files.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;

use crate::billing::{format_cents, profit_margin, Dollars};
use crate::policies::PolicyKind;
use crate::sim::Millis;
use crate::workload::Percentiles;

/// Critical-path steps of one execute request.
pub const STEP_NAMES: [&str; 9] = [
    "gs_processing",
    "gs_to_ls",
    "ls_processing",
    "ls_to_replica",
    "replica_preprocessing",
    "executor_selection",
    "pre_execution",
    "execution",
    "post_processing",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestTimeline {
    pub election_id: String,
    pub session_id: u64,
    pub event_index: usize,
    pub policy: PolicyKind,
    pub submit_ms: Millis,
    /// End time of each step. Step 9 may finish after the reply when it is
    /// asynchronous.
    pub step_ends: [Millis; 9],
    pub reply_ms: Millis,
    /// Step 9 delays the reply.
    pub post_on_critical_path: bool,
    pub migrated: bool,
    /// Waited for kernel placement, a container or a host.
    pub waited_for_resources: bool,
    pub error: bool,
}

impl RequestTimeline {
    /// Timeline of a request that ran to completion. `durations` are the
    /// step lengths in order.
    pub fn from_durations(
        election_id: String,
        session_id: u64,
        event_index: usize,
        policy: PolicyKind,
        submit_ms: Millis,
        durations: [Millis; 9],
        post_on_critical_path: bool,
        reply_hop_ms: Millis,
    ) -> Self {
        let mut step_ends = [0; 9];
        let mut t = submit_ms;
        for (i, d) in durations.iter().enumerate() {
            t += d;
            step_ends[i] = t;
        }
        let reply_ms = if post_on_critical_path { step_ends[8] } else { step_ends[7] } + reply_hop_ms;
        Self {
            election_id,
            session_id,
            event_index,
            policy,
            submit_ms,
            step_ends,
            reply_ms,
            post_on_critical_path,
            migrated: false,
            waited_for_resources: false,
            error: false,
        }
    }

    pub fn step_durations(&self) -> [Millis; 9] {
        let mut out = [0; 9];
        let mut prev = self.submit_ms;
        for (i, &e) in self.step_ends.iter().enumerate() {
            out[i] = e.saturating_sub(prev);
            prev = e;
        }
        out
    }

    /// Submit to the start of execution.
    pub fn interactivity_delay_ms(&self) -> Millis {
        self.step_ends[6] - self.submit_ms
    }

    pub fn tct_ms(&self) -> Millis {
        self.reply_ms - self.submit_ms
    }

    /// Started without migration or waiting for resources.
    pub fn immediate(&self) -> bool {
        !self.error && !self.migrated && !self.waited_for_resources
    }

    pub fn is_consistent(&self) -> bool {
        self.step_ends[..8].windows(2).all(|w| w[0] <= w[1])
            && self.step_ends[0] >= self.submit_ms
            && self.interactivity_delay_ms() <= self.tct_ms()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSample {
    pub time_ms: Millis,
    pub provisioned_gpus: u64,
    pub committed_gpus: u64,
    pub oracle_demand: u64,
    pub active_sessions: u64,
    pub active_trainings: u64,
    pub sr: f64,
    #[serde(serialize_with = "crate::billing::serialize_dollars")]
    pub provider_cost_cum: Dollars,
    #[serde(serialize_with = "crate::billing::serialize_dollars")]
    pub revenue_cum: Dollars,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DelaySummary {
    pub interactivity_delay_ms: Percentiles,
    pub tct_ms: Percentiles,
    pub immediate_fraction: f64,
    pub step_means_ms: Vec<(String, f64)>,
}

pub fn summarize(requests: &[RequestTimeline]) -> DelaySummary {
    let ok: Vec<&RequestTimeline> = requests.iter().filter(|r| !r.error).collect();
    let delays = ok.iter().map(|r| r.interactivity_delay_ms() as f64).collect();
    let tcts = ok.iter().map(|r| r.tct_ms() as f64).collect();
    let immediate = if requests.is_empty() {
        0.0
    } else {
        requests.iter().filter(|r| r.immediate()).count() as f64 / requests.len() as f64
    };
    let mut sums = [0f64; 9];
    for r in &ok {
        for (s, d) in sums.iter_mut().zip(r.step_durations()) {
            *s += d as f64;
        }
    }
    let n = ok.len().max(1) as f64;
    DelaySummary {
        interactivity_delay_ms: Percentiles::of(delays),
        tct_ms: Percentiles::of(tcts),
        immediate_fraction: immediate,
        step_means_ms: STEP_NAMES.iter().zip(sums).map(|(k, s)| (k.to_string(), s / n)).collect(),
    }
}

fn csv_err(e: csv::Error) -> io::Error {
    io::Error::other(e)
}

pub fn write_gpu_timeline(samples: &[MetricSample], out: impl Write) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["time_s", "provisioned", "committed", "oracle_demand", "active_sessions", "active_trainings", "sr"])
        .map_err(csv_err)?;
    for s in samples {
        w.write_record([
            (s.time_ms / 1000).to_string(),
            s.provisioned_gpus.to_string(),
            s.committed_gpus.to_string(),
            s.oracle_demand.to_string(),
            s.active_sessions.to_string(),
            s.active_trainings.to_string(),
            format!("{:.4}", s.sr),
        ])
        .map_err(csv_err)?;
    }
    w.flush()
}

pub fn write_billing(samples: &[MetricSample], out: impl Write) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["time_s", "cost_cum", "revenue_cum", "margin"]).map_err(csv_err)?;
    for s in samples {
        let margin = profit_margin(&s.revenue_cum, &s.provider_cost_cum).map_or(String::from("NA"), |m| format!("{m:.6}"));
        w.write_record([
            (s.time_ms / 1000).to_string(),
            format_cents(&s.provider_cost_cum),
            format_cents(&s.revenue_cum),
            margin,
        ])
        .map_err(csv_err)?;
    }
    w.flush()
}

pub fn write_requests(requests: &[RequestTimeline], out: impl Write) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "election_id",
        "session_id",
        "event_index",
        "policy",
        "submit_ms",
        "interactivity_delay_ms",
        "tct_ms",
        "immediate",
        "migrated",
        "error",
    ];
    header.extend(STEP_NAMES);
    w.write_record(&header).map_err(csv_err)?;
    for r in requests {
        let mut row = vec![
            r.election_id.clone(),
            r.session_id.to_string(),
            r.event_index.to_string(),
            r.policy.to_string(),
            r.submit_ms.to_string(),
            r.interactivity_delay_ms().to_string(),
            r.tct_ms().to_string(),
            r.immediate().to_string(),
            r.migrated.to_string(),
            r.error.to_string(),
        ];
        row.extend(r.step_durations().iter().map(|d| d.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()
}

/// One row of events.csv.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventRow {
    pub time_ms: Millis,
    pub kind: String,
    pub detail: String,
}

pub fn write_events(rows: &[EventRow], out: impl Write) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["time_s", "kind", "detail"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([format!("{:.3}", r.time_ms as f64 / 1000.0), r.kind.clone(), r.detail.clone()])
            .map_err(csv_err)?;
    }
    w.flush()
}

pub fn write_json(path: &Path, value: &impl Serialize) -> io::Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    s.push('\n');
    fs::write(path, s)
}

pub fn write_ndjson<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> io::Result<()> {
    let mut out = io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut out, &r).map_err(io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn timeline(durations: [Millis; 9], post: bool) -> RequestTimeline {
        RequestTimeline::from_durations("k1-r0-a0".into(), 1, 0, PolicyKind::DefaultReplicated, 0, durations, post, 0)
    }

    #[test]
    fn delay_and_tct_definitions() {
        // Execution starts at 50 ms; reply at 120,450 ms.
        let r = timeline([10, 5, 5, 5, 5, 10, 10, 120_400, 70], false);
        assert_eq!(r.interactivity_delay_ms(), 50);
        assert_eq!(r.tct_ms(), 120_450);
        assert!(r.is_consistent());
        // Asynchronous post-processing never moves the reply.
        let slow_sync = timeline([10, 5, 5, 5, 5, 10, 10, 120_400, 99_999], false);
        assert_eq!(slow_sync.tct_ms(), 120_450);
        let blocking = timeline([10, 5, 5, 5, 5, 10, 10, 120_400, 70], true);
        assert_eq!(blocking.tct_ms(), 120_520);
    }

    #[test]
    fn immediate_flags() {
        let mut r = timeline([0; 9], false);
        assert!(r.immediate());
        r.migrated = true;
        assert!(!r.immediate());
        let s = summarize(&[r, timeline([1; 9], false)]);
        assert_eq!(s.immediate_fraction, 0.5);
    }

    #[test]
    fn empty_outputs_have_headers() {
        let mut buf = Vec::new();
        write_gpu_timeline(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "time_s,provisioned,committed,oracle_demand,active_sessions,active_trainings,sr\n");
        let mut buf = Vec::new();
        write_requests(&[], &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("election_id,"));
        let mut buf = Vec::new();
        write_billing(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "time_s,cost_cum,revenue_cum,margin\n");
    }
}

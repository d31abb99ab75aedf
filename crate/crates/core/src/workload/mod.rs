//! Notebook-session traces: CSV format, synthetic generation, statistics and
//! replay into simulator events.

mod generator;
mod stats;

pub use generator::{generate, DeltaMix, GenParams, GeneratorError, PercentileCurve};
pub use stats::{compute_stats, percentile, Percentiles, TraceStats};

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::cluster::ResourceRequest;
use crate::sim::Millis;

pub const TRACE_HEADER: [&str; 11] = [
    "session_id",
    "session_start_s",
    "session_end_s",
    "req_millicpus",
    "req_mem_mb",
    "req_gpus",
    "req_vram_gb",
    "event_submit_s",
    "event_duration_s",
    "event_gpus",
    "event_delta_bytes",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrainingEvent {
    pub session_id: u64,
    pub submit_ms: Millis,
    pub duration_ms: Millis,
    pub gpus: u32,
    pub vram_gb: u32,
    pub delta_bytes: u64,
}

impl TrainingEvent {
    pub fn end_ms(&self) -> Millis {
        self.submit_ms + self.duration_ms
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Session {
    pub session_id: u64,
    pub start_ms: Millis,
    pub end_ms: Millis,
    pub request: ResourceRequest,
    pub events: Vec<TrainingEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Invalid { line: u64, msg: String },
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Deserialize)]
struct Row {
    session_id: u64,
    session_start_s: f64,
    session_end_s: f64,
    req_millicpus: u64,
    req_mem_mb: u64,
    req_gpus: u32,
    req_vram_gb: u32,
    event_submit_s: f64,
    event_duration_s: f64,
    event_gpus: u32,
    event_delta_bytes: u64,
}

fn to_ms(s: f64) -> Option<Millis> {
    (s.is_finite() && s >= 0.0).then(|| (s * 1000.0).round() as Millis)
}

fn seconds(ms: Millis) -> String {
    format!("{}.{:03}", ms / 1000, ms % 1000)
}

/// Parse and validate a trace. Events are sorted by submit time per session.
pub fn parse_trace(input: impl Read) -> Result<Vec<Session>, TraceError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rdr.headers().map_err(|e| TraceError::Csv(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != TRACE_HEADER {
        return Err(TraceError::Invalid {
            line: 1,
            msg: format!("header must be exactly {}", TRACE_HEADER.join(",")),
        });
    }
    let mut sessions: BTreeMap<u64, (Session, u64)> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| TraceError::Csv(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |msg: String| TraceError::Invalid { line, msg };
        let row: Row = rec.deserialize(Some(&header)).map_err(|e| bad(e.to_string()))?;
        let (Some(start), Some(end), Some(submit), Some(dur)) = (
            to_ms(row.session_start_s),
            to_ms(row.session_end_s),
            to_ms(row.event_submit_s),
            to_ms(row.event_duration_s),
        ) else {
            return Err(bad("times must be finite and non-negative".into()));
        };
        if dur == 0 {
            return Err(bad("event duration must be positive".into()));
        }
        if end < start {
            return Err(bad("session ends before it starts".into()));
        }
        if row.event_gpus > row.req_gpus {
            return Err(bad("event uses more GPUs than the session requested".into()));
        }
        if submit < start || submit + dur > end {
            return Err(bad("event lies outside its session".into()));
        }
        let request = ResourceRequest {
            millicpus: row.req_millicpus,
            memory_mb: row.req_mem_mb,
            gpus: row.req_gpus,
            vram_gb: row.req_vram_gb,
        };
        let entry = sessions.entry(row.session_id).or_insert_with(|| {
            (
                Session {
                    session_id: row.session_id,
                    start_ms: start,
                    end_ms: end,
                    request,
                    events: Vec::new(),
                },
                line,
            )
        });
        let s = &mut entry.0;
        if s.start_ms != start || s.end_ms != end || s.request != request {
            return Err(bad(format!("session {} columns differ between rows", row.session_id)));
        }
        s.events.push(TrainingEvent {
            session_id: row.session_id,
            submit_ms: submit,
            duration_ms: dur,
            gpus: row.event_gpus,
            vram_gb: if row.req_gpus == 0 {
                0
            } else {
                row.req_vram_gb * row.event_gpus / row.req_gpus
            },
            delta_bytes: row.event_delta_bytes,
        });
    }
    let mut out = Vec::with_capacity(sessions.len());
    for (_, (mut s, line)) in sessions {
        s.events.sort_by_key(|e| e.submit_ms);
        for w in s.events.windows(2) {
            if w[0].end_ms() > w[1].submit_ms {
                return Err(TraceError::Invalid {
                    line,
                    msg: format!("session {} has overlapping events", s.session_id),
                });
            }
        }
        out.push(s);
    }
    Ok(out)
}

pub fn write_trace(sessions: &[Session], out: impl Write) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| TraceError::Csv(e.to_string());
    w.write_record(TRACE_HEADER).map_err(err)?;
    for s in sessions {
        for e in &s.events {
            w.write_record([
                s.session_id.to_string(),
                seconds(s.start_ms),
                seconds(s.end_ms),
                s.request.millicpus.to_string(),
                s.request.memory_mb.to_string(),
                s.request.gpus.to_string(),
                s.request.vram_gb.to_string(),
                seconds(e.submit_ms),
                seconds(e.duration_ms),
                e.gpus.to_string(),
                e.delta_bytes.to_string(),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| TraceError::Csv(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReplayEvent {
    SessionStart { session: usize },
    Execute { session: usize, event: usize },
    SessionEnd { session: usize },
}

/// Simulator inputs in time order. At equal times, starts come before
/// executions and executions before ends.
pub fn replay(sessions: &[Session]) -> Vec<(Millis, ReplayEvent)> {
    let mut out = Vec::new();
    for (i, s) in sessions.iter().enumerate() {
        out.push((s.start_ms, ReplayEvent::SessionStart { session: i }));
        for (j, e) in s.events.iter().enumerate() {
            out.push((e.submit_ms, ReplayEvent::Execute { session: i, event: j }));
        }
        out.push((s.end_ms, ReplayEvent::SessionEnd { session: i }));
    }
    out.sort();
    out
}

#[cfg(test)]
mod tests;

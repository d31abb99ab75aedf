//! Result files of one run.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use super::RunResult;
use crate::metrics::{write_billing, write_events, write_gpu_timeline, write_json, write_ndjson, write_requests, EventRow};
use crate::scheduler::{MigrationOutcome, ScalingKind, SchedulerEvent};

/// Migrations, scaling actions and reclamations, in time order.
pub(super) fn event_rows(log: &[SchedulerEvent]) -> Vec<EventRow> {
    let mut rows: Vec<EventRow> = log
        .iter()
        .filter_map(|e| {
            let (kind, detail) = match e {
                SchedulerEvent::Migration { record: r, .. } => (
                    "migration",
                    format!(
                        "kernel={} replica={} source={} target={} prewarm={} attempts={} outcome={} delay_ms={}",
                        r.kernel_id,
                        r.replica,
                        r.source,
                        r.target.map_or("none".to_string(), |t| t.to_string()),
                        r.used_prewarm,
                        r.attempts,
                        if r.outcome == MigrationOutcome::Success { "success" } else { "aborted" },
                        r.delay_ms
                    ),
                ),
                SchedulerEvent::Scaling { action, cluster_sr } => match &action.kind {
                    ScalingKind::ScaleOut { hosts } => ("scale_out", format!("hosts={hosts} trigger={:?} sr={cluster_sr:.3}", action.trigger)),
                    ScalingKind::ScaleIn { hosts } => ("scale_in", format!("hosts={hosts:?} trigger={:?} sr={cluster_sr:.3}", action.trigger)),
                    ScalingKind::None => return None,
                },
                SchedulerEvent::Reclamation {
                    session_id,
                    lost_gpu_seconds,
                    ..
                } => ("reclamation", format!("session={session_id} lost_gpu_seconds={lost_gpu_seconds:.1}")),
                _ => return None,
            };
            Some(EventRow {
                time_ms: e.time_ms(),
                kind: kind.to_string(),
                detail,
            })
        })
        .collect();
    rows.sort_by_key(|a| a.time_ms);
    rows
}

/// Write every result file into `dir`, creating it if needed.
pub fn write_outputs(result: &RunResult, dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let file = |name: &str| File::create(dir.join(name)).map(BufWriter::new);
    write_gpu_timeline(&result.samples, file("gpu_timeline.csv")?)?;
    write_billing(&result.samples, file("billing.csv")?)?;
    let ok: Vec<_> = result.requests.iter().filter(|r| !r.error).cloned().collect();
    write_requests(&ok, file("requests.csv")?)?;
    write_events(&result.events, file("events.csv")?)?;
    write_json(&dir.join("stats.json"), &result.stats)?;
    write_json(&dir.join("datastore.json"), &result.datastore)?;
    write_ndjson(&dir.join("elections.ndjson"), &result.audits)?;
    write_ndjson(&dir.join("hosts.ndjson"), &result.host_snapshots)?;
    result.scheduler_log.write_ndjson(file("scheduler.ndjson")?)?;

    let mut w = csv::Writer::from_writer(file("gpu_hours_saved.csv")?);
    let mut header = vec!["time_s".to_string()];
    header.extend(result.gpu_hours_saved.iter().map(|(h, _)| format!("interval_{h}h")));
    w.write_record(&header)?;
    for (i, s) in result.samples.iter().enumerate() {
        let mut row = vec![(s.time_ms / 1000).to_string()];
        row.extend(result.gpu_hours_saved.iter().map(|(_, c)| format!("{:.4}", c[i])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use nbsim_core::config::{ExperimentConfig, CONFIG_ENV};
use nbsim_core::platform::{run_traced, write_outputs, PlatformError, RunStats};
use nbsim_core::workload::{compute_stats, generate, parse_trace, write_trace, GenParams};

#[derive(Parser)]
#[command(name = "nbsim", version, about = "Notebook-kernel GPU cluster simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment and write its result files.
    Run {
        /// Experiment config. NBSIM_CONFIG, when set, takes precedence.
        config: Option<PathBuf>,
        /// Output directory, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write every simulation event to trace.ndjson.
        #[arg(long)]
        trace: bool,
    },
    /// Generate a synthetic trace.
    GenTrace {
        /// Generator parameters (TOML). Omitted keys take default values.
        params: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print summary statistics of a trace as JSON.
    Stats {
        trace: PathBuf,
        /// Include the reserved/used GPU timeline.
        #[arg(long)]
        timeline: bool,
        /// Timeline sample interval in seconds.
        #[arg(long, default_value_t = 15.0)]
        interval: f64,
    },
    /// Run every config matching a glob, in parallel.
    Sweep {
        pattern: String,
        /// Worker threads; defaults to the number of CPUs.
        #[arg(long, short)]
        jobs: Option<usize>,
    },
}

/// Exit status for a run that tripped an invariant.
const EXIT_INVARIANT: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run { config, out, trace } => cmd_run(config, out, trace),
        Cmd::GenTrace { params, seed, out } => cmd_gen(&params, seed, &out),
        Cmd::Stats { trace, timeline, interval } => cmd_stats(&trace, timeline, interval),
        Cmd::Sweep { pattern, jobs } => cmd_sweep(&pattern, jobs),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| matches!(c.downcast_ref(), Some(PlatformError::Invariant { .. }))) {
                ExitCode::from(EXIT_INVARIANT)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn config_path(arg: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    match std::env::var_os(CONFIG_ENV) {
        Some(p) if !p.is_empty() => Ok(PathBuf::from(p)),
        _ => arg.with_context(|| format!("no config given and {CONFIG_ENV} is unset")),
    }
}

fn cmd_run(config: Option<PathBuf>, out: Option<PathBuf>, trace: bool) -> anyhow::Result<ExitCode> {
    let path = config_path(config)?;
    let cfg = ExperimentConfig::load(&path)?;
    let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
    let stats = run_one(&cfg, &dir, trace || cfg.sim.trace)?;
    println!("{}", summary_line(&path, &stats));
    Ok(ExitCode::SUCCESS)
}

/// Run one experiment. Nothing is written unless the config and its trace
/// load cleanly.
fn run_one(cfg: &ExperimentConfig, dir: &Path, trace: bool) -> anyhow::Result<RunStats> {
    cfg.validate()?;
    cfg.sessions()?;
    let sink: Option<Box<dyn Write>> = if trace {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let f = File::create(dir.join("trace.ndjson"))?;
        Some(Box::new(BufWriter::new(f)))
    } else {
        None
    };
    let result = run_traced(cfg, sink)?;
    write_outputs(&result, dir).with_context(|| format!("writing results to {}", dir.display()))?;
    Ok(result.stats)
}

fn summary_line(path: &Path, s: &RunStats) -> String {
    format!(
        "{}: policy={} completed={} errors={} provisioned_gpu_h={:.2} mean_delay_ms={:.1} immediate={:.3} cost={} revenue={}",
        path.display(),
        s.policy,
        s.completed_requests,
        s.error_requests,
        s.provisioned_gpu_hours,
        s.delays.interactivity_delay_ms.mean,
        s.delays.immediate_fraction,
        s.provider_cost,
        s.revenue
    )
}

fn cmd_gen(params: &Path, seed: u64, out: &Path) -> anyhow::Result<ExitCode> {
    let text = fs::read_to_string(params).with_context(|| format!("reading {}", params.display()))?;
    let p: GenParams = toml::from_str(&text).with_context(|| format!("parsing {}", params.display()))?;
    let sessions = generate(&p, seed)?;
    if let Some(parent) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let f = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_trace(&sessions, BufWriter::new(f))?;
    let events: usize = sessions.iter().map(|s| s.events.len()).sum();
    eprintln!("wrote {} sessions, {events} events to {}", sessions.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_stats(trace: &Path, timeline: bool, interval: f64) -> anyhow::Result<ExitCode> {
    if !(interval > 0.0 && interval.is_finite()) {
        bail!("--interval must be positive");
    }
    let f = File::open(trace).with_context(|| format!("opening {}", trace.display()))?;
    let sessions = parse_trace(f).with_context(|| format!("parsing {}", trace.display()))?;
    let mut stats = compute_stats(&sessions, (interval * 1000.0).round() as u64);
    if !timeline {
        stats.timeline.clear();
    }
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(&stats)?) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(ExitCode::SUCCESS),
    }
}

fn cmd_sweep(pattern: &str, jobs: Option<usize>) -> anyhow::Result<ExitCode> {
    let mut paths: Vec<PathBuf> = glob::glob(pattern)?.collect::<Result<_, _>>()?;
    paths.sort();
    if paths.is_empty() {
        bail!("no configs match {pattern}");
    }
    let configs: Vec<ExperimentConfig> = paths
        .iter()
        .map(|p| ExperimentConfig::load(p).with_context(|| p.display().to_string()))
        .collect::<Result<_, _>>()?;
    let workers = jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, configs.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<anyhow::Result<RunStats>>>> = Mutex::new((0..configs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cfg) = configs.get(i) else { break };
                let r = run_one(cfg, &cfg.output.dir, cfg.sim.trace);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });

    let mut failed = 0;
    let mut invariant = false;
    for (path, r) in paths.iter().zip(results.into_inner().unwrap()) {
        match r.expect("every config ran") {
            Ok(stats) => println!("{}", summary_line(path, &stats)),
            Err(e) => {
                failed += 1;
                invariant |= e.chain().any(|c| matches!(c.downcast_ref(), Some(PlatformError::Invariant { .. })));
                eprintln!("{}: error: {e:#}", path.display());
            }
        }
    }
    Ok(match (failed, invariant) {
        (0, _) => ExitCode::SUCCESS,
        (_, true) => ExitCode::from(EXIT_INVARIANT),
        _ => ExitCode::FAILURE,
    })
}

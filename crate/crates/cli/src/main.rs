//! `flightq` command line: run, validate, report and compare scenarios.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use flightq::report::{compare_with_metrics, read_metrics_csv, read_trace, render_summary, write_metrics_csv, write_ticks_csv};
use flightq::scenario::{gallery, load_scenario, render_scenario, Scenario, ScenarioError};
use flightq::sim::{run, Metrics};
use flightq::workload::write_arrivals_csv;
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "flightq", version, about = "Collision-free staging queues for drones at narrow openings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario; writes trace.jsonl and metrics.csv.
    Run(RunArgs),
    /// Check a scenario file and list every problem found.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Summarize a trace and write a per-tick CSV.
    Report(ReportArgs),
    /// Run two scenario variants over many seeds side by side.
    Compare(CompareArgs),
    /// List the built-in scenarios or export them as files.
    Gallery {
        /// Directory to write `<name>.toml` files into; lists names when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the arrival list a scenario generates for a seed.
    Workload {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Overrides {
    /// Override `sim.horizon`, seconds.
    #[arg(long)]
    horizon: Option<f64>,
    /// Override `sim.dt`, seconds.
    #[arg(long)]
    dt: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Workload seed; defaults to `sim.seed` from the scenario.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    /// Print nothing on success.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Metrics to cross-check; defaults to `metrics.csv` next to the trace.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Per-tick CSV destination; defaults to `ticks.csv` next to the trace.
    #[arg(long)]
    ticks: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

/// Exit status of `run` when the audits flagged the run.
const EXIT_UNSAFE: u8 = 2;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FLIGHTQ_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Validate { scenario } => cmd_validate(&scenario),
        Command::Report(args) => cmd_report(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Gallery { out } => cmd_gallery(out),
        Command::Workload { scenario, seed, out } => cmd_workload(&scenario, seed, out),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load(path: &Path, overrides: &Overrides) -> Result<Scenario> {
    let mut s = load_scenario(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(h) = overrides.horizon {
        s.sim.horizon = h;
    }
    if let Some(dt) = overrides.dt {
        s.sim.dt = dt;
    }
    let errors = s.validate();
    if !errors.is_empty() {
        return Err(ScenarioError::Invalid(errors)).context("after applying overrides");
    }
    Ok(s)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn cmd_run(args: RunArgs) -> Result<u8> {
    let s = load(&args.scenario, &args.overrides)?;
    let seed = args.seed.unwrap_or(s.sim.seed);
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let trace_path = args.out.join("trace.jsonl");
    let trace = File::create(&trace_path).with_context(|| format!("creating {}", trace_path.display()))?;
    let out = run(&s, seed, Some(Box::new(trace)))?;
    let metrics_path = args.out.join("metrics.csv");
    write_metrics_csv(create(&metrics_path)?, &out.metrics)?;
    for note in &out.breaches {
        eprintln!("invariant breach: {note}");
    }
    if !args.quiet {
        print_metrics(&s.name, seed, &out.metrics);
        println!("wrote {} and {}", trace_path.display(), metrics_path.display());
    }
    Ok(if out.clean() { 0 } else { EXIT_UNSAFE })
}

fn print_metrics(name: &str, seed: u64, m: &Metrics) {
    println!("{name} (seed {seed}): {} spawned, {} admitted, {} failed in {:.2} s", m.spawned, m.admitted, m.failed, m.elapsed);
    println!(
        "  throughput {:.4}/s, transit mean {:.2} s max {:.2} s, min separation {:.3} m, violations {}, breaches {}",
        m.throughput, m.transit_mean, m.transit_max, m.min_separation, m.separation_violations, m.invariant_breaches
    );
}

fn cmd_validate(path: &Path) -> Result<u8> {
    match load_scenario(path) {
        Ok(s) => {
            println!("{}: ok ({} opening(s), dispatch {})", path.display(), s.openings.len(), s.dispatch.mode_name());
            Ok(0)
        }
        Err(ScenarioError::Io { path, source }) => bail!("{path}: {source}"),
        Err(e) => {
            println!("{}: {e}", path.display());
            Ok(1)
        }
    }
}

fn cmd_report(args: ReportArgs) -> Result<u8> {
    let dir = args.trace.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = File::open(&args.trace).with_context(|| format!("opening {}", args.trace.display()))?;
    let summary = read_trace(BufReader::new(file)).with_context(|| format!("reading {}", args.trace.display()))?;
    let ticks_path = args.ticks.unwrap_or_else(|| dir.join("ticks.csv"));
    write_ticks_csv(create(&ticks_path)?, &summary.ticks)?;
    if !args.quiet {
        print!("{}", render_summary(&summary));
        println!("wrote {}", ticks_path.display());
    }
    let metrics_path = args.metrics.or_else(|| Some(dir.join("metrics.csv")).filter(|p| p.exists()));
    let Some(metrics_path) = metrics_path else { return Ok(0) };
    let file = File::open(&metrics_path).with_context(|| format!("opening {}", metrics_path.display()))?;
    let rows = read_metrics_csv(file).with_context(|| format!("reading {}", metrics_path.display()))?;
    let diffs = compare_with_metrics(&summary, &rows);
    if diffs.is_empty() {
        if !args.quiet {
            println!("{} agrees with the trace", metrics_path.display());
        }
        Ok(0)
    } else {
        for d in &diffs {
            eprintln!("mismatch: {d}");
        }
        Ok(1)
    }
}

/// The two scenarios with policy and dispatch mode blanked out must agree.
fn same_but_policy(a: &Scenario, b: &Scenario) -> Result<bool> {
    let blank = |s: &Scenario| -> Result<String> {
        let mut s = s.clone();
        s.name.clear();
        s.dispatch.mode = b.dispatch.mode.clone();
        for o in &mut s.openings {
            o.policy = flightq::Policy::fifo();
        }
        Ok(render_scenario(&s)?)
    };
    Ok(blank(a)? == blank(b)?)
}

fn cmd_compare(args: CompareArgs) -> Result<u8> {
    let a = load(&args.a, &args.overrides)?;
    let b = load(&args.b, &args.overrides)?;
    if !same_but_policy(&a, &b)? {
        bail!("{} and {} differ in more than queue policy or dispatch mode", args.a.display(), args.b.display());
    }
    let rows = (0..args.seeds)
        .into_par_iter()
        .map(|seed| -> Result<(u64, Metrics, Metrics)> {
            let ma = run(&a, seed, None)?.metrics;
            let mb = run(&b, seed, None)?.metrics;
            Ok((seed, ma, mb))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    let opt = |v: f64| if v.is_finite() { format!("{v:.6}") } else { String::new() };
    writeln!(out, "seed,failures_a,failures_b,transit_mean_a,transit_mean_b")?;
    for (seed, ma, mb) in rows {
        writeln!(out, "{seed},{},{},{},{}", ma.failed, mb.failed, opt(ma.transit_mean), opt(mb.transit_mean))?;
    }
    out.flush()?;
    Ok(0)
}

fn cmd_gallery(out: Option<PathBuf>) -> Result<u8> {
    let scenarios = gallery();
    let Some(dir) = out else {
        for s in &scenarios {
            println!("{}", s.name);
        }
        return Ok(0);
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for s in &scenarios {
        let path = dir.join(format!("{}.toml", s.name.replace('-', "_")));
        fs::write(&path, render_scenario(s)?).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(0)
}

fn cmd_workload(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<u8> {
    let s = load_scenario(path).with_context(|| format!("loading {}", path.display()))?;
    let arrivals = s.arrivals(seed.unwrap_or(s.sim.seed))?;
    match out {
        Some(p) => write_arrivals_csv(&arrivals, create(&p)?)?,
        None => write_arrivals_csv(&arrivals, io::stdout().lock())?,
    }
    Ok(0)
}

//! Command-line front end. Exit codes: 0 success, 2 configuration error,
//! 3 contract violation or aborted run, 4 I/O error.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{load_config_with, to_json};
use crate::engine::run_with;
use crate::gen::random_system;
use crate::metrics::MetricsReport;
use crate::model::{CostField, CostModel, RunState};
use crate::schedulers::SchedulerRegistry;
use crate::sweep::{run_sweep, write_summary, SweepError};
use crate::time::Time;
use crate::trace::Trace;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CONTRACT: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Trace records echoed to stderr when a run aborts.
const SUFFIX_LEN: usize = 20;

#[derive(Debug, Parser)]
#[command(name = "hypsim", version, about = "Discrete-event simulator for a static-partitioning hypervisor")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one configuration and write trace, metrics and timeline.
    Run(RunArgs),
    /// Re-run a configuration for each value of one numeric field.
    Sweep(SweepArgs),
    /// Print a random valid configuration.
    Generate(GenerateArgs),
    /// Print the default cost model in nanoseconds and cycles.
    Costs(CostsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long = "horizon-ns")]
    pub horizon_ns: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long = "horizon-ns")]
    pub horizon_ns: u64,
    /// Dotted path of the field to vary, e.g. `cost_model.world_switch`.
    #[arg(long)]
    pub sweep: String,
    /// Comma-separated values.
    #[arg(long, allow_hyphen_values = true)]
    pub values: String,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value = "edf")]
    pub scheduler: String,
    /// Horizon the interrupt sources are sized for.
    #[arg(long = "horizon-ns", default_value_t = 100_000_000)]
    pub horizon_ns: u64,
    /// Write to a file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CostsArgs {
    #[arg(long = "clock-mhz", default_value_t = 912.0)]
    pub clock_mhz: f64,
}

pub fn main_with(cli: Cli, registry: &SchedulerRegistry) -> i32 {
    match &cli.command {
        Command::Run(a) => cmd_run(a, registry),
        Command::Sweep(a) => cmd_sweep(a, registry),
        Command::Generate(a) => cmd_generate(a, registry),
        Command::Costs(a) => cmd_costs(a),
    }
}

fn read_config(path: &Path) -> Result<String, i32> {
    fs::read_to_string(path).map_err(|e| {
        eprintln!("error: cannot read {}: {e}", path.display());
        EXIT_IO
    })
}

fn io_fail(what: &Path, e: impl std::fmt::Display) -> i32 {
    eprintln!("error: writing {}: {e}", what.display());
    EXIT_IO
}

pub fn cmd_run(args: &RunArgs, registry: &SchedulerRegistry) -> i32 {
    let text = match read_config(&args.config) {
        Ok(t) => t,
        Err(code) => return code,
    };
    let spec = match load_config_with(&text, registry) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
    };
    if args.horizon_ns == 0 {
        eprintln!("config error: horizon must be positive");
        return EXIT_CONFIG;
    }
    if let Err(e) = fs::create_dir_all(&args.out) {
        return io_fail(&args.out, e);
    }
    match run_with(&spec, Time::from_ns(args.horizon_ns), registry) {
        Ok(out) => match write_outputs(&args.out, args.format, &out.trace, Some(&out.metrics)) {
            Ok(()) => EXIT_OK,
            Err((path, e)) => io_fail(&path, e),
        },
        Err(fail) if fail.error.is_config() => {
            eprintln!("config error: {}", fail.error);
            EXIT_CONFIG
        }
        Err(fail) => {
            eprintln!("run aborted: {}", fail.error);
            eprintln!("last trace records:\n{}", fail.trace.suffix(SUFFIX_LEN));
            if let Err((path, e)) = write_outputs(&args.out, args.format, &fail.trace, None) {
                return io_fail(&path, e);
            }
            EXIT_CONTRACT
        }
    }
}

/// Writes the trace, the timeline and (if given) the metrics into `dir`.
pub fn write_outputs(
    dir: &Path,
    format: Format,
    trace: &Trace,
    metrics: Option<&MetricsReport>,
) -> Result<(), (PathBuf, String)> {
    let trace_path = dir.join(match format {
        Format::Csv => "trace.csv",
        Format::Json => "trace.json",
    });
    let file = fs::File::create(&trace_path).map_err(|e| (trace_path.clone(), e.to_string()))?;
    let w = BufWriter::new(file);
    match format {
        Format::Csv => trace.write_csv(w),
        Format::Json => trace.write_jsonl(w),
    }
    .map_err(|e| (trace_path.clone(), e.to_string()))?;

    let timeline = dir.join("timeline.dat");
    fs::write(&timeline, timeline_dat(trace)).map_err(|e| (timeline.clone(), e.to_string()))?;

    if let Some(m) = metrics {
        let path = dir.join("metrics.json");
        fs::write(&path, m.to_json() + "\n").map_err(|e| (path.clone(), e.to_string()))?;
    }
    Ok(())
}

pub fn state_code(s: RunState) -> u8 {
    match s {
        RunState::Blocked => 0,
        RunState::Sleeping => 1,
        RunState::Ready => 2,
        RunState::Running => 3,
    }
}

/// Gnuplot-friendly state changes, one `time vm state` row each.
pub fn timeline_dat(trace: &Trace) -> String {
    let mut out = String::from("# time_ns vm_id state (0=blocked 1=sleeping 2=ready 3=running)\n");
    for r in trace.of_kind("vm_state") {
        if let (Some(vm), Some(state)) = (r.vm(), r.get("state").and_then(RunState::from_name)) {
            out.push_str(&format!("{} {} {}\n", r.time_ns, vm.0, state_code(state)));
        }
    }
    out
}

pub fn parse_values(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|v| !v.is_empty()).map(str::to_string).collect()
}

pub fn cmd_sweep(args: &SweepArgs, registry: &SchedulerRegistry) -> i32 {
    let text = match read_config(&args.config) {
        Ok(t) => t,
        Err(code) => return code,
    };
    if args.horizon_ns == 0 {
        eprintln!("config error: horizon must be positive");
        return EXIT_CONFIG;
    }
    let values = parse_values(&args.values);
    let rows = match run_sweep(&text, &args.sweep, &values, Time::from_ns(args.horizon_ns), registry) {
        Ok(rows) => rows,
        Err(e @ (SweepError::Base(_) | SweepError::Key { .. } | SweepError::Value { .. })) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
    };
    if let Err(e) = fs::create_dir_all(&args.out) {
        return io_fail(&args.out, e);
    }
    let path = args.out.join("summary.csv");
    let file = match fs::File::create(&path) {
        Ok(f) => f,
        Err(e) => return io_fail(&path, e),
    };
    if let Err(e) = write_summary(&rows, BufWriter::new(file)) {
        return io_fail(&path, e);
    }
    EXIT_OK
}

pub fn cmd_generate(args: &GenerateArgs, registry: &SchedulerRegistry) -> i32 {
    if registry.get(&args.scheduler).is_none() {
        eprintln!("config error: unknown scheduler {:?}", args.scheduler);
        return EXIT_CONFIG;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let spec = random_system(&mut rng, &args.scheduler, Time::from_ns(args.horizon_ns.max(1)));
    let json = to_json(&spec) + "\n";
    match &args.out {
        Some(path) => match fs::write(path, json) {
            Ok(()) => EXIT_OK,
            Err(e) => io_fail(path, e),
        },
        None => match std::io::stdout().lock().write_all(json.as_bytes()) {
            Ok(()) => EXIT_OK,
            Err(e) => io_fail(Path::new("<stdout>"), e),
        },
    }
}

pub fn cmd_costs(args: &CostsArgs) -> i32 {
    let cost = CostModel::measured();
    println!("{:<22} {:>10} {:>10}", "field", "ns", "cycles");
    for f in CostField::ALL {
        let ns = cost.get(f).as_ns();
        let cycles = (ns as f64 * args.clock_mhz / 1000.0).round();
        println!("{:<22} {:>10} {:>10}", f.name(), ns, cycles);
    }
    EXIT_OK
}

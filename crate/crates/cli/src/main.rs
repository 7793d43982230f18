use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use slabserve_core::selftest::{run_selftest, SelftestOptions};
use slabserve_core::sim::{measure_mme, mme_slope, MetricsReport};
use slabserve_core::{
    place_models, run_simulation, MemoryMode, PlacementError, PlacementPlan, Policy, ScenarioConfig, SimError,
};

const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "slabserve", version, about = "Place and simulate mixed-precision models sharing GPUs")]
struct Cli {
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute a placement and print it with per-candidate scores.
    Place(Common),
    /// Run the simulator and write metrics.
    Simulate(SimArgs),
    /// Run the oracle suites.
    Selftest {
        /// Flip one allocator bitmap bit to check that the suites catch it.
        #[arg(long, hide = true)]
        corrupt_bitmap: bool,
    },
    /// Simulate several KV pool sizes and report cached-token slopes.
    MmeSweep(SimArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Directory for output files. Defaults to the config's output.dir.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    /// Comma-separated KV pool sizes per device, e.g. `1GiB,1.5GiB,2GiB`.
    #[arg(long, value_delimiter = ',')]
    sweep: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(alias = "dynamic-slab")]
    Dynamic,
    #[value(alias = "static-partition")]
    Static,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Adaptive,
    Fcfs,
}

enum Failure {
    Usage(String),
    Infeasible(String),
    Selftest,
}

impl From<slabserve_core::ConfigError> for Failure {
    fn from(e: slabserve_core::ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<PlacementError> for Failure {
    fn from(e: PlacementError) -> Self {
        match e {
            PlacementError::PlacementInfeasible { .. } | PlacementError::Profile(_) => Failure::Infeasible(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Placement(p) => p.into(),
            other => Failure::Usage(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Usage(format!("{}: {e}", path.display()))
}

/// Parses `1073741824`, `1GiB`, `1.5GiB`, `512MiB` or `64KiB`.
fn parse_bytes(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (num, unit) = match s.find(|c: char| c.is_ascii_alphabetic()) {
        Some(i) => (&s[..i], &s[i..]),
        None => (s, ""),
    };
    let scale: u64 = match unit.to_ascii_lowercase().as_str() {
        "" | "b" => 1,
        "kib" => 1 << 10,
        "mib" => 1 << 20,
        "gib" => 1 << 30,
        other => return Err(format!("unknown size unit `{other}` in `{s}`")),
    };
    let v: f64 = num.trim().parse().map_err(|_| format!("bad size `{s}`"))?;
    if !(v > 0.0 && v.is_finite()) {
        return Err(format!("size must be positive: `{s}`"));
    }
    Ok((v * scale as f64).round() as u64)
}

fn load(common: &Common, seed: Option<u64>) -> Result<(ScenarioConfig, Option<PathBuf>), Failure> {
    let mut cfg = ScenarioConfig::load(&common.config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = common
        .out_dir
        .clone()
        .or_else(|| cfg.output.dir.as_ref().map(|d| cfg.base_dir.join(d)));
    Ok((cfg, out))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| io_err(&path, e))
}

fn to_json(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values serialize");
    s.push('\n');
    s
}

fn placement_report(plan: &PlacementPlan) -> serde_json::Value {
    json!({
        "schema_version": SCHEMA_VERSION,
        "assignments": plan.assignments,
        "footprints": plan.footprints,
        "operating_batch": plan.operating_batch,
        "residuals": plan.residuals,
        "trace": plan.trace,
    })
}

fn cmd_place(common: &Common, seed: Option<u64>) -> Result<(), Failure> {
    let (cfg, out) = load(common, seed)?;
    let plan = place_models(&cfg.models, &cfg.gpu_groups(), &cfg.estimator)?;
    let text = to_json(&placement_report(&plan));
    match out {
        Some(dir) => write(&dir, "placement.json", &text)?,
        None => print!("{text}"),
    }
    for (model, group) in &plan.assignments {
        eprintln!("{model} -> {group}");
    }
    Ok(())
}

fn apply_overrides(cfg: &mut ScenarioConfig, args: &SimArgs) {
    if let Some(m) = args.mode {
        cfg.simulation.mode = match m {
            ModeArg::Dynamic => MemoryMode::DynamicSlab,
            ModeArg::Static => MemoryMode::StaticPartition,
        };
    }
    if let Some(p) = args.policy {
        cfg.simulation.policy = match p {
            PolicyArg::Adaptive => Policy::Adaptive,
            PolicyArg::Fcfs => Policy::Fcfs,
        };
    }
}

fn simulate_once(cfg: &ScenarioConfig, plan: &PlacementPlan, pool: Option<u64>) -> Result<MetricsReport, Failure> {
    let trace = cfg.trace(None)?;
    let mut opts = cfg.sim_options();
    if pool.is_some() {
        opts.kv_pool_bytes = pool;
    }
    Ok(run_simulation(plan, &trace, &opts)?)
}

fn emit_report(report: &MetricsReport, dir: Option<&Path>, suffix: &str) -> Result<(), Failure> {
    let summary = to_json(&report.summary_json());
    let Some(dir) = dir else {
        print!("{summary}");
        return Ok(());
    };
    write(dir, &format!("summary{suffix}.json"), &summary)?;
    write(dir, &format!("series{suffix}.csv"), &report.series_csv())?;
    write(dir, &format!("requests{suffix}.csv"), &report.requests_csv())?;
    if !report.decisions.is_empty() {
        let mut lines = String::new();
        for d in &report.decisions {
            lines.push_str(&serde_json::to_string(d).expect("decision serializes"));
            lines.push('\n');
        }
        write(dir, &format!("decisions{suffix}.jsonl"), &lines)?;
    }
    Ok(())
}

fn sweep_sizes(args: &SimArgs) -> Result<Vec<u64>, Failure> {
    let mut sizes = args
        .sweep
        .iter()
        .map(|s| parse_bytes(s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(Failure::Usage)?;
    sizes.sort_unstable();
    sizes.dedup();
    Ok(sizes)
}

/// Runs every pool size and returns the reports plus a slope table.
fn run_sweep(cfg: &ScenarioConfig, plan: &PlacementPlan, sizes: &[u64]) -> Result<(Vec<MetricsReport>, String), Failure> {
    let mut reports = Vec::new();
    for &size in sizes {
        reports.push(simulate_once(cfg, plan, Some(size))?);
    }
    let mut table = String::from("model_id,group_id,slope_tokens_per_byte,first_difference_tokens_per_byte\n");
    for (model, group) in &plan.assignments {
        let points: Vec<(u64, f64)> = reports
            .iter()
            .map(|r| (r.pool_bytes[group], r.models[model].mean_cached_tokens))
            .collect();
        let slope = mme_slope(&points)?;
        let first = measure_mme(&reports[0], &reports[1], model, group)?;
        table.push_str(&format!("{model},{group},{slope:e},{first:e}\n"));
    }
    Ok((reports, table))
}

fn cmd_simulate(args: &SimArgs, seed: Option<u64>, sweep_only: bool) -> Result<(), Failure> {
    let (mut cfg, out) = load(&args.common, seed)?;
    apply_overrides(&mut cfg, args);
    let plan = place_models(&cfg.models, &cfg.gpu_groups(), &cfg.estimator)?;
    let sizes = sweep_sizes(args)?;
    if sizes.is_empty() {
        if sweep_only {
            return Err(Failure::Usage("mme-sweep needs --sweep with at least two pool sizes".into()));
        }
        let report = simulate_once(&cfg, &plan, None)?;
        return emit_report(&report, out.as_deref(), "");
    }
    if sizes.len() < 2 {
        return Err(Failure::Usage("--sweep needs at least two distinct pool sizes".into()));
    }
    let (reports, table) = run_sweep(&cfg, &plan, &sizes)?;
    match out.as_deref() {
        Some(dir) => {
            if !sweep_only {
                for (r, size) in reports.iter().zip(&sizes) {
                    emit_report(r, Some(dir), &format!("_{size}"))?;
                }
            }
            write(dir, "mme.csv", &table)?;
            print!("{table}");
        }
        None => print!("{table}"),
    }
    Ok(())
}

fn cmd_selftest(seed: Option<u64>, corrupt_bitmap: bool) -> Result<(), Failure> {
    let results = run_selftest(SelftestOptions {
        seed: seed.unwrap_or(0),
        corrupt_bitmap,
    });
    let mut ok = true;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        ok &= r.passed;
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Selftest)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Place(c) => cmd_place(c, cli.seed),
        Command::Simulate(a) => cmd_simulate(a, cli.seed, false),
        Command::MmeSweep(a) => cmd_simulate(a, cli.seed, true),
        Command::Selftest { corrupt_bitmap } => cmd_selftest(cli.seed, *corrupt_bitmap),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Infeasible(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Selftest) => ExitCode::from(3),
    }
}

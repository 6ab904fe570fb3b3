mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

/// Aggregate estimation over a restricted top-k nearest-neighbor interface.
#[derive(Parser)]
#[command(name = "knn-agg", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a COUNT/SUM/AVG estimation and emit a JSON report.
    Estimate(CommonArgs),
    /// Compare reconstructed cells against full-knowledge ground truth.
    VerifyCell(VerifyArgs),
    /// Infer tuple positions through a rank-only interface.
    Locate(LocateArgs),
    /// Sweep optimization ablations and sampling strategies; emit CSV.
    Benchmark(BenchmarkArgs),
    /// Generate a synthetic dataset CSV (and optionally a density grid).
    GenData(GenDataArgs),
}

#[derive(Args, Clone)]
pub struct CommonArgs {
    /// Flat key=value config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset CSV path (header: id,x,y[,attr...]).
    #[arg(long)]
    dataset: Option<String>,
    /// Generator spec instead of a file: uniform:<n> |
    /// clusters:<n>:<c>:<sigma> | circle:<n>.
    #[arg(long)]
    generate: Option<String>,
    /// Interface mode: lr (locations returned) or lnr (ranks only).
    #[arg(long)]
    mode: Option<String>,
    /// Top-k answer size.
    #[arg(short, long)]
    k: Option<usize>,
    /// Aggregate: count | sum:<attr> | avg:<attr>.
    #[arg(long)]
    agg: Option<String>,
    /// Selection condition, e.g. 'category=a' or 'weight>=1'.
    #[arg(long = "where")]
    condition: Option<String>,
    /// Hand the condition to the oracle before ranking.
    #[arg(long)]
    pass_through: bool,
    /// Oracle query budget.
    #[arg(long)]
    budget: Option<u64>,
    /// Maximum answer radius d_max.
    #[arg(long)]
    dmax: Option<f64>,
    /// Number of samples to draw.
    #[arg(long)]
    samples: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Density grid CSV for weighted query sampling.
    #[arg(long)]
    density: Option<String>,
    /// Fixed adaptive-h threshold (default: running auto value).
    #[arg(long)]
    lambda0: Option<f64>,
    /// Enable adaptive top-h selection.
    #[arg(long)]
    adaptive_h: bool,
    /// Disable the fake-tuple fast initialization.
    #[arg(long)]
    no_fast_init: bool,
    /// Disable history reuse.
    #[arg(long)]
    no_history: bool,
    /// Disable the Monte Carlo shortcut.
    #[arg(long)]
    no_mc: bool,
    /// LNR edge-error target as a fraction of the region width.
    #[arg(long)]
    epsilon_frac: Option<f64>,
    /// Cell definition (top-h) used by the rank-only estimator.
    #[arg(long)]
    lnr_h: Option<usize>,
    /// Per-sample query cap; overrunning samples are discarded.
    #[arg(long)]
    per_sample_cap: Option<u64>,
    /// Bounding region x0,y0,x1,y1 (default: inferred from data).
    #[arg(long)]
    region: Option<String>,
    /// Attach privileged ground-truth comparison to the report.
    #[arg(long)]
    ground_truth: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Tuple id to verify, or `all`.
    #[arg(long, default_value = "all")]
    tuple_id: String,
    /// Cell definition to verify (top-h).
    #[arg(long, default_value_t = 1)]
    h: usize,
}

#[derive(Args)]
pub struct LocateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// How many tuples to localize (seed-deterministic choice).
    #[arg(long, default_value_t = 20)]
    count: usize,
    /// Optional feature point + distance demo: report how many inferred
    /// locations fall within the distance. Format: x,y,dist.
    #[arg(long)]
    near: Option<String>,
}

#[derive(Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset sizes to sweep (generator-based benchmarks only).
    #[arg(long, value_delimiter = ',', default_value = "400")]
    n_sweep: Vec<usize>,
    /// k values to sweep.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    k_sweep: Vec<usize>,
    /// Runs per configuration (reported values are run means).
    #[arg(long, default_value_t = 25)]
    runs: u64,
    /// Append to an existing CSV instead of overwriting.
    #[arg(long)]
    append: bool,
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Generator spec: uniform:<n> | clusters:<n>:<c>:<sigma> | circle:<n>.
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Also write a density grid matched to the data.
    #[arg(long)]
    density_out: Option<PathBuf>,
    /// Density grid resolution (rows = cols).
    #[arg(long, default_value_t = 16)]
    density_grid: usize,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

fn merged_config(args: &CommonArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        for (k, v) in RunConfig::load_file(path)? {
            cfg.apply(&k, &v)?;
        }
    }
    {
        let cfg = &mut cfg;
        let mut set = |key: &str, val: Option<String>| -> anyhow::Result<()> {
            if let Some(v) = val {
                cfg.apply(key, &v)?;
            }
            Ok(())
        };
        set("dataset", args.dataset.clone())?;
        set("generate", args.generate.clone())?;
        set("mode", args.mode.clone())?;
        set("k", args.k.map(|v| v.to_string()))?;
        set("agg", args.agg.clone())?;
        set("where", args.condition.clone())?;
        if args.pass_through {
            set("pass_through", Some("on".into()))?;
        }
        set("budget", args.budget.map(|v| v.to_string()))?;
        set("dmax", args.dmax.map(|v| v.to_string()))?;
        set("samples", args.samples.map(|v| v.to_string()))?;
        set("seed", args.seed.map(|v| v.to_string()))?;
        set("density", args.density.clone())?;
        set("lambda0", args.lambda0.map(|v| v.to_string()))?;
        if args.adaptive_h {
            set("adaptive_h", Some("on".into()))?;
        }
        if args.no_fast_init {
            set("fast_init", Some("off".into()))?;
        }
        if args.no_history {
            set("history", Some("off".into()))?;
        }
        if args.no_mc {
            set("mc", Some("off".into()))?;
        }
        set("epsilon_frac", args.epsilon_frac.map(|v| v.to_string()))?;
        set("lnr_h", args.lnr_h.map(|v| v.to_string()))?;
        set("per_sample_cap", args.per_sample_cap.map(|v| v.to_string()))?;
        set("region", args.region.clone())?;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Command::Estimate(args) => merged_config(&args)
            .map_err(commands::CmdError::config)
            .and_then(|cfg| commands::estimate(&cfg, &args)),
        Command::VerifyCell(a) => merged_config(&a.common)
            .map_err(commands::CmdError::config)
            .and_then(|cfg| commands::verify_cell(&cfg, &a.common, &a.tuple_id, a.h)),
        Command::Locate(a) => merged_config(&a.common)
            .map_err(commands::CmdError::config)
            .and_then(|cfg| commands::locate(&cfg, &a.common, a.count, a.near.as_deref())),
        Command::Benchmark(a) => merged_config(&a.common)
            .map_err(commands::CmdError::config)
            .and_then(|cfg| commands::benchmark(&cfg, &a)),
        Command::GenData(a) => commands::gen_data(&a),
    };
    match outcome {
        Ok(partial) => {
            if partial {
                ExitCode::from(EXIT_PARTIAL)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {:#}", e.source);
            ExitCode::from(if e.is_config { EXIT_CONFIG } else { 1 })
        }
    }
}

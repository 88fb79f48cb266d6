use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::ablate::{ablate, ABLATION_FILE, VARIANTS};
use super::config::{with_overrides, GenDataConfig, TrainConfig, CONFIG_VERSION};
use super::gradcheck::{run_suite, DEFAULT_EPS, DEFAULT_TOLERANCE};
use super::plot::plot_metrics;
use super::train::{read_metrics, train, METRICS_FILE, PREDICTIONS_FILE};
use crate::error::{Error, Result};
use crate::evaluation::mean_average_precision;
use crate::numerics::Float;
use crate::scenegen::{generate_split, Domain};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Salt separating the target dataset's scene seeds from the source's.
const TARGET_SEED_SALT: u64 = 0x7461_7267_6574;

#[derive(Debug, Parser)]
#[command(name = "rpcl", version, about = "Cross-domain detection on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the source (clean) and target (foggy) datasets.
    GenData(GenDataArgs),
    /// Train a detector.
    Train(TrainArgs),
    /// Compute per-class AP and mAP of a predictions file.
    Eval(EvalArgs),
    /// Run the ablation grid over several seeds.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients of every loss term.
    Gradcheck(GradcheckArgs),
    /// Draw loss and mAP curves from a metrics CSV.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set weights.lambda1=0.2` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Directory holding `source/` and `target/` as written by gen-data
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// JSON-lines predictions
    #[arg(long)]
    predictions: PathBuf,
    /// Ground-truth index of the evaluated split
    #[arg(long)]
    index: PathBuf,
    /// Output CSV (default: next to the predictions as eval.csv)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// First seed; runs use `seed, seed+1, ...`
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: Float,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: Float,
}

#[derive(Debug, Args)]
struct PlotArgs {
    /// metrics.csv of a run, or its output directory
    #[arg(long)]
    metrics: PathBuf,
    /// Output directory (default: the metrics file's directory)
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

/// Failure of a subcommand, mapped to an exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            Error::Parse { ref message, .. } if message.starts_with("config:") => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e),
        }
    }
}

/// Parses `argv` and runs the subcommand, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `rpcl help` for usage");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenData(a) => gen_data_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Plot(a) => plot_cmd(a),
    }
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    super::config::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Precedence, lowest first: defaults, config file, dedicated flags, `--set`.
fn train_config(
    args: &ConfigArgs,
    data_dir: Option<&Path>,
    steps: Option<usize>,
    output_dir: Option<&Path>,
) -> Result<TrainConfig> {
    let mut base = match &args.config {
        Some(p) => load_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(d) = data_dir {
        base.source_train = d.join("source/train.json");
        base.target_train = d.join("target/train.json");
        base.target_test = d.join("target/test.json");
    }
    if let Some(s) = steps {
        base.steps = s;
    }
    if let Some(d) = output_dir {
        base.output_dir = d.to_path_buf();
    }
    base.with_overrides(&args.overrides)
}

/// Writes `source/` and `target/` under the output directory.
pub fn gen_data(cfg: &GenDataConfig) -> Result<()> {
    if cfg.version != CONFIG_VERSION {
        return Err(Error::Config(format!("version: expected {CONFIG_VERSION}, found {}", cfg.version)));
    }
    let seed = cfg.seed.ok_or_else(|| Error::Config("seed: required (pass --seed)".into()))?;
    let out = &cfg.output_dir;
    generate_split(&out.join("source"), seed, cfg.source_train, cfg.source_test, Domain::Source)?;
    generate_split(&out.join("target"), seed ^ TARGET_SEED_SALT, cfg.target_train, cfg.target_test, Domain::Target)?;
    Ok(())
}

fn gen_data_cmd(a: GenDataArgs) -> Result<(), Failure> {
    let base = match &a.config.config {
        Some(p) => load_json(p)?,
        None => GenDataConfig::default(),
    };
    let mut cfg: GenDataConfig = with_overrides(&base, &a.config.overrides)?;
    cfg.seed = a.seed.or(cfg.seed);
    if let Some(d) = a.output_dir {
        cfg.output_dir = d;
    }
    gen_data(&cfg)?;
    println!("wrote {}/source and {}/target", cfg.output_dir.display(), cfg.output_dir.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<(), Failure> {
    let seed = a.seed.ok_or_else(|| Failure::Usage("--seed is required for train".into()))?;
    let mut cfg = train_config(&a.config, a.data_dir.as_deref(), a.steps, a.output_dir.as_deref())?;
    cfg.seed = Some(seed);
    let summary = train(&cfg)?;
    print!("{}", summary.final_report.to_table());
    println!(
        "wrote {} and {}",
        cfg.output_dir.join(METRICS_FILE).display(),
        cfg.output_dir.join(PREDICTIONS_FILE).display()
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<(), Failure> {
    let report = mean_average_precision(&a.predictions, &a.index)?;
    let out = a.out.unwrap_or_else(|| a.predictions.with_file_name("eval.csv"));
    std::fs::write(&out, report.to_csv()).map_err(|e| Error::io(&out, e))?;
    print!("{}", report.to_table());
    println!("mAP {:.6}", report.map);
    println!("wrote {}", out.display());
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Result<(), Failure> {
    let first = a.seed.ok_or_else(|| Failure::Usage("--seed is required for ablate".into()))?;
    if a.seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let cfg = train_config(&a.config, a.data_dir.as_deref(), a.steps, a.output_dir.as_deref())?;
    let seeds: Vec<u64> = (0..a.seeds).map(|i| first + i).collect();
    let table = ablate(&cfg, &VARIANTS, &seeds)?;
    println!("{:<12} {:>8}", "variant", "median");
    for v in VARIANTS {
        match table.median(v.name) {
            Some(m) => println!("{:<12} {:>8.4}", v.name, m),
            None => println!("{:<12} {:>8}", v.name, "failed"),
        }
    }
    println!("wrote {}", cfg.output_dir.join(ABLATION_FILE).display());
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<(), Failure> {
    let reports = run_suite(a.seed, a.eps);
    let mut ok = true;
    println!("{:<30} {:>14} {:>8} {:>8}", "term", "max_rel_error", "checked", "nonzero");
    for r in &reports {
        let c = &r.comparison;
        let pass = c.max_relative_error < a.tolerance;
        ok &= pass;
        println!(
            "{:<30} {:>14.3e} {:>8} {:>8} {}",
            r.term,
            c.max_relative_error,
            c.checked,
            c.nonzero,
            if pass { "ok" } else { "FAIL" }
        );
        if let Some(f) = r.accept_fraction {
            println!("{:<30} gate accept fraction {f:.3}", "");
        }
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Runtime(Error::Evaluation(format!("gradient check exceeded tolerance {}", a.tolerance))))
    }
}

fn plot_cmd(a: PlotArgs) -> Result<(), Failure> {
    let path = if a.metrics.is_dir() { a.metrics.join(METRICS_FILE) } else { a.metrics };
    let metrics = read_metrics(&path)?;
    let out = a.out_dir.unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
    let (loss, map) = plot_metrics(&metrics, &out)?;
    println!("wrote {} and {}", loss.display(), map.display());
    Ok(())
}

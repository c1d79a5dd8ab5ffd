//! `tabimpute` command-line driver.
//!
//! Every subcommand reads an optional JSON config (`--config`); flags override
//! its fields. Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tabimpute::conditioning::{build_condition, parse_condition_args};
use tabimpute::data::{ingest_csv, parse_csv_with_schema, to_csv_string, MaskMatrix, Table};
use tabimpute::evaluation::{evaluate_all, reports_to_csv, DownstreamTask, EvaluationReport};
use tabimpute::gan::GanModel;
use tabimpute::imputer::Method;
use tabimpute::missingness::{apply_mask, generate_mask, Mechanism, MissingnessSpec};
use tabimpute::pipeline::{self, write_file, BenchmarkOptions, PipelineError, Provenance, RunConfig};

#[derive(Parser)]
#[command(name = "tabimpute", version, about = "Conditional GAN imputation for mixed-type tables")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the generator on the complete rows of a dataset.
    Train(TrainArgs),
    /// Simulate missingness on a complete dataset.
    Mask(MaskArgs),
    /// Fill missing cells with one or more methods.
    Impute(ImputeArgs),
    /// Score an imputed table against its ground truth.
    Evaluate(EvaluateArgs),
    /// Run the full split, mask sweep, imputation and evaluation grid.
    Benchmark(BenchmarkArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset CSV (overrides `dataset.path`).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// MCAR, MAR or MNAR; defaults to the first mechanism of the config sweep.
    #[arg(long)]
    mechanism: Option<Mechanism>,
    /// Target missing rate; defaults to the first rate of the config sweep.
    #[arg(long)]
    rate: Option<f64>,
    /// Column that is never masked; repeatable.
    #[arg(long)]
    exempt: Vec<String>,
}

#[derive(Args)]
struct ImputeArgs {
    /// Incomplete CSV to complete.
    #[arg(long)]
    data: Option<PathBuf>,
    /// impugan, gm or fv; repeatable. Defaults to the config method list.
    #[arg(long)]
    method: Vec<Method>,
    /// Checkpoint directory written by `train` (default `<out>/model`).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Also draw this many synthetic rows from the generator.
    #[arg(long)]
    samples: Option<usize>,
    /// Hard condition `column=category` for the synthetic rows; repeatable.
    #[arg(long)]
    cond: Vec<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Ground-truth CSV.
    #[arg(long)]
    truth: PathBuf,
    /// Imputed CSV aligned with the truth.
    #[arg(long)]
    imputed: PathBuf,
    /// 0/1 mask CSV (0 = masked).
    #[arg(long)]
    mask: PathBuf,
    /// Fully observed test CSV for downstream accuracy.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Label column for downstream accuracy (overrides `dataset.label`).
    #[arg(long)]
    label: Option<String>,
    /// Method name recorded in the report; defaults to the imputed file's directory name.
    #[arg(long)]
    method: Option<String>,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Recompute cells whose reports already exist.
    #[arg(long)]
    force: bool,
    /// Threads evaluating sweep cells.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime { message: String, snapshot: Option<PathBuf> },
}

impl CliError {
    fn runtime(e: impl fmt::Display) -> Self {
        CliError::Runtime { message: e.to_string(), snapshot: None }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.is_usage() {
            CliError::Usage(e.to_string())
        } else {
            CliError::Runtime { message: e.to_string(), snapshot: e.snapshot }
        }
    }
}

type CliResult = Result<(), CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime { message, snapshot }) => {
            eprintln!("error: {message}");
            if let Some(p) = snapshot {
                eprintln!("divergence snapshot: {}", p.display());
            }
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    match cli.command {
        Command::Train(a) => train(cfg, a),
        Command::Mask(a) => mask(cfg, a),
        Command::Impute(a) => impute(cfg, a),
        Command::Evaluate(a) => evaluate(cfg, a),
        Command::Benchmark(a) => benchmark(cfg, a),
    }
}

fn require_file(path: &Path, what: &str) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} `{}` does not exist", path.display())))
    }
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn load_table(path: &Path, cfg: &RunConfig) -> Result<Table, CliError> {
    ingest_csv(path, &cfg.dataset.ingest).map_err(CliError::runtime)
}

fn train(mut cfg: RunConfig, a: TrainArgs) -> CliResult {
    if let Some(d) = a.data {
        cfg.dataset.path = d;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate_dataset()?;
    cfg.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let table = load_table(&cfg.dataset.path, &cfg)?;
    let dir = cfg.out.join("model");
    pipeline::train_or_load(&table, &cfg, cfg.seed, &dir, true)?;
    println!("model written to {}", dir.display());
    Ok(())
}

fn mask(mut cfg: RunConfig, a: MaskArgs) -> CliResult {
    if let Some(d) = a.data {
        cfg.dataset.path = d;
    }
    cfg.validate_dataset()?;
    let mechanism = a.mechanism.or(cfg.sweep.mechanisms.first().copied()).ok_or_else(|| CliError::Usage("no mechanism given".into()))?;
    let rate = a.rate.or(cfg.sweep.rates.first().copied()).ok_or_else(|| CliError::Usage("no rate given".into()))?;
    let mut exempt = a.exempt;
    exempt.extend(cfg.sweep.exempt.iter().cloned());
    if !cfg.dataset.label.is_empty() {
        exempt.push(cfg.dataset.label.clone());
    }
    exempt.sort();
    exempt.dedup();
    let spec = MissingnessSpec { mechanism, rate, seed: cfg.seed, exempt, mar_drivers: cfg.sweep.mar_drivers.clone() };
    let table = load_table(&cfg.dataset.path, &cfg)?;
    spec.validate(&table).map_err(|e| CliError::Usage(e.to_string()))?;
    let m = generate_mask(&table, &spec).map_err(CliError::runtime)?;
    let masked = apply_mask(&table, &m).map_err(CliError::runtime)?;

    let names = table.schema.names();
    write_file(&cfg.out.join("truth.csv"), &to_csv_string(&masked.truth))?;
    write_file(&cfg.out.join("mask.csv"), &masked.mask.to_csv(&names))?;
    write_file(&cfg.out.join("masked.csv"), &to_csv_string(&masked.incomplete))?;
    write_file(&cfg.out.join("mask_spec.json"), &serde_json::to_string_pretty(&spec).expect("spec serializes"))?;
    Provenance::new(&cfg.hash(), cfg.seed).write(&cfg.out.join("run.json"))?;
    let total = masked.mask.rows() * masked.mask.cols();
    println!(
        "{mechanism} {rate}: {} of {total} cells missing ({:.4}); written to {}",
        masked.mask.missing_count(),
        masked.mask.missing_fraction(),
        cfg.out.display()
    );
    Ok(())
}

fn impute(mut cfg: RunConfig, a: ImputeArgs) -> CliResult {
    if let Some(d) = a.data.clone() {
        cfg.dataset.path = d;
    }
    let methods = if a.method.is_empty() { cfg.methods.clone() } else { a.method.clone() };
    let sampling = a.samples.is_some();
    if !a.cond.is_empty() && !sampling {
        return Err(CliError::Usage("--cond applies to synthetic rows; pass --samples".into()));
    }
    let imputing = a.data.is_some() || !sampling;
    if imputing {
        cfg.validate_dataset()?;
        if methods.is_empty() {
            return Err(CliError::Usage("no imputation method given".into()));
        }
    }
    let needs_model = sampling || (imputing && methods.contains(&Method::Impugan));
    let model_dir = a.model.clone().unwrap_or_else(|| cfg.out.join("model"));
    if needs_model {
        require_file(&model_dir.join("model.json"), "checkpoint")?;
    }
    let conds = parse_condition_args(&a.cond).map_err(|e| CliError::Usage(e.to_string()))?;
    let model = if needs_model { Some(GanModel::load(&model_dir).map_err(CliError::runtime)?) } else { None };
    let cond = match &model {
        Some(m) if !conds.is_empty() => Some(build_condition(&conds, &m.cond_layout, &m.transformer).map_err(|e| CliError::Usage(e.to_string()))?),
        _ => None,
    };

    let prov = Provenance::new(&cfg.hash(), cfg.seed);
    if imputing {
        let text = read_file(&cfg.dataset.path)?;
        let table = match &model {
            Some(m) => parse_csv_with_schema(&text, &m.transformer.schema),
            None => tabimpute::data::parse_csv(&text, &cfg.dataset.ingest),
        }
        .map_err(CliError::runtime)?;
        for &method in &methods {
            let result = pipeline::run_method(method, &table, model.as_ref(), cfg.fv_constant, cfg.seed)?;
            let dir = cfg.out.join(method.name());
            write_file(&dir.join("imputed.csv"), &to_csv_string(&result.table))?;
            write_file(&dir.join("provenance.csv"), &result.provenance_csv())?;
            prov.write(&dir.join("run.json"))?;
            println!("{method}: {} cells imputed, written to {}", result.imputed_count(), dir.display());
        }
    }
    if let (Some(n), Some(m)) = (a.samples, &model) {
        let table = m.sample(n, cond.as_ref(), cfg.seed).map_err(CliError::runtime)?;
        let path = cfg.out.join("samples.csv");
        write_file(&path, &to_csv_string(&table))?;
        prov.write(&cfg.out.join("run.json"))?;
        println!("{n} synthetic rows written to {}", path.display());
    }
    Ok(())
}

fn evaluate(cfg: RunConfig, a: EvaluateArgs) -> CliResult {
    require_file(&a.truth, "truth table")?;
    require_file(&a.imputed, "imputed table")?;
    require_file(&a.mask, "mask")?;
    if let Some(t) = &a.test {
        require_file(t, "test table")?;
    }
    let label = a.label.clone().unwrap_or_else(|| cfg.dataset.label.clone());
    if a.test.is_some() && label.is_empty() {
        return Err(CliError::Usage("--test needs a label column (--label or dataset.label)".into()));
    }
    let truth = load_table(&a.truth, &cfg)?;
    let imputed = parse_csv_with_schema(&read_file(&a.imputed)?, &truth.schema).map_err(CliError::runtime)?;
    let mask = MaskMatrix::from_csv(&read_file(&a.mask)?).map_err(CliError::runtime)?;
    let test = match &a.test {
        Some(p) => Some(parse_csv_with_schema(&read_file(p)?, &truth.schema).map_err(CliError::runtime)?),
        None => None,
    };
    let task = test.as_ref().map(|t| DownstreamTask { test: t, label: &label, seed: cfg.seed });
    let metrics = evaluate_all(&truth, &imputed, &mask, &cfg.eval, task.as_ref()).map_err(CliError::runtime)?;

    let spec: Option<MissingnessSpec> = a
        .mask
        .parent()
        .and_then(|d| fs::read_to_string(d.join("mask_spec.json")).ok())
        .and_then(|s| serde_json::from_str(&s).ok());
    let method = a.method.clone().unwrap_or_else(|| {
        a.imputed.parent().and_then(Path::file_name).map_or_else(|| "unspecified".into(), |s| s.to_string_lossy().into_owned())
    });
    let report = EvaluationReport {
        dataset: a.truth.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned()),
        mechanism: spec.as_ref().map_or_else(|| "unspecified".into(), |s| s.mechanism.to_string()),
        rate: spec.as_ref().map_or(0.0, |s| s.rate),
        method,
        seed: cfg.seed,
        metrics,
        config_hash: cfg.hash(),
        version: pipeline::VERSION.to_string(),
    };
    write_file(&cfg.out.join("report.json"), &report.to_json())?;
    write_file(&cfg.out.join("report.csv"), &reports_to_csv(std::slice::from_ref(&report)))?;
    for m in &report.metrics {
        println!("{:<16}{}", m.name, m.csv_cell());
    }
    Ok(())
}

fn benchmark(mut cfg: RunConfig, a: BenchmarkArgs) -> CliResult {
    if let Some(d) = a.data {
        cfg.dataset.path = d;
    }
    if let Some(l) = a.label {
        cfg.dataset.label = l;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(r) = a.repeats {
        cfg.repeats = r;
    }
    let outcome = pipeline::run_benchmark(&cfg, &BenchmarkOptions { force: a.force, workers: a.workers })?;
    println!(
        "{} reports ({} computed, {} reused); CSV {}; JSON {}",
        outcome.reports.len(),
        outcome.computed,
        outcome.reused,
        outcome.csv_path.display(),
        outcome.json_path.display()
    );
    Ok(())
}

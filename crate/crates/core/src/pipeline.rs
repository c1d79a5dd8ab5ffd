//! Benchmark driver: load a dataset, split it, sweep masks, impute with every
//! method and score the results. Every artifact records the config hash, the
//! run seed and the crate version.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{ingest_csv, IngestOptions, Table};
use crate::evaluation::{evaluate_all, reports_to_csv, reports_to_json, DownstreamTask, EvalConfig, EvaluationReport};
use crate::gan::{self, GanError, GanModel, TrainConfig};
use crate::imputer::{impute_fv, impute_gm, impute_impugan, ImputationResult, Method};
use crate::missingness::{apply_mask, generate_mask, Mechanism, MissingnessSpec};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Pipeline stage named in errors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Config,
    Ingest,
    Split,
    Train,
    Mask,
    Impute,
    Evaluate,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Ingest => "ingest",
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::Mask => "mask",
            Stage::Impute => "impute",
            Stage::Evaluate => "evaluate",
            Stage::Write => "write",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
#[error("{stage} stage failed: {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
    /// Written when training diverged.
    pub snapshot: Option<PathBuf>,
}

impl PipelineError {
    pub fn new(stage: Stage, message: impl fmt::Display) -> Self {
        PipelineError { stage, message: message.to_string(), snapshot: None }
    }

    /// True when the failure comes from the configuration rather than the run.
    pub fn is_usage(&self) -> bool {
        self.stage == Stage::Config
    }
}

fn at<E: fmt::Display>(stage: Stage) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::new(stage, e)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub path: PathBuf,
    /// Report name; defaults to the file stem.
    pub name: Option<String>,
    /// Label column for the stratified split and downstream classifiers.
    pub label: String,
    pub ingest: IngestOptions,
    /// Rows kept after dropping incomplete ones; `None` keeps all.
    pub subsample: Option<usize>,
    /// Drop rows that already contain missing cells, so every mask cell has a ground truth.
    pub drop_incomplete: bool,
    pub test_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            path: PathBuf::new(),
            name: None,
            label: String::new(),
            ingest: IngestOptions::default(),
            subsample: None,
            drop_incomplete: true,
            test_fraction: 0.25,
        }
    }
}

impl DatasetConfig {
    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            self.path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into())
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub mechanisms: Vec<Mechanism>,
    pub rates: Vec<f64>,
    /// Never masked, in addition to the label.
    pub exempt: Vec<String>,
    pub mar_drivers: BTreeMap<String, String>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            mechanisms: vec![Mechanism::Mcar, Mechanism::Mar, Mechanism::Mnar],
            rates: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            exempt: Vec::new(),
            mar_drivers: BTreeMap::new(),
        }
    }
}

/// Single JSON document driving every command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub sweep: SweepConfig,
    pub methods: Vec<Method>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Continuous fill value of the FV baseline.
    pub fv_constant: f64,
    /// Master seed: fixes the subsample and split; run seeds are `seed..seed + repeats`.
    pub seed: u64,
    pub repeats: usize,
    /// Output directory; not part of the config hash.
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetConfig::default(),
            sweep: SweepConfig::default(),
            methods: vec![Method::Impugan, Method::Gm, Method::Fv],
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            fv_constant: 0.0,
            seed: 0,
            repeats: 1,
            out: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(at(Stage::Config))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::new(Stage::Config, format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks that the dataset file exists.
    pub fn validate_dataset(&self) -> Result<(), PipelineError> {
        if !self.dataset.path.is_file() {
            return Err(PipelineError::new(Stage::Config, format!("dataset `{}` does not exist", self.dataset.path.display())));
        }
        Ok(())
    }

    /// Full check for a benchmark run.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::new(Stage::Config, m));
        self.validate_dataset()?;
        if self.dataset.label.is_empty() {
            return bad("dataset.label is required".into());
        }
        if !(self.dataset.test_fraction > 0.0 && self.dataset.test_fraction < 1.0) {
            return bad(format!("test_fraction {} outside (0, 1)", self.dataset.test_fraction));
        }
        if self.methods.is_empty() {
            return bad("method list is empty".into());
        }
        if self.sweep.mechanisms.is_empty() || self.sweep.rates.is_empty() {
            return bad("mask sweep is empty".into());
        }
        if let Some(r) = self.sweep.rates.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
            return bad(format!("missing rate {r} outside (0, 1)"));
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if self.dataset.subsample == Some(0) {
            return bad("subsample must be positive".into());
        }
        self.train.validate().map_err(at(Stage::Config))
    }

    /// Hex SHA-256 of the config JSON with the output directory cleared.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        hash_json(&c)
    }

    /// Hash of the settings a trained model depends on.
    fn model_hash(&self, run_seed: u64) -> String {
        hash_json(&(&self.dataset, &self.train, self.seed, run_seed))
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|r| self.seed.wrapping_add(r)).collect()
    }

    pub fn mask_spec(&self, mechanism: Mechanism, rate: f64, run_seed: u64) -> MissingnessSpec {
        let mut exempt = vec![self.dataset.label.clone()];
        exempt.extend(self.sweep.exempt.iter().cloned());
        exempt.sort();
        exempt.dedup();
        MissingnessSpec {
            mechanism,
            rate,
            seed: derive_seed(run_seed, &format!("mask/{mechanism}/{rate}")),
            exempt,
            mar_drivers: self.sweep.mar_drivers.clone(),
        }
    }
}

fn hash_json<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("hash input serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// Stable 64-bit seed for a named sub-stream of `seed`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Provenance block written next to every artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Provenance {
    pub fn new(config_hash: &str, seed: u64) -> Self {
        Provenance { config_hash: config_hash.to_string(), seed, version: VERSION.to_string() }
    }

    pub fn write(&self, path: &Path) -> Result<(), PipelineError> {
        write_file(path, &serde_json::to_string_pretty(self).expect("provenance serializes"))
    }

    pub fn read(path: &Path) -> Option<Self> {
        serde_json::from_str(&fs::read_to_string(path).ok()?).ok()
    }
}

/// Writes through a temporary file so an interrupted run never leaves a
/// truncated artifact behind.
pub fn write_file(path: &Path, contents: &str) -> Result<(), PipelineError> {
    let err = |e: std::io::Error| PipelineError::new(Stage::Write, format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(err)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(err)?;
    fs::rename(&tmp, path).map_err(err)
}

/// Training and test partitions of a prepared dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub name: String,
    pub train: Table,
    pub test: Table,
}

/// Loads, filters, subsamples and splits the dataset named in `cfg`.
pub fn prepare_dataset(cfg: &DatasetConfig, seed: u64) -> Result<PreparedData, PipelineError> {
    let table = ingest_csv(&cfg.path, &cfg.ingest).map_err(at(Stage::Ingest))?;
    let label = table
        .schema
        .index_of(&cfg.label)
        .ok_or_else(|| PipelineError::new(Stage::Ingest, format!("label column `{}` not found", cfg.label)))?;
    let mut rows: Vec<usize> = if cfg.drop_incomplete {
        table.complete_rows()
    } else {
        (0..table.n_rows()).filter(|&i| table.columns[label].is_observed(i)).collect()
    };
    if let Some(n) = cfg.subsample {
        if n < rows.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "subsample"));
            rows.shuffle(&mut rng);
            rows.truncate(n);
            rows.sort_unstable();
        }
    }
    let table = table.select_rows(&rows);
    let (train_rows, test_rows) = stratified_split(&table, label, cfg.test_fraction, derive_seed(seed, "split"))?;
    let mut train = table.select_rows(&train_rows);
    let mut test = table.select_rows(&test_rows);
    train.refresh_vocabularies();
    test.refresh_vocabularies();
    Ok(PreparedData { name: cfg.display_name(), train, test })
}

/// Per-class seeded shuffle; the first `round(n_c * test_fraction)` rows of
/// each class go to the test split. Both index lists are returned sorted.
pub fn stratified_split(table: &Table, label: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), PipelineError> {
    let mut classes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for i in 0..table.n_rows() {
        let v = table.get(i, label).ok_or_else(|| PipelineError::new(Stage::Split, format!("row {i} has no label")))?;
        classes.entry(v.to_string()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for rows in classes.values_mut() {
        rows.shuffle(&mut rng);
        let k = (rows.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&rows[..k]);
        train.extend_from_slice(&rows[k..]);
    }
    if train.is_empty() || test.is_empty() {
        return Err(PipelineError::new(Stage::Split, format!("{} rows are too few to split", table.n_rows())));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Trains the generator for one run seed, or loads it from `dir` when a
/// checkpoint with matching provenance exists and `force` is off.
pub fn train_or_load(train: &Table, cfg: &RunConfig, run_seed: u64, dir: &Path, force: bool) -> Result<GanModel, PipelineError> {
    let hash = cfg.model_hash(run_seed);
    let prov_path = dir.join("run.json");
    if !force && Provenance::read(&prov_path).is_some_and(|p| p.config_hash == hash && p.version == VERSION) {
        if let Ok(model) = GanModel::load(dir) {
            log::info!("reusing model in {}", dir.display());
            return Ok(model);
        }
    }
    let mut tc = cfg.train.clone();
    tc.seed = run_seed;
    let epochs = tc.epochs;
    let result = gan::train(train, &tc, |e| {
        log::info!("seed {run_seed} epoch {}/{epochs}: loss_d {:.4} loss_g {:.4} cond {:.4} |grad| {:.3}", e.epoch + 1, e.loss_d, e.loss_g, e.loss_cond, e.grad_norm);
    });
    let (model, log) = match result {
        Ok(r) => r,
        Err(GanError::Diverged(snap)) => {
            let path = dir.join("divergence.json");
            let mut err = PipelineError::new(Stage::Train, format!("training diverged: {snap}"));
            if write_file(&path, &serde_json::to_string_pretty(&snap).expect("snapshot serializes")).is_ok() {
                err.snapshot = Some(path);
            }
            return Err(err);
        }
        Err(e) => return Err(PipelineError::new(Stage::Train, e)),
    };
    model.save(dir).map_err(at(Stage::Write))?;
    gan::write_log(&log, &dir.join("train_log.jsonl")).map_err(at(Stage::Write))?;
    Provenance::new(&hash, run_seed).write(&prov_path)?;
    Ok(model)
}

/// Completes `table` with `method`.
pub fn run_method(method: Method, table: &Table, model: Option<&GanModel>, fv_constant: f64, seed: u64) -> Result<ImputationResult, PipelineError> {
    let result = match method {
        Method::Impugan => {
            let model = model.ok_or_else(|| PipelineError::new(Stage::Impute, "impugan requires a trained model"))?;
            impute_impugan(model, table, seed)
        }
        Method::Gm => impute_gm(table),
        Method::Fv => impute_fv(table, fv_constant),
    };
    result.map_err(at(Stage::Impute))
}

/// One (mechanism, rate, method, seed) cell of the sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub mechanism: Mechanism,
    pub rate: f64,
    pub method: Method,
    pub seed: u64,
}

impl Cell {
    pub fn file_name(&self) -> String {
        format!("{}_{}_{}_seed{}.json", self.mechanism, self.rate, self.method, self.seed)
    }
}

#[derive(Clone, Debug, Default)]
pub struct BenchmarkOptions {
    /// Recompute cells and models even when artifacts exist.
    pub force: bool,
    /// Threads evaluating cells; at least one.
    pub workers: usize,
}

/// Everything a finished benchmark produced.
#[derive(Clone, Debug)]
pub struct BenchmarkOutcome {
    pub reports: Vec<EvaluationReport>,
    pub computed: usize,
    pub reused: usize,
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
}

/// Runs the full sweep. Per-cell reports land in `out/reports/<dataset>/`;
/// the combined CSV and JSON are rewritten at the end. Cells whose report
/// already exists with the same config hash are skipped unless forced.
pub fn run_benchmark(cfg: &RunConfig, opts: &BenchmarkOptions) -> Result<BenchmarkOutcome, PipelineError> {
    cfg.validate()?;
    let hash = cfg.hash();
    let data = prepare_dataset(&cfg.dataset, cfg.seed)?;
    let report_dir = cfg.out.join("reports").join(&data.name);
    write_file(&cfg.out.join("config.json"), &cfg.to_json())?;
    Provenance::new(&hash, cfg.seed).write(&cfg.out.join("run.json"))?;

    let mut reports = Vec::new();
    let (mut computed, mut reused) = (0, 0);
    for run_seed in cfg.run_seeds() {
        let cells: Vec<Cell> = cfg
            .sweep
            .mechanisms
            .iter()
            .flat_map(|&mechanism| cfg.sweep.rates.iter().map(move |&rate| (mechanism, rate)))
            .flat_map(|(mechanism, rate)| cfg.methods.iter().map(move |&method| Cell { mechanism, rate, method, seed: run_seed }))
            .collect();
        let existing = |c: &Cell| -> Option<EvaluationReport> {
            if opts.force {
                return None;
            }
            let r = EvaluationReport::from_json(&fs::read_to_string(report_dir.join(c.file_name())).ok()?).ok()?;
            (r.config_hash == hash && r.version == VERSION).then_some(r)
        };
        let pending: BTreeSet<usize> = (0..cells.len()).filter(|&k| existing(&cells[k]).is_none()).collect();
        let model = if pending.iter().any(|&k| cells[k].method == Method::Impugan) {
            let dir = cfg.out.join("models").join(format!("seed_{run_seed}"));
            Some(train_or_load(&data.train, cfg, run_seed, &dir, opts.force)?)
        } else {
            None
        };

        let results: Vec<Mutex<Option<Result<EvaluationReport, PipelineError>>>> = cells.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let order: Vec<usize> = pending.iter().copied().collect();
        let worker = || loop {
            let k = next.fetch_add(1, Ordering::SeqCst);
            let Some(&idx) = order.get(k) else { break };
            let r = run_cell(cfg, &data, model.as_ref(), &cells[idx], &hash);
            let failed = r.is_err();
            if let Ok(rep) = &r {
                if let Err(e) = write_file(&report_dir.join(cells[idx].file_name()), &rep.to_json()) {
                    *results[idx].lock().expect("result slot") = Some(Err(e));
                    continue;
                }
            }
            *results[idx].lock().expect("result slot") = Some(r);
            if failed {
                next.store(order.len(), Ordering::SeqCst);
            }
        };
        std::thread::scope(|s| {
            for _ in 1..opts.workers.max(1) {
                s.spawn(worker);
            }
            worker();
        });
        for (k, slot) in results.into_iter().enumerate() {
            match slot.into_inner().expect("result slot") {
                Some(Ok(r)) => {
                    computed += 1;
                    reports.push(r);
                }
                Some(Err(e)) => return Err(e),
                None if pending.contains(&k) => {
                    return Err(PipelineError::new(Stage::Evaluate, format!("cell {} was not run", cells[k].file_name())));
                }
                None => {
                    reused += 1;
                    reports.push(existing(&cells[k]).expect("report checked above"));
                }
            }
        }
    }

    let csv_path = cfg.out.join("report.csv");
    let json_path = cfg.out.join("report.json");
    write_file(&csv_path, &reports_to_csv(&reports))?;
    write_file(&json_path, &reports_to_json(&reports))?;
    Ok(BenchmarkOutcome { reports, computed, reused, csv_path, json_path })
}

/// Masks the training split, imputes it and scores the result.
pub fn run_cell(cfg: &RunConfig, data: &PreparedData, model: Option<&GanModel>, cell: &Cell, config_hash: &str) -> Result<EvaluationReport, PipelineError> {
    let spec = cfg.mask_spec(cell.mechanism, cell.rate, cell.seed);
    let mask = generate_mask(&data.train, &spec).map_err(at(Stage::Mask))?;
    let masked = apply_mask(&data.train, &mask).map_err(at(Stage::Mask))?;
    let impute_seed = derive_seed(cell.seed, &format!("impute/{}/{}", cell.mechanism, cell.rate));
    let imputed = run_method(cell.method, &masked.incomplete, model, cfg.fv_constant, impute_seed)?;
    let task = DownstreamTask { test: &data.test, label: &cfg.dataset.label, seed: cell.seed };
    let metrics = evaluate_all(&masked.truth, &imputed.table, &masked.mask, &cfg.eval, Some(&task)).map_err(at(Stage::Evaluate))?;
    Ok(EvaluationReport {
        dataset: data.name.clone(),
        mechanism: cell.mechanism.to_string(),
        rate: cell.rate,
        method: cell.method.name().to_string(),
        seed: cell.seed,
        metrics,
        config_hash: config_hash.to_string(),
        version: VERSION.to_string(),
    })
}

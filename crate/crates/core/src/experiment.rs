//! Experiment runner behind the `gil` binary: data preparation, parallel
//! execution of runs, result files and the imputation/accuracy correlation.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! runs/<name>-s<seed>/metrics.csv   one row per evaluation point
//! results.csv                       one row per (run, seed)
//! summary.csv                       mean/std per run over its seeds
//! report.json                       config echo, versions, full reports
//! runs/<name>-s<seed>/model.ckpt    with `save_checkpoints = true`
//! ```
//!
//! Column layouts are documented in `docs/outputs.md`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::config::{DatasetSpec, ExperimentConfig, RunSpec};
use crate::datasets::{load_csv, load_mnist_idx_limited, split_indices, CsvOptions, Dataset, SequenceDataset, Standardizer};
use crate::error::{GilError, Result};
use crate::gil::{self, Network, Predictor, TrainOutcome, TrainReport, Variant};
use crate::models::checkpoint;
use crate::metrics::pearson;
use crate::missingness::Mechanism;
use crate::synthetic::{synthetic_mnar, synthetic_sequences, SyntheticMnarSpec, SyntheticSequenceSpec};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const THREADS_ENV: &str = "GIL_THREADS";

/// Train/eval data for one seed, plus complete training values when the
/// masking process knows them.
pub enum Prepared {
    Tabular { train: Dataset, eval: Dataset, truth: Option<Dataset> },
    Sequences { train: SequenceDataset, eval: SequenceDataset, truth: Option<SequenceDataset> },
}

const EVAL_MASK_STREAM: u64 = 0x7e57;

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let mask = &cfg.mask;
    match &cfg.dataset {
        DatasetSpec::SyntheticMnar { n, d, mask_signal, value_signal, seed: fixed } => {
            let spec = SyntheticMnarSpec {
                n: *n,
                d: *d,
                mask_signal: *mask_signal,
                value_signal: *value_signal,
                seed: fixed.unwrap_or(seed),
            };
            let data = synthetic_mnar(&spec, 0.0)?;
            let observed = mask.apply(&data.observed, seed)?;
            let (tr, te) = split_indices(observed.len(), cfg.test_fraction, seed)?;
            Ok(Prepared::Tabular {
                train: observed.subset(&tr),
                eval: observed.subset(&te),
                truth: Some(data.complete.subset(&tr)),
            })
        }
        DatasetSpec::SyntheticSequences { n, d, horizon, signal, seed: fixed } => {
            let spec = SyntheticSequenceSpec { n: *n, d: *d, horizon: *horizon, signal: *signal, seed: fixed.unwrap_or(seed) };
            let complete = synthetic_sequences(&spec, 0.0)?;
            let observed = mask.apply_sequences(&complete, seed)?;
            let (tr, te) = split_indices(observed.len(), cfg.test_fraction, seed)?;
            let truth = (mask.mechanism != Mechanism::None).then(|| complete.subset(&tr));
            Ok(Prepared::Sequences { train: observed.subset(&tr), eval: observed.subset(&te), truth })
        }
        DatasetSpec::Mnist { dir, train_limit, test_limit } => {
            let train = load_mnist_idx_limited(
                dir.join("train-images-idx3-ubyte"),
                dir.join("train-labels-idx1-ubyte"),
                *train_limit,
            )?;
            let test = load_mnist_idx_limited(
                dir.join("t10k-images-idx3-ubyte"),
                dir.join("t10k-labels-idx1-ubyte"),
                *test_limit,
            )?;
            let masked = mask.apply(&train, seed)?;
            let eval = mask.apply(&test, seed ^ EVAL_MASK_STREAM)?;
            let truth = (mask.mechanism != Mechanism::None).then_some(train);
            Ok(Prepared::Tabular { train: masked, eval, truth })
        }
        DatasetSpec::Csv { path, label_column, standardize } => {
            let raw = load_csv(path, &CsvOptions::new(label_column))?;
            let (tr, te) = split_indices(raw.len(), cfg.test_fraction, seed)?;
            let (mut train, mut eval) = (raw.subset(&tr), raw.subset(&te));
            if *standardize {
                let st = Standardizer::fit(&train);
                train = st.apply(&train);
                eval = st.apply(&eval);
            }
            let natively_complete = train.samples.iter().all(|s| s.missing_count() == 0);
            let masked = mask.apply(&train, seed)?;
            let eval = mask.apply(&eval, seed ^ EVAL_MASK_STREAM)?;
            let truth = (natively_complete && mask.mechanism != Mechanism::None).then_some(train);
            Ok(Prepared::Tabular { train: masked, eval, truth })
        }
    }
}

/// Train one run on prepared data.
pub fn run_one(run: &RunSpec, seed: u64, data: &Prepared) -> Result<(TrainOutcome, Option<f64>)> {
    let cfg = gil::TrainConfig { seed, ..run.train.clone() };
    match data {
        Prepared::Tabular { train, eval, truth } => {
            if cfg.variant == Variant::Baseline {
                gil::train_baseline(train, eval, &cfg, truth.as_ref())
            } else {
                Ok((gil::train(train, eval, &cfg)?, None))
            }
        }
        Prepared::Sequences { train, eval, truth } => {
            if cfg.variant == Variant::Baseline {
                gil::train_baseline_sequences(train, eval, &cfg, truth.as_ref())
            } else {
                Ok((gil::train_sequences(train, eval, &cfg)?, None))
            }
        }
    }
}

fn checkpoint_text(p: &Predictor) -> String {
    match &p.network {
        Network::Mlp(m) => checkpoint::mlp_to_string(m),
        Network::Lstm(m) => checkpoint::lstm_to_string(m),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub seed: u64,
    pub variant: Variant,
    pub imputer: String,
    pub error: Option<String>,
    pub imputation_mse: Option<f64>,
    pub report: Option<TrainReport>,
    #[serde(skip)]
    pub checkpoint: Option<String>,
}

impl RunRecord {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Serialize)]
struct ReportFile<'a> {
    schema_version: u32,
    tool: &'static str,
    version: &'static str,
    config: &'a ExperimentConfig,
    runs: &'a [RunRecord],
}

#[derive(Deserialize)]
struct ReportConfig {
    config: ExperimentConfig,
}

/// Load either a TOML config or the `report.json` of an earlier run.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "json") {
        let text = std::fs::read_to_string(path).map_err(|e| GilError::load(path, e.to_string()))?;
        let r: ReportConfig =
            serde_json::from_str(&text).map_err(|e| GilError::config(format!("{}: {e}", path.display())))?;
        return Ok(r.config);
    }
    ExperimentConfig::load(path)
}

/// Worker count from `GIL_THREADS`, defaulting to the available cores.
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(GilError::config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn imputer_label(run: &RunSpec) -> String {
    if run.train.variant == Variant::Baseline {
        run.train.imputer.name().to_string()
    } else {
        "placeholder".to_string()
    }
}

/// Execute every (run, seed) pair on `threads` workers and write all
/// output files. Individual failures are recorded, not propagated.
pub fn run_experiment(cfg: &ExperimentConfig, threads: usize) -> Result<Vec<RunRecord>> {
    // seed-major so consecutive jobs on a worker share prepared data
    let mut jobs: Vec<(u64, usize)> =
        cfg.runs.iter().enumerate().flat_map(|(ri, r)| r.seeds.iter().map(move |&s| (s, ri))).collect();
    jobs.sort_by_key(|&(s, ri)| (s, ri));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<RunRecord>>> = Mutex::new(vec![None; jobs.len()]);
    std::thread::scope(|scope| {
        for _ in 0..threads.max(1).min(jobs.len()) {
            scope.spawn(|| {
                let mut cache: Option<(u64, Arc<Result<Prepared>>)> = None;
                loop {
                    let k = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&(seed, ri)) = jobs.get(k) else { break };
                    let run = &cfg.runs[ri];
                    let data = match &cache {
                        Some((s, d)) if *s == seed => Arc::clone(d),
                        _ => {
                            // release the previous seed's data first
                            drop(cache.take());
                            let d = Arc::new(prepare(cfg, seed));
                            cache = Some((seed, Arc::clone(&d)));
                            d
                        }
                    };
                    let outcome = match data.as_ref() {
                        Ok(d) => run_one(run, seed, d),
                        Err(e) => Err(GilError::config(format!("data preparation failed: {e}"))),
                    };
                    let (report, checkpoint, mse, error) = match outcome {
                        Ok((o, m)) => {
                            let ckpt = cfg.save_checkpoints.then(|| checkpoint_text(&o.predictor));
                            (Some(o.report), ckpt, m, None)
                        }
                        Err(e) => (None, None, None, Some(e.to_string())),
                    };
                    let rec = RunRecord {
                        name: run.name.clone(),
                        seed,
                        variant: run.train.variant,
                        imputer: imputer_label(run),
                        error,
                        imputation_mse: mse,
                        report,
                        checkpoint,
                    };
                    results.lock().expect("results lock")[k] = Some(rec);
                }
            });
        }
    });
    let mut by_job: Vec<((usize, u64), RunRecord)> = jobs
        .iter()
        .zip(results.into_inner().expect("results lock"))
        .map(|(&(s, ri), r)| ((ri, s), r.expect("every job finished")))
        .collect();
    by_job.sort_by_key(|(k, _)| *k);
    let records: Vec<RunRecord> = by_job.into_iter().map(|(_, r)| r).collect();
    write_outputs(cfg, &records)?;
    Ok(records)
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(report: &TrainReport) -> String {
    let mut s = String::from("iteration,train_loss,accuracy,auc,ap\n");
    for p in &report.points {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            p.iteration,
            p.train_loss,
            p.eval.accuracy,
            opt(p.eval.auc),
            opt(p.eval.average_precision)
        );
    }
    s
}

pub fn run_dir_name(name: &str, seed: u64) -> String {
    format!("{name}-s{seed}")
}

const RESULTS_HEADER: &str = "run,variant,imputer,seed,status,missing_rate,accuracy,auc,ap,best_accuracy,best_iteration,imputation_mse,wall_clock_secs,error";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn results_csv(records: &[RunRecord]) -> String {
    let mut s = format!("{RESULTS_HEADER}\n");
    for r in records {
        let _ = match &r.report {
            Some(rep) => writeln!(
                s,
                "{},{},{},{},ok,{},{},{},{},{},{},{},{},",
                csv_field(&r.name),
                r.variant.name(),
                r.imputer,
                r.seed,
                rep.missing_rate,
                rep.final_eval.accuracy,
                opt(rep.final_eval.auc),
                opt(rep.final_eval.average_precision),
                rep.best_eval.accuracy,
                rep.best_iteration,
                opt(r.imputation_mse),
                rep.wall_clock_secs
            ),
            None => writeln!(
                s,
                "{},{},{},{},failed,,,,,,,,,{}",
                csv_field(&r.name),
                r.variant.name(),
                r.imputer,
                r.seed,
                csv_field(r.error.as_deref().unwrap_or("unknown error"))
            ),
        };
    }
    s
}

/// Mean and sample standard deviation; the deviation needs two values.
pub fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() >= 2).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

fn summary_csv(cfg: &ExperimentConfig, records: &[RunRecord]) -> String {
    let mut s = String::from(
        "run,variant,imputer,n_ok,n_failed,accuracy_mean,accuracy_std,auc_mean,auc_std,ap_mean,ap_std,imputation_mse_mean,imputation_mse_std\n",
    );
    for run in &cfg.runs {
        let mine: Vec<&RunRecord> = records.iter().filter(|r| r.name == run.name).collect();
        let ok: Vec<&TrainReport> = mine.iter().filter_map(|r| r.report.as_ref()).collect();
        let col = |f: &dyn Fn(&TrainReport) -> Option<f64>| -> Vec<f64> { ok.iter().filter_map(|r| f(r)).collect() };
        let acc = mean_std(&col(&|r| Some(r.final_eval.accuracy)));
        let auc = mean_std(&col(&|r| r.final_eval.auc));
        let ap = mean_std(&col(&|r| r.final_eval.average_precision));
        let mse: Vec<f64> = mine.iter().filter_map(|r| r.imputation_mse).collect();
        let mse = mean_std(&mse);
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(&run.name),
            run.train.variant.name(),
            imputer_label(run),
            ok.len(),
            mine.len() - ok.len(),
            opt(acc.0),
            opt(acc.1),
            opt(auc.0),
            opt(auc.1),
            opt(ap.0),
            opt(ap.1),
            opt(mse.0),
            opt(mse.1)
        );
    }
    s
}

fn write_outputs(cfg: &ExperimentConfig, records: &[RunRecord]) -> Result<()> {
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out.join("runs"))?;
    for r in records {
        if let Some(rep) = &r.report {
            let dir = out.join("runs").join(run_dir_name(&r.name, r.seed));
            std::fs::create_dir_all(&dir)?;
            write_atomic(&dir.join("metrics.csv"), &metrics_csv(rep))?;
            if let Some(text) = &r.checkpoint {
                write_atomic(&dir.join("model.ckpt"), text)?;
            }
        }
    }
    write_atomic(&out.join("results.csv"), &results_csv(records))?;
    write_atomic(&out.join("summary.csv"), &summary_csv(cfg, records))?;
    let report = ReportFile {
        schema_version: REPORT_SCHEMA_VERSION,
        tool: "gil",
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        runs: records,
    };
    write_atomic(&out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct ResultRow {
    run: String,
    variant: String,
    seed: u64,
    status: String,
    accuracy: Option<f64>,
    imputation_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Correlation {
    /// (run, seed, imputation_mse, accuracy) per point.
    pub points: Vec<(String, u64, f64, f64)>,
    pub r: f64,
    pub p_value: f64,
}

/// Pearson correlation between imputation error and accuracy over the
/// successful baseline rows of `<dir>/results.csv`; writes
/// `<dir>/correlation.csv`.
pub fn correlate(dir: impl AsRef<Path>) -> Result<Correlation> {
    let dir = dir.as_ref();
    let path = dir.join("results.csv");
    let mut reader = csv::Reader::from_path(&path).map_err(|e| GilError::load(&path, e.to_string()))?;
    let mut points = Vec::new();
    for row in reader.deserialize::<ResultRow>() {
        let row = row.map_err(|e| GilError::load(&path, e.to_string()))?;
        if row.status != "ok" || row.variant != Variant::Baseline.name() {
            continue;
        }
        if let (Some(mse), Some(acc)) = (row.imputation_mse, row.accuracy) {
            points.push((row.run, row.seed, mse, acc));
        }
    }
    if points.len() < 3 {
        return Err(GilError::UndefinedMetric(format!(
            "correlation needs at least 3 baseline runs with imputation error, found {}",
            points.len()
        )));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.2).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.3).collect();
    let (r, p_value) = pearson(&xs, &ys)?;
    // the t approximation behind the p-value is rough for tiny samples
    let mut s = String::from("x,y,n,r,p_value,low_n\n");
    let _ = writeln!(s, "imputation_mse,accuracy,{},{r},{p_value},{}", points.len(), points.len() < 5);
    write_atomic(&dir.join("correlation.csv"), &s)?;
    Ok(Correlation { points, r, p_value })
}

/// Paths of the per-run metrics files of an experiment.
pub fn metrics_paths(cfg: &ExperimentConfig) -> Vec<PathBuf> {
    cfg.runs
        .iter()
        .flat_map(|r| r.seeds.iter().map(move |&s| cfg.out_dir.join("runs").join(run_dir_name(&r.name, s)).join("metrics.csv")))
        .collect()
}

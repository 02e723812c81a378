use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    DataSource, ExperimentConfig, Method, RunResult, RunStatus, CSV_COLUMNS, RESULTS_CSV, RESULTS_JSONL,
    TRACES_DIR,
};
use crate::data::{generate_shifted, read_labeled_csv, read_unlabeled_csv, split, subsample_labels, LabeledSet, UnlabeledSet};
use crate::divergence::proxy_distance_with;
use crate::error::{Error, Result};
use crate::nets::{ModelParams, NetSpec};
use crate::rng::derive_seed;
use crate::trainers::{evaluate, train_dann, train_supervised, train_transdann, CycleTrace, DomainData};

/// One grid cell.
#[derive(Debug, Clone, Copy)]
pub(super) struct Job {
    method: Method,
    fraction: f64,
    seed: u64,
}

/// Distinct grid cells in method, fraction, seed order.
pub(super) fn grid(cfg: &ExperimentConfig) -> Vec<Job> {
    let mut seen = HashSet::new();
    let mut jobs = Vec::new();
    for &method in &cfg.methods {
        for &fraction in &cfg.fractions {
            for &seed in &cfg.seeds {
                if seen.insert((method, fraction.to_bits(), seed)) {
                    jobs.push(Job { method, fraction, seed });
                }
            }
        }
    }
    jobs
}

/// Data of one run seed, before label subsampling.
struct RunData {
    source_train: LabeledSet,
    source_dev: LabeledSet,
    target: UnlabeledSet,
    target_val: LabeledSet,
    target_test: LabeledSet,
    hash: String,
}

fn hex_prefix(digest: &[u8]) -> String {
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn build_data(cfg: &ExperimentConfig, seed: u64) -> Result<RunData> {
    let mut hasher = Sha256::new();
    let (source, target, target_val, target_test) = match &cfg.data {
        DataSource::Synthetic(spec) => {
            let mut spec = spec.clone();
            spec.seed = spec.seed.wrapping_add(seed);
            hasher.update(serde_json::to_vec(&spec)?);
            let d = generate_shifted(&spec)?;
            (d.source, d.target, d.target_val, d.target_test)
        }
        DataSource::Csv(files) => {
            let mut read = |p: &Path| -> Result<()> {
                hasher.update(fs::read(p).map_err(|e| Error::io(p, e))?);
                Ok(())
            };
            read(&files.source)?;
            read(&files.target)?;
            read(&files.target_test)?;
            let source = read_labeled_csv(&files.source)?;
            let val = match &files.target_val {
                Some(p) => {
                    read(p)?;
                    read_labeled_csv(p)?
                }
                None => LabeledSet::empty(source.num_classes),
            };
            (source, read_unlabeled_csv(&files.target)?, val, read_labeled_csv(&files.target_test)?)
        }
    };
    hasher.update(cfg.source_dev_ratio.to_le_bytes());
    let r = cfg.source_dev_ratio;
    let (source_train, source_dev, _) = split(&source, (1.0 - r, r, 0.0), derive_seed(seed, 10))?;
    Ok(RunData {
        source_train,
        source_dev,
        target,
        target_val,
        target_test,
        hash: hex_prefix(&hasher.finalize()),
    })
}

fn net_for(cfg: &ExperimentConfig, data: &RunData) -> Result<NetSpec> {
    if let Some(net) = &cfg.net {
        return Ok(net.clone());
    }
    let dim = data.source_train.dim().ok_or_else(|| Error::contract("source set is empty"))?;
    Ok(NetSpec::desk(dim, data.source_train.num_classes))
}

struct Outcome {
    model: ModelParams,
    trace: CycleTrace,
    source_train: LabeledSet,
}

fn train_job(cfg: &ExperimentConfig, job: Job, data: &RunData) -> Result<Outcome> {
    let net = net_for(cfg, data)?;
    let train = crate::trainers::TrainConfig {
        seed: job.seed,
        ..cfg.train.clone()
    };
    let source_train = subsample_labels(&data.source_train, job.fraction, derive_seed(job.seed, 11))?;
    let domain = DomainData::new(source_train.clone(), data.target.clone())
        .with_target_val(data.target_val.clone())
        .with_source_dev(data.source_dev.clone());
    let (model, trace) = match job.method {
        Method::SourceOnly => (train_supervised(&source_train, &net, &train)?, CycleTrace::default()),
        Method::TargetOnly => {
            if data.target_val.is_empty() {
                return Err(Error::contract("target_only needs a labeled target validation set"));
            }
            (train_supervised(&data.target_val, &net, &train)?, CycleTrace::default())
        }
        Method::Dann => train_dann(&domain, &net, &train)?,
        Method::Transdann => {
            let out = train_transdann(&domain, &net, &train)?;
            (out.model, out.trace)
        }
    };
    Ok(Outcome {
        model,
        trace,
        source_train,
    })
}

fn trace_name(job: Job, hash: &str) -> String {
    format!("{}/{}_{}_{}_{}.json", TRACES_DIR, job.method, job.fraction, job.seed, hash)
}

fn execute(cfg: &ExperimentConfig, out_dir: &Path, job: Job) -> RunResult {
    let start = Instant::now();
    let mut result = RunResult {
        method: job.method,
        fraction: job.fraction,
        seed: job.seed,
        data_hash: String::new(),
        status: RunStatus::Failed,
        error: None,
        acc_target_test: None,
        acc_source_dev: None,
        dhat: None,
        wall_time_sec: 0.0,
        cycle_trace: None,
    };
    let attempt = (|| -> Result<()> {
        let data = build_data(cfg, job.seed)?;
        result.data_hash = data.hash.clone();
        let out = train_job(cfg, job, &data)?;
        result.acc_target_test = Some(evaluate(&out.model, &data.target_test)?);
        if !data.source_dev.is_empty() {
            result.acc_source_dev = Some(evaluate(&out.model, &data.source_dev)?);
        }
        if cfg.compute_dhat {
            let fs = out.model.features(out.source_train.inputs()?)?;
            let ft = out.model.features(data.target.inputs()?)?;
            result.dhat = Some(proxy_distance_with(&fs, &ft, derive_seed(job.seed, 12), &cfg.probe)?);
        }
        let rel = trace_name(job, &data.hash);
        let path = out_dir.join(&rel);
        fs::write(&path, serde_json::to_vec_pretty(&out.trace)?).map_err(|e| Error::io(&path, e))?;
        result.cycle_trace = Some(rel);
        Ok(())
    })();
    match attempt {
        Ok(()) => result.status = RunStatus::Ok,
        Err(e) => result.error = Some(e.to_string()),
    }
    result.wall_time_sec = start.elapsed().as_secs_f64();
    result
}

/// CSV row with exactly [`CSV_COLUMNS`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CsvRow {
    method: Method,
    fraction: f64,
    seed: u64,
    acc_target_test: f64,
    acc_source_dev: Option<f64>,
    dhat: Option<f64>,
    wall_time_sec: f64,
}

/// Single writer for both result files.
struct Appender {
    csv: csv::Writer<File>,
    csv_path: PathBuf,
    jsonl: File,
    jsonl_path: PathBuf,
}

impl Appender {
    fn open(out_dir: &Path) -> Result<Self> {
        let csv_path = out_dir.join(RESULTS_CSV);
        let fresh = fs::metadata(&csv_path).map_or(true, |m| m.len() == 0);
        if !fresh {
            let mut r = csv::Reader::from_path(&csv_path)?;
            let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
            if header != CSV_COLUMNS {
                return Err(Error::Format {
                    offset: 0,
                    message: format!("{} has header {header:?}, expected {CSV_COLUMNS:?}", csv_path.display()),
                });
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&csv_path)
            .map_err(|e| Error::io(&csv_path, e))?;
        let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            csv.write_record(CSV_COLUMNS)?;
            csv.flush().map_err(|e| Error::io(&csv_path, e))?;
        }
        let jsonl_path = out_dir.join(RESULTS_JSONL);
        let jsonl = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&jsonl_path)
            .map_err(|e| Error::io(&jsonl_path, e))?;
        Ok(Self {
            csv,
            csv_path,
            jsonl,
            jsonl_path,
        })
    }

    fn append(&mut self, r: &RunResult) -> Result<()> {
        let mut line = serde_json::to_vec(r)?;
        line.push(b'\n');
        self.jsonl.write_all(&line).map_err(|e| Error::io(&self.jsonl_path, e))?;
        if let (RunStatus::Ok, Some(acc)) = (r.status, r.acc_target_test) {
            self.csv.serialize(CsvRow {
                method: r.method,
                fraction: r.fraction,
                seed: r.seed,
                acc_target_test: acc,
                acc_source_dev: r.acc_source_dev,
                dhat: r.dhat,
                wall_time_sec: r.wall_time_sec,
            })?;
            self.csv.flush().map_err(|e| Error::io(&self.csv_path, e))?;
        }
        Ok(())
    }
}

/// Every record in `out_dir/results.jsonl`, oldest first.
pub fn load_results(out_dir: &Path) -> Result<Vec<RunResult>> {
    let path = out_dir.join(RESULTS_JSONL);
    let file = match File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(&path, e)),
    };
    let mut out = Vec::new();
    let mut offset = 0;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
                offset,
                message: format!("{}: {e}", path.display()),
            })?);
        }
        offset += line.len() + 1;
    }
    Ok(out)
}

/// Successful runs from a results CSV (provenance fields left empty).
pub fn read_results_csv(path: &Path) -> Result<Vec<RunResult>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<CsvRow>()
        .map(|row| {
            let row = row?;
            Ok(RunResult {
                method: row.method,
                fraction: row.fraction,
                seed: row.seed,
                data_hash: String::new(),
                status: RunStatus::Ok,
                error: None,
                acc_target_test: Some(row.acc_target_test),
                acc_source_dev: row.acc_source_dev,
                dhat: row.dhat,
                wall_time_sec: row.wall_time_sec,
                cycle_trace: None,
            })
        })
        .collect()
}

/// Runs every grid cell not already completed under the output directory
/// and returns one result per cell (the stored one for skipped cells).
///
/// A run that fails is recorded with [`RunStatus::Failed`]; the remaining
/// runs continue.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let out_dir = cfg.resolved_out_dir();
    let traces = out_dir.join(TRACES_DIR);
    fs::create_dir_all(&traces).map_err(|e| Error::io(&traces, e))?;

    let mut done: HashMap<(Method, u64, u64), RunResult> = HashMap::new();
    let mut hashes: HashMap<u64, String> = HashMap::new();
    let existing = load_results(&out_dir)?;
    let jobs = grid(cfg);
    let mut todo = Vec::new();
    for job in &jobs {
        let hash = match hashes.get(&job.seed) {
            Some(h) => h.clone(),
            None => {
                let h = build_data(cfg, job.seed)?.hash;
                hashes.insert(job.seed, h.clone());
                h
            }
        };
        let prior = existing.iter().rev().find(|r| {
            r.is_ok() && r.method == job.method && r.fraction.to_bits() == job.fraction.to_bits() && r.seed == job.seed && r.data_hash == hash
        });
        match prior {
            Some(r) => {
                done.insert((job.method, job.fraction.to_bits(), job.seed), r.clone());
            }
            None => todo.push(*job),
        }
    }

    let mut appender = Appender::open(&out_dir)?;
    let workers = if cfg.workers == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        cfg.workers
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::contract(format!("cannot start worker pool: {e}")))?;
    let (tx, rx) = mpsc::channel::<RunResult>();
    let mut write_error = None;
    std::thread::scope(|s| {
        let out_dir = &out_dir;
        let todo = &todo;
        s.spawn(move || {
            pool.install(|| {
                todo.par_iter().for_each_with(tx, |tx, &job| {
                    // The receiver outlives every sender, so a send cannot fail.
                    let _ = tx.send(execute(cfg, out_dir, job));
                })
            })
        });
        for r in rx {
            if write_error.is_none() {
                if let Err(e) = appender.append(&r) {
                    write_error = Some(e);
                }
            }
            done.insert((r.method, r.fraction.to_bits(), r.seed), r);
        }
    });
    if let Some(e) = write_error {
        return Err(e);
    }
    Ok(jobs
        .iter()
        .filter_map(|j| done.remove(&(j.method, j.fraction.to_bits(), j.seed)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ShiftSpec;

    fn tiny(out: &Path) -> ExperimentConfig {
        let mut spec = ShiftSpec::two_moons(30.0, 0);
        spec.n_source = 40;
        spec.n_target = 40;
        spec.n_val = 10;
        spec.n_test = 40;
        let mut cfg = ExperimentConfig::new(DataSource::Synthetic(spec), out);
        cfg.methods = vec![Method::SourceOnly];
        cfg.fractions = vec![1.0];
        cfg.seeds = vec![7];
        cfg.train.steps_per_cycle = 20;
        cfg.probe.steps = 20;
        cfg.workers = 1;
        cfg
    }

    #[test]
    fn single_cell_gives_single_result_and_rerun_is_noop() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let first = run_experiment(&cfg).unwrap();
        assert_eq!(first.len(), 1);
        assert!(first[0].is_ok(), "{:?}", first[0].error);
        let csv_before = fs::read(dir.path().join(RESULTS_CSV)).unwrap();
        let second = run_experiment(&cfg).unwrap();
        assert_eq!(first, second);
        assert_eq!(fs::read(dir.path().join(RESULTS_CSV)).unwrap(), csv_before);
        let trace_path = dir.path().join(first[0].cycle_trace.as_ref().unwrap());
        let _: CycleTrace = serde_json::from_slice(&fs::read(trace_path).unwrap()).unwrap();
        let rows = read_results_csv(&dir.path().join(RESULTS_CSV)).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].acc_target_test, first[0].acc_target_test);
    }

    #[test]
    fn failures_are_recorded_and_retried() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.methods = vec![Method::TargetOnly, Method::SourceOnly];
        if let DataSource::Synthetic(spec) = &mut cfg.data {
            spec.n_val = 0;
        }
        let res = run_experiment(&cfg).unwrap();
        assert_eq!(res[0].status, RunStatus::Failed);
        assert!(res[0].error.as_ref().unwrap().contains("target_only"));
        assert!(res[1].is_ok());
        let csv = fs::read_to_string(dir.path().join(RESULTS_CSV)).unwrap();
        assert_eq!(csv.lines().count(), 2);
        run_experiment(&cfg).unwrap();
        assert_eq!(load_results(dir.path()).unwrap().len(), 3);
    }

    #[test]
    fn foreign_csv_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(RESULTS_CSV), "a,b\n1,2\n").unwrap();
        assert!(matches!(run_experiment(&tiny(dir.path())), Err(Error::Format { .. })));
    }
}

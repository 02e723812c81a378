//! Experiment grids over (method, label fraction, seed), persisted results,
//! comparison tables and plot series.
//!
//! Output layout under the experiment's output directory:
//!
//! * `results.csv`: one row per successful run, columns [`CSV_COLUMNS`]
//! * `results.jsonl`: every run, including failures, as a [`RunResult`]
//! * `traces/*.json`: the [`CycleTrace`](crate::trainers::CycleTrace) of each run
//!
//! Both result files are append-only. A run is identified by its [`RunKey`];
//! reruns skip keys that already completed and retry failed ones.

mod report;
mod runner;

pub use report::{compare, emit_plot_series, Comparison, Improvement, MethodSummary, MissingPair, PlotSeries, METRICS};
pub use runner::{load_results, read_results_csv, run_experiment};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::ShiftSpec;
use crate::divergence::ProbeConfig;
use crate::error::{Error, Result};
use crate::nets::NetSpec;
use crate::trainers::TrainConfig;

/// Overrides [`ExperimentConfig::out_dir`] when set.
pub const OUT_DIR_ENV: &str = "TDANN_OUT_DIR";
pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_JSONL: &str = "results.jsonl";
pub const TRACES_DIR: &str = "traces";
pub const CSV_COLUMNS: [&str; 7] = [
    "method",
    "fraction",
    "seed",
    "acc_target_test",
    "acc_source_dev",
    "dhat",
    "wall_time_sec",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Task path trained on source labels only.
    SourceOnly,
    /// Task path trained on labeled target data only.
    TargetOnly,
    Dann,
    Transdann,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::SourceOnly, Method::TargetOnly, Method::Dann, Method::Transdann];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::SourceOnly => "source_only",
            Method::TargetOnly => "target_only",
            Method::Dann => "dann",
            Method::Transdann => "transdann",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown method {s:?}; expected one of source_only, target_only, dann, transdann")))
    }
}

/// CSV files in the interchange format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvData {
    /// Labeled source set.
    pub source: PathBuf,
    /// Target pool; a `label` column, if present, is ignored.
    pub target: PathBuf,
    /// Labeled target validation set (gate and target-only training).
    #[serde(default)]
    pub target_val: Option<PathBuf>,
    pub target_test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Regenerated for every run seed with `seed = spec.seed + run seed`.
    Synthetic(ShiftSpec),
    Csv(CsvData),
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn default_fractions() -> Vec<f64> {
    vec![1.0, 0.95, 0.90, 0.85, 0.80]
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("tdann-out")
}

fn default_source_dev_ratio() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

/// JSON-configured experiment grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Fractions of the source training labels kept.
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// `train.seed` is replaced by each run seed.
    #[serde(default)]
    pub train: TrainConfig,
    /// Defaults to [`NetSpec::desk`] sized to the data.
    #[serde(default)]
    pub net: Option<NetSpec>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Parallel runs; 0 uses every available core.
    #[serde(default)]
    pub workers: usize,
    /// Share of the source set held out for source-dev accuracy.
    #[serde(default = "default_source_dev_ratio")]
    pub source_dev_ratio: f64,
    /// Proxy distance between source and target features of each model.
    #[serde(default = "default_true")]
    pub compute_dhat: bool,
    #[serde(default)]
    pub probe: ProbeConfig,
}

impl ExperimentConfig {
    pub fn new(data: DataSource, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            data,
            methods: default_methods(),
            fractions: default_fractions(),
            seeds: default_seeds(),
            train: TrainConfig::default(),
            net: None,
            out_dir: out_dir.into(),
            workers: 0,
            source_dev_ratio: default_source_dev_ratio(),
            compute_dhat: true,
            probe: ProbeConfig::default(),
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::contract("experiment needs at least one method"));
        }
        if self.seeds.is_empty() {
            return Err(Error::contract("experiment needs at least one seed"));
        }
        if self.fractions.is_empty() || self.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::contract(format!("fractions must be in (0, 1], got {:?}", self.fractions)));
        }
        if !(0.0..1.0).contains(&self.source_dev_ratio) {
            return Err(Error::contract("source_dev_ratio must be in [0, 1)"));
        }
        self.train.validate()
    }

    /// `$TDANN_OUT_DIR` if set, else `out_dir`.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.out_dir.clone(),
        }
    }

    /// Grid size, counting each distinct (method, fraction, seed) once.
    pub fn grid_len(&self) -> usize {
        runner::grid(self).len()
    }
}

/// Identity of one run. `data_hash` fingerprints the exact data it used.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RunKey {
    pub method: Method,
    /// `fraction.to_bits()`, so keys are hashable and exact.
    pub fraction_bits: u64,
    pub seed: u64,
    pub data_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// Metrics and provenance of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub fraction: f64,
    pub seed: u64,
    pub data_hash: String,
    pub status: RunStatus,
    #[serde(default)]
    pub error: Option<String>,
    pub acc_target_test: Option<f64>,
    pub acc_source_dev: Option<f64>,
    pub dhat: Option<f64>,
    pub wall_time_sec: f64,
    /// Trace file path relative to the output directory.
    pub cycle_trace: Option<String>,
}

impl RunResult {
    pub fn key(&self) -> RunKey {
        RunKey {
            method: self.method,
            fraction_bits: self.fraction.to_bits(),
            seed: self.seed,
            data_hash: self.data_hash.clone(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!(matches!("dan".parse::<Method>(), Err(Error::Usage(_))));
    }

    #[test]
    fn config_defaults_from_minimal_json() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"data": {"synthetic": {"generator": "two_moons", "rotation_deg": 35,
                "noise_sigma": 0.1, "n_source": 200, "n_target": 200, "n_val": 50,
                "n_test": 500, "seed": 0}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.methods, Method::ALL.to_vec());
        assert_eq!(cfg.fractions, vec![1.0, 0.95, 0.90, 0.85, 0.80]);
        assert_eq!(cfg.seeds.len(), 3);
        assert_eq!(cfg.grid_len(), 60);
        cfg.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        let mut cfg = ExperimentConfig::new(DataSource::Synthetic(ShiftSpec::two_moons(0.0, 0)), "out");
        cfg.fractions = vec![0.0];
        assert!(cfg.validate().is_err());
        cfg.fractions = vec![1.0];
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
    }
}

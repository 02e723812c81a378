//! `tdann`: command-line front end for the transdann-core toolkit.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use transdann_core::assigner::{assign_interim_labels, estimate_class_budget, PriorSource, ScoreMatrix};
use transdann_core::data::{
    generate_shifted, read_labeled_csv, read_unlabeled_csv, write_labeled_csv, write_unlabeled_csv, ShiftSpec,
};
use transdann_core::divergence::{proxy_distance, theorem2_bound, BoundInputs};
use transdann_core::harness::{
    compare, emit_plot_series, load_results, read_results_csv, run_experiment, ExperimentConfig, Method, RunResult,
    RESULTS_CSV, RESULTS_JSONL,
};
use transdann_core::nets::NetSpec;
use transdann_core::trainers::{evaluate, train_dann, train_supervised, train_transdann, DomainData, TrainConfig};

#[derive(Parser)]
#[command(name = "tdann", version, about = "Domain-adversarial training with transductive interim labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source/target pair as CSV files.
    GenerateData {
        /// ShiftSpec JSON file.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train one model and save its checkpoint.
    Train(TrainArgs),
    /// Assign class-balanced labels to a score matrix.
    AssignLabels {
        /// N rows × k columns of class scores, header f0..f{k-1}.
        #[arg(long)]
        scores: PathBuf,
        /// k class priors, comma or newline separated; an optional header row is skipped.
        #[arg(long)]
        priors: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Proxy distance between two feature sets, optionally with the bound terms.
    Divergence(DivergenceArgs),
    /// Run an experiment grid from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replaces the config's out_dir (TDANN_OUT_DIR still takes precedence).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Summarize results per fraction and method.
    Compare {
        /// Results CSV or an output directory.
        #[arg(long)]
        results: PathBuf,
        /// Also write the summary as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a plot-ready series of one metric against fraction.
    Plot {
        /// Results CSV or an output directory.
        #[arg(long)]
        results: PathBuf,
        /// One of acc_target_test, acc_source_dev, dhat, wall_time_sec.
        #[arg(long, default_value = "acc_target_test")]
        metric: String,
        #[arg(long)]
        out: PathBuf,
        /// Also render an SVG line chart.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// source_only, target_only, dann or transdann.
    #[arg(long, default_value = "dann")]
    method: String,
    /// Labeled source CSV.
    #[arg(long)]
    source: PathBuf,
    /// Unlabeled target CSV (a label column is ignored).
    #[arg(long)]
    target: Option<PathBuf>,
    /// Labeled target validation CSV.
    #[arg(long)]
    target_val: Option<PathBuf>,
    /// Labeled CSV to report accuracy on.
    #[arg(long)]
    test: Option<PathBuf>,
    /// TrainConfig JSON; defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// NetSpec JSON; the small default architecture otherwise.
    #[arg(long)]
    net: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Cycle trace JSON output path.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct DivergenceArgs {
    #[arg(long)]
    features_a: PathBuf,
    #[arg(long)]
    features_b: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// VC-dimension proxy; enables the bound report.
    #[arg(long)]
    d_vc: Option<f64>,
    /// Sample count per domain; defaults to the smaller feature set.
    #[arg(long)]
    m: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    /// Source error of the hypothesis being bounded.
    #[arg(long, default_value_t = 0.0)]
    eps_source: f64,
    /// Omitted from the bound (and flagged) when absent.
    #[arg(long)]
    lambda_ideal: Option<f64>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn generate_data(spec: &Path, out_dir: &Path) -> Result<()> {
    let spec: ShiftSpec = read_json(spec)?;
    let d = generate_shifted(&spec)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_labeled_csv(&out_dir.join("source.csv"), &d.source)?;
    write_unlabeled_csv(&out_dir.join("target.csv"), &d.target)?;
    write_labeled_csv(&out_dir.join("target_val.csv"), &d.target_val)?;
    write_labeled_csv(&out_dir.join("target_test.csv"), &d.target_test)?;
    println!(
        "{}",
        json!({
            "source": d.source.len(),
            "target": d.target.len(),
            "target_val": d.target_val.len(),
            "target_test": d.target_test.len(),
            "out_dir": out_dir,
        })
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let method: Method = a.method.parse()?;
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.steps {
        cfg.steps_per_cycle = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let source = read_labeled_csv(&a.source)?;
    let target_val = a.target_val.as_deref().map(read_labeled_csv).transpose()?;
    let dim = source.dim().context("source CSV has no rows")?;
    let net: NetSpec = match &a.net {
        Some(p) => read_json(p)?,
        None => NetSpec::desk(dim, source.num_classes),
    };
    let target = || -> Result<_> {
        let path = a.target.as_deref().context("--target is required for adversarial methods")?;
        Ok(read_unlabeled_csv(path)?)
    };
    let mut report = json!({ "method": method });
    let (model, trace) = match method {
        Method::SourceOnly => (train_supervised(&source, &net, &cfg)?, None),
        Method::TargetOnly => {
            let val = target_val.as_ref().context("--target-val is required for target_only")?;
            (train_supervised(val, &net, &cfg)?, None)
        }
        Method::Dann | Method::Transdann => {
            let mut data = DomainData::new(source, target()?);
            if let Some(val) = target_val {
                data = data.with_target_val(val);
            }
            if method == Method::Dann {
                let (m, t) = train_dann(&data, &net, &cfg)?;
                (m, Some(t))
            } else {
                let out = train_transdann(&data, &net, &cfg)?;
                report["gate"] = serde_json::to_value(&out.trace.gate)?;
                (out.model, Some(out.trace))
            }
        }
    };
    model.save(&a.out)?;
    if let (Some(path), Some(trace)) = (&a.trace, &trace) {
        fs::write(path, serde_json::to_vec_pretty(trace)?).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(test) = &a.test {
        report["acc_test"] = json!(evaluate(&model, &read_labeled_csv(test)?)?);
    }
    report["checkpoint"] = json!(a.out);
    println!("{report}");
    Ok(())
}

/// All numeric fields of a priors file, skipping one leading header row.
fn read_priors(path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut values = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let parsed: Result<Vec<f64>, _> = rec.iter().filter(|f| !f.is_empty()).map(str::parse::<f64>).collect();
        match parsed {
            Ok(v) => values.extend(v),
            Err(_) if i == 0 => continue,
            Err(e) => bail!("{}: row {}: {e}", path.display(), i + 1),
        }
    }
    Ok(values)
}

fn assign_labels(scores: &Path, priors: &Path, out: &Path) -> Result<()> {
    let scores = read_unlabeled_csv(scores)?;
    let scores = ScoreMatrix::from_tensor(scores.inputs()?)?;
    let priors = read_priors(priors)?;
    let budget = estimate_class_budget(PriorSource::Priors(&priors), scores.rows())?;
    let labels = assign_interim_labels(&scores, &budget)?;
    let mut text = String::from("label\n");
    for l in &labels {
        text.push_str(&format!("{l}\n"));
    }
    fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    println!("{}", json!({ "budget": budget.0, "rows": labels.len(), "out": out }));
    Ok(())
}

fn divergence(a: &DivergenceArgs) -> Result<()> {
    let fa = read_unlabeled_csv(&a.features_a)?;
    let fb = read_unlabeled_csv(&a.features_b)?;
    let dhat = proxy_distance(fa.inputs()?, fb.inputs()?, a.seed)?;
    let mut report = json!({ "dhat": dhat });
    if let Some(d_vc) = a.d_vc {
        let bound = theorem2_bound(&BoundInputs {
            d_vc,
            m: a.m.unwrap_or(fa.len().min(fb.len()) as f64),
            delta: a.delta,
            dhat,
            eps_source: a.eps_source,
            lambda_ideal: a.lambda_ideal,
        })?;
        report["bound"] = serde_json::to_value(bound)?;
    }
    println!("{report}");
    Ok(())
}

/// Results from a CSV file, or from a directory's JSONL (preferred) or CSV.
fn load_any(path: &Path) -> Result<Vec<RunResult>> {
    if path.is_dir() {
        if path.join(RESULTS_JSONL).exists() {
            return Ok(load_results(path)?);
        }
        return Ok(read_results_csv(&path.join(RESULTS_CSV))?);
    }
    Ok(read_results_csv(path)?)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenerateData { spec, out_dir } => generate_data(&spec, &out_dir),
        Command::Train(a) => train(&a),
        Command::AssignLabels { scores, priors, out } => assign_labels(&scores, &priors, &out),
        Command::Divergence(a) => divergence(&a),
        Command::Run { config, out_dir } => {
            let mut cfg = ExperimentConfig::from_json_file(&config)?;
            if let Some(dir) = out_dir {
                cfg.out_dir = dir;
            }
            let results = run_experiment(&cfg)?;
            let failed = results.iter().filter(|r| !r.is_ok()).count();
            println!(
                "{}",
                json!({
                    "runs": results.len(),
                    "failed": failed,
                    "out_dir": cfg.resolved_out_dir(),
                })
            );
            Ok(())
        }
        Command::Compare { results, out } => {
            let c = compare(&load_any(&results)?);
            print!("{}", c.to_table());
            if let Some(out) = out {
                fs::write(&out, c.to_csv()?).with_context(|| format!("writing {}", out.display()))?;
            }
            Ok(())
        }
        Command::Plot { results, metric, out, svg } => {
            let series = emit_plot_series(&load_any(&results)?, &metric)?;
            fs::write(&out, series.to_csv()?).with_context(|| format!("writing {}", out.display()))?;
            if let Some(svg) = svg {
                fs::write(&svg, series.to_svg()).with_context(|| format!("writing {}", svg.display()))?;
            }
            Ok(())
        }
    }
}

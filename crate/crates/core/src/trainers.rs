//! Saddle-point training: vanilla adversarial training and the transductive
//! cycle loop with interim labels and a final validation gate.
//!
//! Every mini-batch is half source, half target. Each side draws from its own
//! seeded epoch sampler (a fresh shuffle per pass), so the source batch
//! sequence does not depend on whether target batches are drawn.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::assigner::{self, argmax, PriorSource, ScoreMatrix};
use crate::data::{LabeledSet, UnlabeledSet};
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::losses::{self, cross_entropy, Batch, LossWeights};
use crate::nets::{init_params, ModelParams, NetSpec, Sgd};
use crate::rng::{self, derive_seed};

/// Initial unlabeled-term weight of the first transductive cycle.
pub const C_U_START: f64 = 1e-3;

/// Steepness of the adaptation-weight ramp.
const RAMP_GAMMA: f64 = 10.0;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub steps_per_cycle: usize,
    pub lambda_adapt_max: f64,
    pub c_label_star: f64,
    pub c_unlabeled_star: f64,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub lambda_ramp: bool,
    /// Stop cycling once a cycle leaves every interim label unchanged.
    pub early_stop: bool,
    /// Known target class priors; source label frequencies are used otherwise.
    pub class_priors: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            batch_size: 64,
            steps_per_cycle: 2000,
            lambda_adapt_max: 1.0,
            c_label_star: 1.0,
            c_unlabeled_star: 1.0,
            seed: 0,
            lambda_ramp: true,
            early_stop: false,
            class_priors: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = [
            ("lambda_adapt_max", self.lambda_adapt_max),
            ("c_label_star", self.c_label_star),
            ("c_unlabeled_star", self.c_unlabeled_star),
        ];
        for (name, v) in finite_nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::contract(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::contract(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::contract(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size < 2 {
            return Err(Error::contract("batch_size must be >= 2 (half source, half target)"));
        }
        Ok(())
    }

    fn half_batch(&self) -> usize {
        self.batch_size / 2
    }
}

/// Training inputs: labeled source, unlabeled target and optional diagnostics sets.
#[derive(Debug, Clone)]
pub struct DomainData {
    pub source: LabeledSet,
    pub target: UnlabeledSet,
    /// Labeled target validation set; may be empty.
    pub target_val: LabeledSet,
    /// Held-out source set for unsupervised model assessment; may be empty.
    pub source_dev: LabeledSet,
}

impl DomainData {
    pub fn new(source: LabeledSet, target: UnlabeledSet) -> Self {
        let k = source.num_classes;
        Self {
            source,
            target,
            target_val: LabeledSet::empty(k),
            source_dev: LabeledSet::empty(k),
        }
    }

    pub fn with_target_val(mut self, val: LabeledSet) -> Self {
        self.target_val = val;
        self
    }

    pub fn with_source_dev(mut self, dev: LabeledSet) -> Self {
        self.source_dev = dev;
        self
    }
}

/// One training cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub c_u: f64,
    pub labels_changed: usize,
    pub loss_task_src: f64,
    pub loss_task_tgt: f64,
    pub loss_domain: f64,
    pub acc_src_dev: Option<f64>,
    pub acc_val: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateChoice {
    Cold,
    Final,
    /// No validation set; the final model is returned.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub chosen: GateChoice,
    pub acc_cold: Option<f64>,
    pub acc_final: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleTrace {
    pub cycles: Vec<CycleRecord>,
    pub gate: Option<GateRecord>,
}

impl CycleTrace {
    /// `C_u` of every transductive cycle (the cold start is excluded).
    pub fn c_u_sequence(&self) -> Vec<f64> {
        self.cycles.iter().skip(1).map(|c| c.c_u).collect()
    }
}

/// Result of [`train_transdann`].
#[derive(Debug, Clone)]
pub struct TransDannOutcome {
    /// Model selected by the validation gate.
    pub model: ModelParams,
    pub cold: ModelParams,
    pub last: ModelParams,
    pub trace: CycleTrace,
}

/// `λ(p) = λ_max · (2 / (1 + e^{−10p}) − 1)`.
pub fn lambda_schedule(progress: f64, lambda_adapt_max: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    lambda_adapt_max * (2.0 / (1.0 + (-RAMP_GAMMA * p).exp()) - 1.0)
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn evaluate(params: &ModelParams, set: &LabeledSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty set"));
    }
    let probs = params.predict_proba(set.inputs()?)?;
    let correct = set
        .y
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(probs.row(i)) == y)
        .count();
    Ok(correct as f64 / set.len() as f64)
}

fn optional_eval(params: &ModelParams, set: &LabeledSet) -> Result<Option<f64>> {
    if set.is_empty() {
        Ok(None)
    } else {
        evaluate(params, set).map(Some)
    }
}

/// Endless stream of indices, reshuffled at every pass.
pub(crate) struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: rng::Rng,
}

impl EpochSampler {
    pub(crate) fn new(n: usize, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    pub(crate) fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

const SOURCE_STREAM: u64 = 100;
const TARGET_STREAM: u64 = 200;

#[derive(Default)]
struct LossMeans {
    task_src: f64,
    task_tgt: f64,
    domain: f64,
    steps: usize,
}

impl LossMeans {
    fn push(&mut self, out: &losses::LossOutput) {
        self.task_src += out.task_source;
        self.task_tgt += out.task_target;
        self.domain += out.domain();
        self.steps += 1;
    }

    fn finish(&self) -> (f64, f64, f64) {
        let n = self.steps.max(1) as f64;
        (self.task_src / n, self.task_tgt / n, self.domain / n)
    }
}

/// One cycle of adversarial SGD steps. `interim` switches on the target task
/// term; `lambda_at(step)` gives the adaptation weight.
fn adversarial_cycle(
    params: &mut ModelParams,
    data: &DomainData,
    cfg: &TrainConfig,
    cycle: u64,
    c_unlabeled: f64,
    interim: Option<&[usize]>,
    lambda_at: impl Fn(usize) -> f64,
) -> Result<LossMeans> {
    let xs = data.source.inputs()?;
    let xt = data.target.inputs()?;
    let half = cfg.half_batch();
    let mut src = EpochSampler::new(data.source.len(), derive_seed(cfg.seed, SOURCE_STREAM + cycle));
    let mut tgt = EpochSampler::new(data.target.len(), derive_seed(cfg.seed, TARGET_STREAM + cycle));
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut tape = Tape::new();
    let mut means = LossMeans::default();
    for step in 0..cfg.steps_per_cycle {
        let si = src.take(half);
        let ti = tgt.take(half);
        let sb = Batch::labeled(
            xs.select_rows(&si)?,
            si.iter().map(|&i| data.source.y[i]).collect(),
        );
        let tb = Batch {
            x: xt.select_rows(&ti)?,
            labels: interim.map(|l| ti.iter().map(|&i| l[i]).collect()),
        };
        let weights = LossWeights {
            lambda_adapt: lambda_at(step),
            c_label: cfg.c_label_star,
            c_unlabeled,
        };
        tape.reset();
        let bound = params.bind(&mut tape);
        let out = losses::adversarial_loss(&mut tape, &bound, &sb, &tb, &weights, interim.is_some())?;
        tape.backward(out.objective)?;
        params.accumulate_grads(&tape, &bound);
        opt.step(params)?;
        means.push(&out);
    }
    Ok(means)
}

fn check_data(data: &DomainData, spec: &NetSpec) -> Result<()> {
    if data.source.is_empty() {
        return Err(Error::contract("source set is empty"));
    }
    if data.target.is_empty() {
        return Err(Error::contract("target set is empty"));
    }
    for (name, x) in [("source", data.source.inputs()?), ("target", data.target.inputs()?)] {
        if x.shape()[1] != spec.input_dim {
            return Err(Error::contract(format!(
                "{name} width {} does not match network input {}",
                x.shape()[1],
                spec.input_dim
            )));
        }
    }
    Ok(())
}

fn cycle_record(
    params: &ModelParams,
    data: &DomainData,
    cycle: usize,
    c_u: f64,
    labels_changed: usize,
    means: &LossMeans,
) -> Result<CycleRecord> {
    let (loss_task_src, loss_task_tgt, loss_domain) = means.finish();
    Ok(CycleRecord {
        cycle,
        c_u,
        labels_changed,
        loss_task_src,
        loss_task_tgt,
        loss_domain,
        acc_src_dev: optional_eval(params, &data.source_dev)?,
        acc_val: optional_eval(params, &data.target_val)?,
    })
}

/// Adversarial training from a fresh initialization: `steps_per_cycle` steps
/// with the adaptation weight ramped (or held at `lambda_adapt_max`). The
/// source task term is weighted by `c_label_star`; this is also the cold
/// start of [`train_transdann`].
pub fn train_dann(
    data: &DomainData,
    spec: &NetSpec,
    cfg: &TrainConfig,
) -> Result<(ModelParams, CycleTrace)> {
    cfg.validate()?;
    check_data(data, spec)?;
    let mut params = init_params(spec, derive_seed(cfg.seed, 0))?;
    let steps = cfg.steps_per_cycle;
    let lambda_at = |step: usize| {
        if cfg.lambda_ramp {
            lambda_schedule(step as f64 / steps.max(1) as f64, cfg.lambda_adapt_max)
        } else {
            cfg.lambda_adapt_max
        }
    };
    let means = adversarial_cycle(&mut params, data, cfg, 0, 0.0, None, lambda_at)?;
    let record = cycle_record(&params, data, 0, 0.0, 0, &means)?;
    Ok((
        params,
        CycleTrace {
            cycles: vec![record],
            gate: None,
        },
    ))
}

/// Task-path-only training of `G_y ∘ G_f` on a labeled set, drawing the same
/// batch sequence as the source side of [`train_dann`].
pub fn train_supervised(
    labeled: &LabeledSet,
    spec: &NetSpec,
    cfg: &TrainConfig,
) -> Result<ModelParams> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::contract("labeled set is empty"));
    }
    let x = labeled.inputs()?;
    let mut params = init_params(spec, derive_seed(cfg.seed, 0))?;
    let mut src = EpochSampler::new(labeled.len(), derive_seed(cfg.seed, SOURCE_STREAM));
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut tape = Tape::new();
    for _ in 0..cfg.steps_per_cycle {
        let idx = src.take(cfg.half_batch());
        let y: Vec<usize> = idx.iter().map(|&i| labeled.y[i]).collect();
        let xb = x.select_rows(&idx)?;
        tape.reset();
        let bound = params.bind(&mut tape);
        let xv = tape.constant(&xb);
        let f = bound.forward_features(&mut tape, xv)?;
        let p = bound.forward_label(&mut tape, f)?;
        let ce = cross_entropy(&mut tape, p, &y)?;
        let objective = tape.scale(ce, cfg.c_label_star);
        tape.backward(objective)?;
        params.accumulate_grads(&tape, &bound);
        opt.step(&mut params)?;
    }
    Ok(params)
}

/// Class budget for the target pool.
fn target_budget(data: &DomainData, cfg: &TrainConfig) -> Result<assigner::ClassBudget> {
    let source = match cfg.class_priors.as_deref() {
        Some(p) => PriorSource::Priors(p),
        None => PriorSource::Labels {
            labels: &data.source.y,
            classes: data.source.num_classes,
        },
    };
    assigner::estimate_class_budget(source, data.target.len())
}

fn target_scores(params: &ModelParams, target: &Tensor) -> Result<ScoreMatrix> {
    ScoreMatrix::from_tensor(&params.predict_proba(target)?)
}

/// Transductive training.
///
/// 1. Cold start: [`train_dann`].
/// 2. Starting at `C_u = 10⁻³`: assign balanced interim labels from the
///    current model, warm-start one cycle on the transductive loss with those
///    labels fixed (fresh momentum), then `C_u ← min(2·C_u, C_u*)`. The loop
///    ends after the first cycle run at `C_u = C_u*`.
/// 3. If a target validation set is present, return whichever of the cold and
///    final models scores higher on it (ties keep the final model).
pub fn train_transdann(
    data: &DomainData,
    spec: &NetSpec,
    cfg: &TrainConfig,
) -> Result<TransDannOutcome> {
    let (cold, mut trace) = train_dann(data, spec, cfg)?;
    let mut params = cold.clone();
    if cfg.c_unlabeled_star > 0.0 {
        let budget = target_budget(data, cfg)?;
        let xt = data.target.inputs()?;
        let mut previous = target_scores(&params, xt)?.argmax_labels();
        let mut c_u = C_U_START.min(cfg.c_unlabeled_star);
        for cycle in 1usize.. {
            let labels = assigner::assign_interim_labels(&target_scores(&params, xt)?, &budget)?;
            let changed = labels.iter().zip(&previous).filter(|(a, b)| a != b).count();
            if cfg.early_stop && cycle > 1 && changed == 0 {
                break;
            }
            let means = adversarial_cycle(
                &mut params,
                data,
                cfg,
                cycle as u64,
                c_u,
                Some(&labels),
                |_| cfg.lambda_adapt_max,
            )?;
            trace
                .cycles
                .push(cycle_record(&params, data, cycle, c_u, changed, &means)?);
            previous = labels;
            if c_u >= cfg.c_unlabeled_star {
                break;
            }
            c_u = (2.0 * c_u).min(cfg.c_unlabeled_star);
        }
    }

    let gate = if data.target_val.is_empty() {
        GateRecord {
            chosen: GateChoice::Skipped,
            acc_cold: None,
            acc_final: None,
        }
    } else {
        let acc_cold = evaluate(&cold, &data.target_val)?;
        let acc_final = evaluate(&params, &data.target_val)?;
        GateRecord {
            chosen: if acc_final >= acc_cold {
                GateChoice::Final
            } else {
                GateChoice::Cold
            },
            acc_cold: Some(acc_cold),
            acc_final: Some(acc_final),
        }
    };
    let model = match gate.chosen {
        GateChoice::Cold => cold.clone(),
        GateChoice::Final | GateChoice::Skipped => params.clone(),
    };
    trace.gate = Some(gate);
    Ok(TransDannOutcome {
        model,
        cold,
        last: params,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_shifted, ShiftSpec};

    #[test]
    fn ramp_endpoints_and_monotonicity() {
        assert_eq!(lambda_schedule(0.0, 1.0), 0.0);
        // 2/(1+e^-10) − 1 = tanh(5)
        assert!((lambda_schedule(1.0, 1.0) - 5.0f64.tanh()).abs() < 1e-15);
        assert!((lambda_schedule(1.0, 1.0) - 0.999_909_2).abs() < 1e-7);
        let grid: Vec<f64> = (0..100).map(|i| lambda_schedule(i as f64 / 99.0, 0.7)).collect();
        assert!(grid.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = EpochSampler::new(5, 3);
        let mut first = s.take(5);
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.take(12).len(), 12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn small() -> (DomainData, NetSpec) {
        let mut spec = ShiftSpec::two_moons(30.0, 8);
        spec.n_source = 40;
        spec.n_target = 40;
        spec.n_val = 20;
        spec.n_test = 0;
        let d = generate_shifted(&spec).unwrap();
        let data = DomainData::new(d.source, d.target).with_target_val(d.target_val);
        let net = NetSpec {
            input_dim: 2,
            feature_hidden: vec![],
            feature_dim: 4,
            label_hidden: vec![],
            domain_hidden: vec![4],
            num_classes: 2,
        };
        (data, net)
    }

    #[test]
    fn zero_steps_returns_initial_params() {
        let (data, net) = small();
        let cfg = TrainConfig {
            steps_per_cycle: 0,
            seed: 5,
            ..TrainConfig::default()
        };
        let (p, trace) = train_dann(&data, &net, &cfg).unwrap();
        assert_eq!(p, init_params(&net, derive_seed(5, 0)).unwrap());
        assert_eq!(trace.cycles.len(), 1);
    }

    #[test]
    fn empty_data_is_rejected() {
        let (mut data, net) = small();
        data.target = UnlabeledSet::empty();
        assert!(train_dann(&data, &net, &TrainConfig::default()).is_err());
        let (mut data, net) = small();
        data.source = LabeledSet::empty(2);
        assert!(train_dann(&data, &net, &TrainConfig::default()).is_err());
    }

    #[test]
    fn zero_unlabeled_weight_returns_cold_start() {
        let (data, net) = small();
        let cfg = TrainConfig {
            steps_per_cycle: 30,
            c_unlabeled_star: 0.0,
            ..TrainConfig::default()
        };
        let out = train_transdann(&data, &net, &cfg).unwrap();
        let (dann, _) = train_dann(&data, &net, &cfg).unwrap();
        assert_eq!(out.model, dann);
        assert_eq!(out.trace.cycles.len(), 1);
    }

    #[test]
    fn c_u_doubles_up_to_cap() {
        let (data, net) = small();
        let cfg = TrainConfig {
            steps_per_cycle: 5,
            c_unlabeled_star: 0.01,
            ..TrainConfig::default()
        };
        let out = train_transdann(&data, &net, &cfg).unwrap();
        assert_eq!(out.trace.c_u_sequence(), vec![0.001, 0.002, 0.004, 0.008, 0.01]);
    }

    #[test]
    fn evaluate_counts_argmax_hits() {
        let (data, net) = small();
        let p = init_params(&net, 1).unwrap();
        let acc = evaluate(&p, &data.target_val).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(evaluate(&p, &LabeledSet::empty(2)).is_err());
    }
}

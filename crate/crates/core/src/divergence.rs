//! Empirical domain divergence and the generalization bound that uses it.
//!
//! The supremum over the symmetric-difference hypothesis class is
//! approximated by a small domain classifier of fixed capacity and budget:
//! its held-out error `ε` gives the proxy distance `d̂ = 2(1 − 2ε)`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::nets::{init_params, ModelParams, NetSpec, Sgd};
use crate::rng::{self, derive_seed};
use crate::trainers::{evaluate, EpochSampler};

/// Minimum examples per domain for a train/held-out split.
pub const MIN_PER_DOMAIN: usize = 4;

/// Capacity and budget of the probe classifier. Pinned so distances are
/// comparable across feature spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            steps: 2000,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
        }
    }
}

/// `2(1 − 2ε)` clamped to `[0, 2]`.
pub fn dhat_from_error(eps_domain: f64) -> f64 {
    (2.0 * (1.0 - 2.0 * eps_domain)).clamp(0.0, 2.0)
}

/// Proxy distance with the default probe.
pub fn proxy_distance(features_a: &Tensor, features_b: &Tensor, seed: u64) -> Result<f64> {
    proxy_distance_with(features_a, features_b, seed, &ProbeConfig::default())
}

/// Splits each domain 50/50, trains a fresh probe on the standardized train
/// halves and converts its class-balanced held-out error into `d̂`.
pub fn proxy_distance_with(
    features_a: &Tensor,
    features_b: &Tensor,
    seed: u64,
    probe: &ProbeConfig,
) -> Result<f64> {
    let (na, da) = features_a.dims2()?;
    let (nb, db) = features_b.dims2()?;
    if da != db {
        return Err(Error::Dimension {
            op: "proxy_distance",
            left: features_a.shape().to_vec(),
            right: features_b.shape().to_vec(),
        });
    }
    if na < MIN_PER_DOMAIN || nb < MIN_PER_DOMAIN {
        return Err(Error::contract(format!(
            "proxy_distance needs at least {MIN_PER_DOMAIN} examples per domain, got {na} and {nb}"
        )));
    }
    let halves = |x: &Tensor, stream: u64| -> Result<(Tensor, Tensor)> {
        let n = x.shape()[0];
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::seeded(derive_seed(seed, stream)));
        let (train, held) = order.split_at(n / 2);
        Ok((x.select_rows(train)?, x.select_rows(held)?))
    };
    let (a_train, a_held) = halves(features_a, 1)?;
    let (b_train, b_held) = halves(features_b, 2)?;

    let train = stack(&a_train, &b_train)?;
    let (mean, scale) = standardizer(&train);
    let mut labels = vec![0; a_train.shape()[0]];
    labels.resize(train.shape()[0], 1);
    let set = LabeledSet::new(standardize(&train, &mean, &scale), labels, 2)?;
    let model = fit_probe(&set, probe, derive_seed(seed, 3))?;

    let err = |held: &Tensor, domain: usize| -> Result<f64> {
        let n = held.shape()[0];
        let held = LabeledSet::new(standardize(held, &mean, &scale), vec![domain; n], 2)?;
        Ok(1.0 - evaluate(&model, &held)?)
    };
    let eps = 0.5 * (err(&a_held, 0)? + err(&b_held, 1)?);
    Ok(dhat_from_error(eps))
}

fn stack(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(vec![a.shape()[0] + b.shape()[0], a.shape()[1]], data)
}

/// Per-column mean and inverse standard deviation (1 for constant columns).
fn standardizer(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v / n as f64;
        }
    }
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m).powi(2) / n as f64;
        }
    }
    let scale = var
        .iter()
        .map(|&v| if v > 1e-24 { 1.0 / v.sqrt() } else { 1.0 })
        .collect();
    (mean, scale)
}

fn standardize(x: &Tensor, mean: &[f64], scale: &[f64]) -> Tensor {
    let d = mean.len();
    let mut out = x.clone();
    for (j, v) in out.data_mut().iter_mut().enumerate() {
        *v = (*v - mean[j % d]) * scale[j % d];
    }
    out
}

/// One-hidden-layer tanh classifier trained with minibatch SGD.
fn fit_probe(set: &LabeledSet, probe: &ProbeConfig, seed: u64) -> Result<ModelParams> {
    let x = set.inputs()?;
    let spec = NetSpec {
        input_dim: x.shape()[1],
        feature_hidden: Vec::new(),
        feature_dim: probe.hidden,
        label_hidden: Vec::new(),
        domain_hidden: vec![1],
        num_classes: set.num_classes,
    };
    let mut params = init_params(&spec, derive_seed(seed, 0))?;
    let mut sampler = EpochSampler::new(set.len(), derive_seed(seed, 1));
    let mut opt = Sgd::new(probe.lr, probe.momentum);
    let mut tape = Tape::new();
    for _ in 0..probe.steps {
        let idx = sampler.take(probe.batch_size.min(set.len()));
        let y: Vec<usize> = idx.iter().map(|&i| set.y[i]).collect();
        tape.reset();
        let bound = params.bind(&mut tape);
        let xv = tape.constant(&x.select_rows(&idx)?);
        let f = bound.forward_features(&mut tape, xv)?;
        let p = bound.forward_label(&mut tape, f)?;
        let loss = cross_entropy(&mut tape, p, &y)?;
        tape.backward(loss)?;
        params.accumulate_grads(&tape, &bound);
        opt.step(&mut params)?;
    }
    Ok(params)
}

/// Ideal joint risk `min_h ε_s(h) + ε_t(h)`, estimated by fitting one probe
/// to the union of both labeled sets and summing its per-domain errors.
/// Needs target labels, so it is a diagnostic only.
pub fn estimate_lambda_ideal(
    source: &LabeledSet,
    target: &LabeledSet,
    seed: u64,
    probe: &ProbeConfig,
) -> Result<f64> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::contract("lambda_ideal needs nonempty labeled source and target sets"));
    }
    let k = source.num_classes.max(target.num_classes);
    let joined = LabeledSet::new(
        stack(source.inputs()?, target.inputs()?)?,
        source.y.iter().chain(&target.y).copied().collect(),
        k,
    )?;
    let (mean, scale) = standardizer(joined.inputs()?);
    let norm = |s: &LabeledSet| -> Result<LabeledSet> {
        LabeledSet::new(standardize(s.inputs()?, &mean, &scale), s.y.clone(), k)
    };
    let model = fit_probe(&norm(&joined)?, probe, seed)?;
    Ok((1.0 - evaluate(&model, &norm(source)?)?) + (1.0 - evaluate(&model, &norm(target)?)?))
}

/// Inputs of the target-error bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// VC-dimension proxy of the hypothesis class.
    pub d_vc: f64,
    /// Unlabeled sample count per domain.
    pub m: f64,
    pub delta: f64,
    pub dhat: f64,
    pub eps_source: f64,
    /// `None` when unknown; the term is then omitted.
    pub lambda_ideal: Option<f64>,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::contract(format!("bound input out of range: {what}")))
            }
        };
        check(self.d_vc.is_finite() && self.d_vc > 0.0, "d_vc > 0")?;
        check(self.m.is_finite() && self.m >= 1.0, "m >= 1")?;
        check(self.delta > 0.0 && self.delta < 1.0, "delta in (0, 1)")?;
        check((0.0..=2.0).contains(&self.dhat), "dhat in [0, 2]")?;
        check((0.0..=1.0).contains(&self.eps_source), "eps_source in [0, 1]")?;
        check(
            self.lambda_ideal.is_none_or(|l| l.is_finite() && l >= 0.0),
            "lambda_ideal >= 0",
        )
    }
}

/// Term-by-term bound on the target error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub eps_source: f64,
    /// `d̂ / 2`.
    pub divergence_term: f64,
    /// `sqrt((d·ln(2m) + ln(2/δ)) / (m/16))`.
    pub complexity_term: f64,
    pub lambda_ideal: Option<f64>,
    /// Set when `lambda_ideal` was unknown and left out of `bound`.
    pub lambda_ideal_omitted: bool,
    pub bound: f64,
}

/// `ε_s + d̂/2 + sqrt((d·ln(2m) + ln(2/δ)) / (m/16)) + λ_ideal`.
pub fn theorem2_bound(b: &BoundInputs) -> Result<BoundReport> {
    b.validate()?;
    let complexity_term = ((b.d_vc * (2.0 * b.m).ln() + (2.0 / b.delta).ln()) / (b.m / 16.0)).sqrt();
    let divergence_term = b.dhat / 2.0;
    Ok(BoundReport {
        eps_source: b.eps_source,
        divergence_term,
        complexity_term,
        lambda_ideal: b.lambda_ideal,
        lambda_ideal_omitted: b.lambda_ideal.is_none(),
        bound: b.eps_source + divergence_term + complexity_term + b.lambda_ideal.unwrap_or(0.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs() -> BoundInputs {
        BoundInputs {
            d_vc: 10.0,
            m: 1600.0,
            delta: 0.05,
            dhat: 0.0,
            eps_source: 0.0,
            lambda_ideal: Some(0.0),
        }
    }

    #[test]
    fn dhat_linear_formula() {
        assert_eq!(dhat_from_error(0.5), 0.0);
        assert_eq!(dhat_from_error(0.0), 2.0);
        assert_eq!(dhat_from_error(0.25), 1.0);
        assert_eq!(dhat_from_error(0.7), 0.0);
    }

    #[test]
    fn complexity_term_reference_value() {
        let r = theorem2_bound(&inputs()).unwrap();
        // sqrt((10·ln 3200 + ln 40) / 100)
        assert!((r.complexity_term - 0.918_683_516_5).abs() < 1e-9, "{}", r.complexity_term);
        assert_eq!(r.bound, r.complexity_term);
    }

    #[test]
    fn huge_sample_reduces_to_source_error() {
        let r = theorem2_bound(&BoundInputs {
            m: 1e12,
            eps_source: 0.1,
            ..inputs()
        })
        .unwrap();
        assert!((r.bound - 0.1).abs() < 1e-3, "{}", r.bound);
    }

    #[test]
    fn unknown_lambda_is_flagged() {
        let r = theorem2_bound(&BoundInputs {
            lambda_ideal: None,
            ..inputs()
        })
        .unwrap();
        assert!(r.lambda_ideal_omitted);
        assert!(!theorem2_bound(&inputs()).unwrap().lambda_ideal_omitted);
    }

    #[test]
    fn out_of_range_inputs_rejected() {
        for b in [
            BoundInputs { delta: 1.0, ..inputs() },
            BoundInputs { dhat: 2.5, ..inputs() },
            BoundInputs { d_vc: 0.0, ..inputs() },
            BoundInputs { lambda_ideal: Some(-0.1), ..inputs() },
        ] {
            assert!(theorem2_bound(&b).is_err(), "{b:?}");
        }
    }

    #[test]
    fn too_few_examples_rejected() {
        let x = Tensor::zeros(vec![3, 2]).unwrap();
        let y = Tensor::zeros(vec![10, 2]).unwrap();
        assert!(proxy_distance(&x, &y, 0).is_err());
        assert!(proxy_distance(&y, &Tensor::zeros(vec![10, 3]).unwrap(), 0).is_err());
    }

    #[test]
    fn proxy_distance_is_seeded() {
        let a = Tensor::new(vec![8, 1], (0..8).map(f64::from).collect()).unwrap();
        let b = Tensor::new(vec![8, 1], (0..8).map(|i| f64::from(i) + 20.0).collect()).unwrap();
        let d1 = proxy_distance(&a, &b, 3).unwrap();
        assert_eq!(d1, proxy_distance(&a, &b, 3).unwrap());
        assert!((0.0..=2.0).contains(&d1));
    }
}

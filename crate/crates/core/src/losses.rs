//! Cross-entropy and the two adversarial objectives.
//!
//! Both objectives share one computation. For a labeled source batch and a
//! target batch:
//!
//! ```text
//! value = C_ℓ·CE_y(src) + C_u·CE_y(tgt, ŷ) − λ·[CE_d(src, 0) + CE_d(tgt, 1)]
//! ```
//!
//! The saddle point minimizes `value` over `θ_f, θ_y` and maximizes it over
//! `θ_d`. The differentiable `objective` handed to the tape is
//! `C_ℓ·CE_y + C_u·CE_y + λ·CE_d` with the domain head fed through a unit
//! gradient reversal: `θ_d` descends `λ·CE_d` (ascends `value`) while `θ_f`
//! receives `−λ·∂CE_d/∂θ_f`, i.e. it descends `value`.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::BoundModel;

/// Probabilities are clamped into `[PROB_FLOOR, 1 − PROB_FLOOR]` before `ln`.
pub const PROB_FLOOR: f64 = 1e-12;

pub const SOURCE_DOMAIN: usize = 0;
pub const TARGET_DOMAIN: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_adapt: f64,
    pub c_label: f64,
    pub c_unlabeled: f64,
}

impl LossWeights {
    pub fn dann(lambda_adapt: f64) -> Self {
        Self {
            lambda_adapt,
            c_label: 1.0,
            c_unlabeled: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_adapt", self.lambda_adapt),
            ("c_label", self.c_label),
            ("c_unlabeled", self.c_unlabeled),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::contract(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Input rows with optional class labels (true labels for source, interim
/// labels for target).
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn labeled(x: Tensor, labels: Vec<usize>) -> Self {
        Self {
            x,
            labels: Some(labels),
        }
    }

    pub fn unlabeled(x: Tensor) -> Self {
        Self { x, labels: None }
    }

    fn rows(&self) -> Result<usize> {
        Ok(self.x.dims2()?.0)
    }
}

/// Differentiable objective plus the individual terms it was built from.
#[derive(Debug, Clone, Copy)]
pub struct LossOutput {
    /// Scalar to call `backward` on.
    pub objective: Var,
    /// Loss value as written in the saddle-point objective (domain terms negated).
    pub value: f64,
    pub task_source: f64,
    pub task_target: f64,
    pub domain_source: f64,
    pub domain_target: f64,
}

impl LossOutput {
    pub fn domain(&self) -> f64 {
        self.domain_source + self.domain_target
    }
}

/// Mean over the batch of `−ln p[i, y_i]`, with clamping.
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let picked = tape.pick(probs, labels)?;
    let logp = tape.log_clamped(picked, PROB_FLOOR, 1.0 - PROB_FLOOR);
    let mean = tape.mean(logp);
    Ok(tape.scale(mean, -1.0))
}

/// Unweighted adversarial objective over a labeled source and an unlabeled target batch.
pub fn dann_loss(
    tape: &mut Tape,
    model: &BoundModel,
    source: &Batch,
    target: &Batch,
    weights: &LossWeights,
) -> Result<LossOutput> {
    let w = LossWeights {
        c_label: 1.0,
        c_unlabeled: 0.0,
        ..*weights
    };
    adversarial_loss(tape, model, source, target, &w, false)
}

/// Transductive objective; every target row must carry an interim label.
pub fn transdann_loss(
    tape: &mut Tape,
    model: &BoundModel,
    source: &Batch,
    target: &Batch,
    weights: &LossWeights,
) -> Result<LossOutput> {
    adversarial_loss(tape, model, source, target, weights, true)
}

/// Shared body of [`dann_loss`] and [`transdann_loss`]. With
/// `use_target_labels == false` the target task term is skipped entirely.
pub(crate) fn adversarial_loss(
    tape: &mut Tape,
    model: &BoundModel,
    source: &Batch,
    target: &Batch,
    w: &LossWeights,
    use_target_labels: bool,
) -> Result<LossOutput> {
    w.validate()?;
    let (ns, nt) = (source.rows()?, target.rows()?);
    let source_labels = source
        .labels
        .as_deref()
        .ok_or_else(|| Error::contract("source batch must be labeled"))?;
    let target_labels = if use_target_labels {
        let l = target
            .labels
            .as_deref()
            .ok_or_else(|| Error::contract("target batch is missing interim labels"))?;
        if l.len() != nt {
            return Err(Error::contract(format!(
                "{nt} target rows but {} interim labels",
                l.len()
            )));
        }
        Some(l)
    } else {
        None
    };
    if ns == 0 || nt == 0 {
        return Err(Error::contract("empty batch"));
    }

    let xs = tape.constant(&source.x);
    let xt = tape.constant(&target.x);
    let fs = model.forward_features(tape, xs)?;
    let ft = model.forward_features(tape, xt)?;

    let ps = model.forward_label(tape, fs)?;
    let task_s = cross_entropy(tape, ps, source_labels)?;
    let mut objective = tape.scale(task_s, w.c_label);

    let mut task_target = 0.0;
    if let Some(labels) = target_labels {
        let pt = model.forward_label(tape, ft)?;
        let task_t = cross_entropy(tape, pt, labels)?;
        task_target = tape.scalar(task_t);
        let weighted = tape.scale(task_t, w.c_unlabeled);
        objective = tape.add(objective, weighted)?;
    }

    let ds = model.forward_domain(tape, fs, 1.0)?;
    let dt = model.forward_domain(tape, ft, 1.0)?;
    let dom_s = cross_entropy(tape, ds, &vec![SOURCE_DOMAIN; ns])?;
    let dom_t = cross_entropy(tape, dt, &vec![TARGET_DOMAIN; nt])?;
    let dom = tape.add(dom_s, dom_t)?;
    let dom_weighted = tape.scale(dom, w.lambda_adapt);
    let objective = tape.add(objective, dom_weighted)?;

    let task_source = tape.scalar(task_s);
    let (domain_source, domain_target) = (tape.scalar(dom_s), tape.scalar(dom_t));
    let value = w.c_label * task_source + w.c_unlabeled * task_target
        - w.lambda_adapt * (domain_source + domain_target);
    Ok(LossOutput {
        objective,
        value,
        task_source,
        task_target,
        domain_source,
        domain_target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{init_params, NetSpec};

    fn ce_of(rows: &[[f64; 2]], labels: &[usize]) -> f64 {
        let mut tape = Tape::new();
        let p = tape.constant(&Tensor::from_rows(rows).unwrap());
        let l = cross_entropy(&mut tape, p, labels).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn cross_entropy_analytic_values() {
        assert!((ce_of(&[[0.5, 0.5]], &[1]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((ce_of(&[[0.25, 0.75]], &[1]) - 0.287_682_072_451_780_9).abs() < 1e-12);
        let certain = ce_of(&[[0.0, 1.0]], &[1]);
        assert!((0.0..=1e-11).contains(&certain));
        // clamped, so a confidently wrong prediction is large but finite
        let wrong = ce_of(&[[0.0, 1.0]], &[0]);
        assert!((wrong - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let p = tape.constant(&Tensor::from_rows(&[[0.5, 0.5]]).unwrap());
        assert!(matches!(
            cross_entropy(&mut tape, p, &[2]),
            Err(Error::Contract(_))
        ));
    }

    fn spec() -> NetSpec {
        NetSpec {
            input_dim: 2,
            feature_hidden: vec![3],
            feature_dim: 3,
            label_hidden: vec![],
            domain_hidden: vec![4],
            num_classes: 2,
        }
    }

    fn batches() -> (Batch, Batch) {
        let s = Batch::labeled(
            Tensor::from_rows(&[[0.5, -1.0], [1.5, 0.2]]).unwrap(),
            vec![0, 1],
        );
        let t = Batch::labeled(
            Tensor::from_rows(&[[-0.3, 0.8], [2.0, 1.0]]).unwrap(),
            vec![1, 1],
        );
        (s, t)
    }

    #[test]
    fn missing_labels_and_bad_weights_are_contract_errors() {
        let p = init_params(&spec(), 1).unwrap();
        let (s, t) = batches();
        let mut tape = Tape::new();
        let m = p.bind(&mut tape);
        let unl = Batch::unlabeled(t.x.clone());
        let w = LossWeights {
            lambda_adapt: 0.1,
            c_label: 1.0,
            c_unlabeled: 1.0,
        };
        assert!(transdann_loss(&mut tape, &m, &s, &unl, &w).is_err());
        assert!(dann_loss(&mut tape, &m, &unl, &t, &w).is_err());
        let neg = LossWeights {
            lambda_adapt: -1.0,
            ..w
        };
        assert!(dann_loss(&mut tape, &m, &s, &t, &neg).is_err());
    }

    #[test]
    fn zero_lambda_reduces_to_source_task_loss() {
        let p = init_params(&spec(), 2).unwrap();
        let (s, t) = batches();
        let mut tape = Tape::new();
        let m = p.bind(&mut tape);
        let out = dann_loss(&mut tape, &m, &s, &t, &LossWeights::dann(0.0)).unwrap();
        assert_eq!(out.value, out.task_source);
        assert_eq!(tape.scalar(out.objective), out.task_source);
    }

    #[test]
    fn zero_lambda_gives_zero_domain_gradient() {
        let p = init_params(&spec(), 3).unwrap();
        let (s, t) = batches();
        let mut tape = Tape::new();
        let m = p.bind(&mut tape);
        let out = dann_loss(&mut tape, &m, &s, &t, &LossWeights::dann(0.0)).unwrap();
        tape.backward(out.objective).unwrap();
        for &(w, b) in m.domain_vars() {
            assert!(tape.grad(w).iter().chain(tape.grad(b)).all(|&g| g == 0.0));
        }
    }

    #[test]
    fn transdann_with_only_unlabeled_weight_is_scaled_target_ce() {
        let p = init_params(&spec(), 4).unwrap();
        let (s, t) = batches();
        let mut tape = Tape::new();
        let m = p.bind(&mut tape);
        let w = LossWeights {
            lambda_adapt: 0.0,
            c_label: 0.0,
            c_unlabeled: 2.5,
        };
        let out = transdann_loss(&mut tape, &m, &s, &t, &w).unwrap();
        assert!((out.value - 2.5 * out.task_target).abs() < 1e-15);
    }
}

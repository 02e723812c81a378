//! Loss reductions, linearity and a direct-summation oracle.

mod common;

use common::{direct_loss_value, dann_instance, random_tensor, rng};
use proptest::prelude::*;
use rand::Rng;
use transdann_core::diffcore::Tape;
use transdann_core::losses::{dann_loss, transdann_loss, Batch, LossWeights, PROB_FLOOR};
use transdann_core::nets::{init_params, ModelParams, NetSpec};

fn losses(params: &ModelParams, s: &Batch, t: &Batch, w: &LossWeights, trans: bool) -> (f64, f64) {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = if trans {
        transdann_loss(&mut tape, &bound, s, t, w).unwrap()
    } else {
        dann_loss(&mut tape, &bound, s, t, w).unwrap()
    };
    (tape.scalar(out.objective), out.value)
}

fn random_case(seed: u64) -> (ModelParams, Batch, Batch) {
    let mut r = rng(seed);
    let spec = NetSpec {
        input_dim: 3,
        feature_hidden: vec![6],
        feature_dim: 4,
        label_hidden: vec![],
        domain_hidden: vec![5],
        num_classes: 3,
    };
    let mut params = init_params(&spec, seed).unwrap();
    for t in params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= 8.0);
    }
    let (ns, nt) = (r.random_range(1..6), r.random_range(1..6));
    let ys = (0..ns).map(|_| r.random_range(0..3)).collect();
    let yt = (0..nt).map(|_| r.random_range(0..3)).collect();
    let s = Batch::labeled(random_tensor(&mut r, ns, 3, -2.0, 2.0), ys);
    let t = Batch::labeled(random_tensor(&mut r, nt, 3, -2.0, 2.0), yt);
    (params, s, t)
}

#[test]
fn transdann_without_target_term_equals_dann_on_100_batches() {
    for seed in 0..100 {
        let (p, s, t) = random_case(seed);
        let lambda = rng(seed + 1000).random_range(0.0..2.0);
        let w = LossWeights { lambda_adapt: lambda, c_label: 1.0, c_unlabeled: 0.0 };
        let (obj_t, val_t) = losses(&p, &s, &t, &w, true);
        let (obj_d, val_d) = losses(&p, &s, &Batch::unlabeled(t.x.clone()), &w, false);
        assert!((val_t - val_d).abs() <= 1e-12, "seed {seed}: {val_t} vs {val_d}");
        assert!((obj_t - obj_d).abs() <= 1e-12, "seed {seed}");
    }
}

#[test]
fn dann_without_adaptation_is_source_cross_entropy_on_100_batches() {
    for seed in 0..100 {
        let (p, s, t) = random_case(seed);
        let (_, val) = losses(&p, &s, &t, &LossWeights::dann(0.0), false);
        let probs = p.predict_proba(&s.x).unwrap();
        let labels = s.labels.as_ref().unwrap();
        let ce = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -probs.row(i)[y].clamp(PROB_FLOOR, 1.0 - PROB_FLOOR).ln())
            .sum::<f64>()
            / labels.len() as f64;
        assert!((val - ce).abs() <= 1e-12, "seed {seed}: {val} vs {ce}");
    }
}

#[test]
fn two_plus_two_instance_matches_direct_summation() {
    let (p, _, _) = random_case(3);
    let mut r = rng(33);
    let s = Batch::labeled(random_tensor(&mut r, 2, 3, -1.0, 1.0), vec![1, 2]);
    let t = Batch::labeled(random_tensor(&mut r, 2, 3, -1.0, 1.0), vec![0, 2]);
    let w = LossWeights { lambda_adapt: 0.6, c_label: 0.9, c_unlabeled: 0.3 };
    let (_, val) = losses(&p, &s, &t, &w, true);
    assert!((val - direct_loss_value(&p, &s, &t, &w, true)).abs() < 1e-12);
    let (_, val) = losses(&p, &s, &Batch::unlabeled(t.x.clone()), &w, false);
    let w1 = LossWeights { c_label: 1.0, c_unlabeled: 0.0, ..w };
    assert!((val - direct_loss_value(&p, &s, &t, &w1, false)).abs() < 1e-12);
}

#[test]
fn full_network_value_matches_direct_summation() {
    let inst = dann_instance(4);
    let (_, val) = common::loss_pair(&inst, &inst.params);
    let direct = direct_loss_value(&inst.params, &inst.source, &inst.target, &inst.weights, true);
    assert!((val - direct).abs() < 1e-12, "{val} vs {direct}");
}

#[test]
fn uniform_domain_head_contributes_two_lambda_ln2() {
    let (mut p, s, t) = random_case(8);
    // Zeroing the last domain layer makes the domain head output (0.5, 0.5).
    let last = p.domain.layers.last_mut().unwrap();
    last.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
    last.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let (_, with) = losses(&p, &s, &t, &LossWeights::dann(0.8), false);
    let (_, without) = losses(&p, &s, &t, &LossWeights::dann(0.0), false);
    assert!((with - without + 2.0 * 0.8 * 2f64.ln()).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn transdann_value_is_linear_in_each_weight(
        seed in 0u64..500,
        base in prop::array::uniform3(0.0f64..2.0),
        which in 0usize..3,
    ) {
        let (p, s, t) = random_case(seed);
        let at = |x: f64| {
            let mut v = base;
            v[which] = x;
            let w = LossWeights { lambda_adapt: v[0], c_label: v[1], c_unlabeled: v[2] };
            losses(&p, &s, &t, &w, true).1
        };
        let (f0, f1, f2) = (at(0.0), at(1.0), at(2.5));
        let slope = f1 - f0;
        prop_assert!((f2 - (f0 + 2.5 * slope)).abs() < 1e-9 * (1.0 + f2.abs()));
    }

    #[test]
    fn cross_entropy_is_nonnegative(seed in 0u64..500) {
        let (p, s, t) = random_case(seed);
        let w = LossWeights { lambda_adapt: 0.0, c_label: 1.0, c_unlabeled: 1.0 };
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let out = transdann_loss(&mut tape, &bound, &s, &t, &w).unwrap();
        prop_assert!(out.task_source >= 0.0 && out.task_target >= 0.0);
        prop_assert!(out.domain_source >= 0.0 && out.domain_target >= 0.0);
    }
}

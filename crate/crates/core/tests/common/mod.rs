//! Test oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use transdann_core::assigner::{ClassBudget, Move, ScoreMatrix};
use transdann_core::diffcore::{Tape, Tensor, Var};
use transdann_core::losses::{transdann_loss, Batch, LossWeights, PROB_FLOOR};
use transdann_core::nets::{init_params, Dense, ModelParams, NetSpec};
use transdann_core::Result;

pub const FD_STEP: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1)`: relative for large gradients, absolute near zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Largest relative error between tape gradients of `build` with respect to
/// every input and central differences of its scalar output.
pub fn fd_check(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let eval = |values: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t)).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.scalar(out)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).to_vec()).collect();

    let mut worst = 0.0f64;
    for (t, grads) in analytic.iter().enumerate() {
        for (i, &g) in grads.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[t].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[t].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g, numeric));
        }
    }
    worst
}

/// Network with two hidden layers in every part.
pub fn two_hidden_spec() -> NetSpec {
    NetSpec {
        input_dim: 3,
        feature_hidden: vec![5, 4],
        feature_dim: 4,
        label_hidden: vec![4, 3],
        domain_hidden: vec![5, 4],
        num_classes: 3,
    }
}

pub struct Instance {
    pub params: ModelParams,
    pub source: Batch,
    pub target: Batch,
    pub weights: LossWeights,
}

pub fn dann_instance(seed: u64) -> Instance {
    let spec = two_hidden_spec();
    let mut params = init_params(&spec, seed).unwrap();
    let mut r = rng(seed);
    // Larger weights than the default init so every layer is exercised.
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = r.random_range(-1.0..1.0);
        }
    }
    let source = Batch::labeled(random_tensor(&mut r, 4, 3, -1.0, 1.0), vec![0, 2, 1, 2]);
    let target = Batch::labeled(random_tensor(&mut r, 3, 3, -1.0, 1.0), vec![1, 0, 2]);
    Instance {
        params,
        source,
        target,
        weights: LossWeights {
            lambda_adapt: 0.7,
            c_label: 1.3,
            c_unlabeled: 0.4,
        },
    }
}

/// Objective scalar and reported loss value of the transductive loss.
pub fn loss_pair(inst: &Instance, params: &ModelParams) -> (f64, f64) {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = transdann_loss(&mut tape, &bound, &inst.source, &inst.target, &inst.weights).unwrap();
    (tape.scalar(out.objective), out.value)
}

/// Gradient check of a full network. `θ_f` gradients must match central
/// differences of the reported loss value (the saddle objective the
/// extractor minimizes); `θ_y` and `θ_d` gradients must match those of the
/// objective scalar (which the heads minimize).
pub fn dann_instance_max_err(seed: u64) -> f64 {
    let inst = dann_instance(seed);
    let mut params = inst.params.clone();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = transdann_loss(&mut tape, &bound, &inst.source, &inst.target, &inst.weights).unwrap();
    tape.backward(out.objective).unwrap();
    params.accumulate_grads(&tape, &bound);

    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let grads: Vec<Vec<f64>> = params.named_tensors().into_iter().map(|(_, t)| t.grad().to_vec()).collect();
    let mut worst = 0.0f64;
    for (ti, name) in names.iter().enumerate() {
        let use_value = name.starts_with("feature.");
        for i in 0..grads[ti].len() {
            let shifted = |delta: f64| {
                let mut p = inst.params.clone();
                p.tensors_mut().nth(ti).unwrap().data_mut()[i] += delta;
                let (objective, value) = loss_pair(&inst, &p);
                if use_value {
                    value
                } else {
                    objective
                }
            };
            let numeric = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads[ti][i], numeric));
        }
    }
    worst
}

/// Plain-arithmetic forward pass of one dense stack.
pub fn dense_forward(x: &[f64], layers: &[Dense], hidden: fn(f64) -> f64, last: Option<fn(f64) -> f64>) -> Vec<f64> {
    let mut h = x.to_vec();
    for (li, l) in layers.iter().enumerate() {
        let (fan_in, fan_out) = (l.weight.shape()[0], l.weight.shape()[1]);
        let mut next: Vec<f64> = (0..fan_out)
            .map(|o| l.bias.data()[o] + (0..fan_in).map(|i| h[i] * l.weight.data()[i * fan_out + o]).sum::<f64>())
            .collect();
        let act = if li + 1 == layers.len() { last } else { Some(hidden) };
        if let Some(f) = act {
            next.iter_mut().for_each(|v| *v = f(*v));
        }
        h = next;
    }
    h
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn neg_log(p: f64) -> f64 {
    -p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR).ln()
}

/// Label and domain probabilities of one row, computed without the tape.
pub fn manual_heads(params: &ModelParams, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let f = dense_forward(x, &params.feature.layers, f64::tanh, Some(f64::tanh));
    let label = softmax(&dense_forward(&f, &params.label.layers, f64::tanh, None));
    let domain = softmax(&dense_forward(&f, &params.domain.layers, |v| v.max(0.0), None));
    (label, domain)
}

/// `C_ℓ·CE_s + C_u·CE_t − λ·(domCE_s + domCE_t)` by direct summation.
pub fn direct_loss_value(params: &ModelParams, source: &Batch, target: &Batch, w: &LossWeights, with_target: bool) -> f64 {
    let mean_ce = |batch: &Batch, labels: Option<&[usize]>, domain: usize| -> (f64, f64) {
        let n = batch.x.shape()[0];
        let (mut task, mut dom) = (0.0, 0.0);
        for i in 0..n {
            let (p, d) = manual_heads(params, batch.x.row(i));
            if let Some(l) = labels {
                task += neg_log(p[l[i]]);
            }
            dom += neg_log(d[domain]);
        }
        (task / n as f64, dom / n as f64)
    };
    let (task_s, dom_s) = mean_ce(source, source.labels.as_deref(), 0);
    let tl = if with_target { target.labels.as_deref() } else { None };
    let (task_t, dom_t) = mean_ce(target, tl, 1);
    w.c_label * task_s + if with_target { w.c_unlabeled * task_t } else { 0.0 } - w.lambda_adapt * (dom_s + dom_t)
}

/// Straightforward re-implementation of the surplus-to-deficit procedure.
pub fn replay_assign(scores: &ScoreMatrix, budget: &ClassBudget) -> (Vec<usize>, Vec<Move>) {
    let (n, k) = (scores.rows(), scores.classes());
    let mut labels: Vec<usize> = (0..n)
        .map(|j| {
            let mut best = 0;
            for c in 1..k {
                if scores.score(j, c) > scores.score(j, best) {
                    best = c;
                }
            }
            best
        })
        .collect();
    let mut moves = Vec::new();
    loop {
        let counts: Vec<usize> = (0..k).map(|c| labels.iter().filter(|&&l| l == c).count()).collect();
        let Some(from) = (0..k).find(|&c| counts[c] > budget.0[c]) else {
            break;
        };
        let mut weakest = None::<usize>;
        for j in (0..n).filter(|&j| labels[j] == from) {
            if weakest.is_none_or(|w| scores.score(j, from) < scores.score(w, from)) {
                weakest = Some(j);
            }
        }
        let x = weakest.unwrap();
        let mut to = None::<usize>;
        for c in (0..k).filter(|&c| counts[c] < budget.0[c]) {
            if to.is_none_or(|t| scores.score(x, c) > scores.score(x, t)) {
                to = Some(c);
            }
        }
        let to = to.unwrap();
        labels[x] = to;
        moves.push(Move { example: x, from, to });
    }
    (labels, moves)
}

/// Random score matrix (quantized so ties occur) and a random budget summing to `n`.
pub fn random_assignment_instance(r: &mut ChaCha8Rng, max_n: usize, max_k: usize) -> (ScoreMatrix, ClassBudget) {
    let n = r.random_range(1..=max_n);
    let k = r.random_range(2..=max_k);
    let quantized = r.random_bool(0.5);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| loop {
            let w: Vec<f64> = (0..k)
                .map(|_| if quantized { f64::from(r.random_range(0..4u8)) } else { r.random_range(0.0..1.0) })
                .collect();
            let s: f64 = w.iter().sum();
            if s > 0.0 {
                break w.iter().map(|v| v / s).collect();
            }
        })
        .collect();
    let mut budget = vec![0; k];
    for _ in 0..n {
        budget[r.random_range(0..k)] += 1;
    }
    (ScoreMatrix::from_rows(&rows).unwrap(), ClassBudget(budget))
}

pub fn total_surplus(labels: &[usize], budget: &ClassBudget) -> usize {
    budget
        .0
        .iter()
        .enumerate()
        .map(|(c, &b)| labels.iter().filter(|&&l| l == c).count().saturating_sub(b))
        .sum()
}

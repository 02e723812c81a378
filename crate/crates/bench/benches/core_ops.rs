use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;
use transdann_core::assigner::{assign_interim_labels, ClassBudget, ScoreMatrix};
use transdann_core::data::{generate_shifted, ShiftSpec};
use transdann_core::losses::{transdann_loss, Batch, LossWeights};
use transdann_core::nets::{init_params, Sgd};
use transdann_core::trainers::{train_dann, DomainData, TrainConfig};
use transdann_core::{NetSpec, Tape, Tensor};

/// Deterministic pseudo-random fill, so the bench needs no RNG crate.
fn filled(rows: usize, cols: usize, phase: f64) -> Tensor {
    let data = (0..rows * cols).map(|i| ((i as f64 + phase) * 0.618).sin()).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn matmul_backward(c: &mut Criterion) {
    let (a, b) = (filled(64, 32, 0.0), filled(32, 16, 1.0));
    c.bench_function("matmul_tanh_backward_64x32x16", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let (va, vb) = (tape.param(&a), tape.param(&b));
            let m = tape.matmul(va, vb).unwrap();
            let h = tape.tanh(m);
            let out = tape.sum(h);
            tape.backward(out).unwrap();
            black_box(tape.grad(va)[0])
        })
    });
}

fn training_step(c: &mut Criterion) {
    let spec = NetSpec::desk(2, 2);
    let params = init_params(&spec, 0).unwrap();
    let labels: Vec<usize> = (0..64).map(|i| i % 2).collect();
    let source = Batch::labeled(filled(64, 2, 0.0), labels.clone());
    let target = Batch::labeled(filled(64, 2, 7.0), labels);
    let w = LossWeights { lambda_adapt: 0.5, c_label: 1.0, c_unlabeled: 0.1 };
    let mut sgd = Sgd::new(0.05, 0.9);
    c.bench_function("transdann_step_batch64", |bench| {
        bench.iter_batched(
            || params.clone(),
            |mut p| {
                let mut tape = Tape::new();
                let bound = p.bind(&mut tape);
                let out = transdann_loss(&mut tape, &bound, &source, &target, &w).unwrap();
                tape.backward(out.objective).unwrap();
                p.zero_grad();
                p.accumulate_grads(&tape, &bound);
                sgd.step(&mut p).unwrap();
                p
            },
            BatchSize::SmallInput,
        )
    });
}

fn assigner(c: &mut Criterion) {
    let n = 2000;
    let rows: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            let w = [1.0 + (i as f64 * 0.37).sin(), 1.0 + (i as f64 * 0.91).cos(), 1.2];
            let s: f64 = w.iter().sum();
            [w[0] / s, w[1] / s, w[2] / s]
        })
        .collect();
    let scores = ScoreMatrix::from_rows(&rows).unwrap();
    let budget = ClassBudget(vec![700, 700, 600]);
    c.bench_function("assign_interim_labels_n2000_k3", |bench| {
        bench.iter(|| black_box(assign_interim_labels(&scores, &budget).unwrap()))
    });
}

fn short_dann_run(c: &mut Criterion) {
    let d = generate_shifted(&ShiftSpec::two_moons(35.0, 0)).unwrap();
    let data = DomainData::new(d.source, d.target);
    let cfg = TrainConfig { steps_per_cycle: 200, ..TrainConfig::default() };
    let spec = NetSpec::desk(2, 2);
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("dann_200_steps_two_moons", |bench| {
        bench.iter(|| black_box(train_dann(&data, &spec, &cfg).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, matmul_backward, training_step, assigner, short_dann_run);
criterion_main!(benches);

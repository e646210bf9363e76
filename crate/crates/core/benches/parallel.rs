//! Sequential vs rayon-parallel execution of the data-parallel stages.
//! Build with `--no-default-features` to see both variants run sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use depthforge::engine::{pseudo_label, train_student, RunConfig};
use depthforge::eval::{evaluate_checkpoint, AlignMethod};
use depthforge::model::{FrozenEncoder, ParamSet};
use depthforge::synth::{generate_datasets, DataConfig, Datasets};
use depthforge::Exec;

const EXECS: [Exec; 2] = [Exec::Sequential, Exec::Parallel];

fn data() -> Datasets {
    let cfg = DataConfig {
        n_labeled: 16,
        n_unlabeled: 32,
        n_test: 16,
        ..DataConfig::default()
    };
    generate_datasets(&cfg, Exec::Parallel).unwrap()
}

fn bench(c: &mut Criterion) {
    let data = data();
    let cfg = RunConfig {
        labeled_per_batch: 2,
        ..RunConfig::default()
    };
    let params = ParamSet::init(&cfg.model, 1, "bench");
    let pseudo = pseudo_label(&params, &data.unlabeled, Exec::Sequential).unwrap();
    let frozen = FrozenEncoder::new(&cfg.model, cfg.frozen_seed);

    let mut g = c.benchmark_group("pseudo_label");
    for exec in EXECS {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &e| {
            b.iter(|| pseudo_label(&params, &data.unlabeled, e).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("evaluate");
    for exec in EXECS {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &e| {
            b.iter(|| evaluate_checkpoint(&params, &data.test[0].items, AlignMethod::LeastSquares, e).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("student_sweep");
    g.sample_size(10);
    for exec in EXECS {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &e| {
            b.iter(|| train_student(&data.labeled, &pseudo, &frozen, &cfg, e).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);

//! Sequential vs rayon execution of the data-parallel kernels.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use reinsqp::exec::{self, Exec};
use reinsqp::gen::{model_from_seed, GenParams};
use reinsqp::operators::{dense_matrix_with, OperatorKind, DENSE_CAP};
use reinsqp::solver::{spectral_sets_with, Solver};
use reinsqp::{MomentTables, Model, Portfolio};

/// First generated instance with at least `min_dim` coordinates.
fn instance(min_dim: usize) -> Model {
    let params = GenParams {
        max_n: 3,
        max_t_bar: 4,
        max_t: 5,
        max_branching: 3,
        max_dim: 2000,
        ..GenParams::default()
    };
    (0..)
        .map(|s| model_from_seed(s, &params))
        .find(|m| m.tree.portfolio_dim() >= min_dim)
        .unwrap()
}

fn dense_gram(c: &mut Criterion) {
    let m = instance(150);
    let mut g = c.benchmark_group("dense_gram_b");
    g.sample_size(10);
    for exec in [Exec::Seq, Exec::Par] {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{:?}", exec)), &exec, |b, e| {
            b.iter(|| dense_matrix_with(OperatorKind::B, &m.tree, &m.book, DENSE_CAP, *e).unwrap())
        });
    }
    g.finish();
}

fn spectral(c: &mut Criterion) {
    let m = instance(150);
    let mom = MomentTables::new(&m.tree, &m.book);
    let mut g = c.benchmark_group("spectral_sets");
    g.sample_size(10);
    for exec in [Exec::Seq, Exec::Par] {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{:?}", exec)), &exec, |b, e| {
            b.iter(|| spectral_sets_with(black_box(&mom), *e))
        });
    }
    g.finish();
}

fn batch_solves(c: &mut Criterion) {
    let models: Vec<Model> = (0..32).map(|s| model_from_seed(s, &GenParams::default())).collect();
    let run = |m: &Model| {
        let xi = Portfolio::from_flat(&m.tree, &vec![1.0; m.tree.portfolio_dim()]).unwrap();
        Solver::new(OperatorKind::B, &m.tree, &m.book, -0.5).unwrap().solve(&xi).unwrap().eta
    };
    let mut g = c.benchmark_group("batch_structured_solves");
    g.bench_function("Seq", |b| b.iter(|| exec::seq::map_slice(&models, run)));
    #[cfg(feature = "parallel")]
    g.bench_function("Par", |b| b.iter(|| exec::par::map_slice(&models, run)));
    g.finish();
}

criterion_group!(benches, dense_gram, spectral, batch_solves);
criterion_main!(benches);

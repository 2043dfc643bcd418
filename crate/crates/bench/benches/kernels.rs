use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ddsm::cnn::{self, CnnConfig};
use ddsm::dsm::{index_field_classic, NumericProbing};
use ddsm::fnn::{self, FnnConfig};
use ddsm::pipeline::{generate_records, make_current, DatasetConfig};
use ddsm::solver::ntd_on;
use ddsm::spectral::frac_laplacian;
use ddsm::train::TrainOptions;
use ddsm::{CartesianGrid, Domain, Operator, SolverConfig, SquareDomain};

fn solver(c: &mut Criterion) {
    let cfg = SolverConfig::default();
    for n in [64, 128] {
        let grid = CartesianGrid::square(n).unwrap();
        let dom = SquareDomain::new(&grid);
        let op = Operator::laplacian(&grid);
        let g = make_current(3, &grid.boundary_loop()).unwrap();
        c.bench_function(&format!("neumann solve {n}x{n}"), |b| b.iter(|| ntd_on(&dom, &op, &g, &cfg).unwrap()));
    }
}

fn spectral(c: &mut Criterion) {
    let grid = CartesianGrid::square(128).unwrap();
    let g = make_current(5, &grid.boundary_loop()).unwrap();
    c.bench_function("frac laplacian 508 nodes", |b| b.iter(|| frac_laplacian(&g, 0.5).unwrap()));
}

fn classic(c: &mut Criterion) {
    let cfg = SolverConfig::default();
    let records = generate_records(&DatasetConfig::desk(1, 1, 1, 3)).unwrap();
    let r = &records[0];
    let dom: Arc<dyn Domain> = Arc::new(SquareDomain::new(r.grid()));
    let mut group = c.benchmark_group("classic dsm 64x64");
    group.sample_size(10);
    group.bench_function("probing setup", |b| b.iter(|| NumericProbing::new(dom.clone(), &cfg).unwrap()));
    let probing = NumericProbing::new(dom.clone(), &cfg).unwrap();
    let (f, g) = (&r.pairs[0].f, &r.pairs[0].g);
    group.bench_function("index field", |b| b.iter(|| index_field_classic(dom.as_ref(), f, g, 1.0, 1.0, &probing, &cfg).unwrap()));
    group.finish();
}

fn networks(c: &mut Criterion) {
    let records = generate_records(&DatasetConfig::desk(1, 8, 10, 3)).unwrap();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    let fcfg = FnnConfig { batch_samples: 8, batch_points: 256, iterations: 10, ..FnnConfig::default() };
    group.bench_function("fnn 10 steps", |b| b.iter(|| fnn::train(&records, &fcfg, 1, &mut TrainOptions::default()).unwrap()));
    let ccfg = CnnConfig { channels: vec![8, 16, 32], batch_samples: 8, iterations: 2, ..CnnConfig::default() };
    group.bench_function("cnn 2 steps", |b| b.iter(|| cnn::train(&records, &ccfg, 1, &mut TrainOptions::default()).unwrap()));
    let (model, _) = cnn::train(&records, &ccfg, 1, &mut TrainOptions::default()).unwrap();
    group.bench_function("cnn predict", |b| b.iter_batched(|| &records[0], |r| cnn::predict_field(&model, r).unwrap(), BatchSize::SmallInput));
    group.finish();
}

criterion_group!(benches, solver, spectral, classic, networks);
criterion_main!(benches);

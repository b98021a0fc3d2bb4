use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use qsampler_bench::bench_model;
use qsampler_core::gradest;
use qsampler_core::harness::{self, SamplerMetric, SamplerSpec};
use qsampler_core::jordan;
use qsampler_core::metrics::{self, W2Options};
use qsampler_core::qme::{self, OracleKind, QmeConfig, QueryLedger};
use qsampler_core::rng;
use qsampler_core::samplers::{PlanConstants, Theorem, ZerothOrderOracle};
use qsampler_core::{PotentialModel, SimRng};

fn mean_estimation(c: &mut Criterion) {
    let req = QmeConfig::default().request(4, 1.0, 0.01, OracleKind::Gradient);
    let mut r = rng::stream(1, &[]);
    c.bench_function("qme/d4_b100", |b| {
        b.iter(|| {
            let mut l = QueryLedger::new();
            qme::quantum_mean_estimate(&req, |r: &mut SimRng| Ok(rng::gaussian_vec(r, 4)), &mut r, &mut l).unwrap()
        })
    });
}

fn jordan_statevector(c: &mut Criterion) {
    let model = PotentialModel::isotropic_quadratic(2).unwrap();
    let x = [0.3, -0.2];
    let grid = jordan::build_grid(2, 1e-9, 1.0, 1.0, &x, jordan::DEFAULT_QUBIT_BUDGET).unwrap();
    let mut r = rng::stream(2, &[]);
    c.bench_function("jordan/16_qubits", |b| {
        b.iter(|| jordan::jordan_gradient(|y| model.eval_exact(y).unwrap(), black_box(&grid), &mut r).unwrap())
    });
}

fn smoothing(c: &mut Criterion) {
    let model = bench_model(4, 64);
    let x = vec![0.1; 4];
    let mut r = rng::stream(3, &[]);
    c.bench_function("smoothing/d4_b100", |b| {
        b.iter(|| {
            let mut l = QueryLedger::new();
            gradest::gaussian_smoothing_gradient(&model, black_box(&x), 0.01, 100, &mut r, &mut l).unwrap()
        })
    });
}

fn qsvrg_chains(c: &mut Criterion) {
    let model = bench_model(2, 100);
    let spec = SamplerSpec {
        theorem: Theorem::QsvrgHmc,
        eps: 0.1,
        chains: 16,
        constants: PlanConstants::default(),
        pipeline: Default::default(),
        zeroth: ZerothOrderOracle::PhasePipeline,
        metric: SamplerMetric::None,
        start: None,
    };
    c.bench_function("samplers/qsvrg_hmc_16_chains", |b| {
        b.iter(|| harness::sample_chains(&model, black_box(&spec), 0.1, 4).unwrap())
    });
}

fn w2(c: &mut Criterion) {
    let mut r = rng::stream(5, &[]);
    let a: Vec<Vec<f64>> = (0..500).map(|_| rng::gaussian_vec(&mut r, 2)).collect();
    let b: Vec<Vec<f64>> = (0..500).map(|_| rng::gaussian_vec(&mut r, 2)).collect();
    let opts = W2Options {
        bootstrap: 0,
        ..W2Options::default()
    };
    c.bench_function("metrics/w2_exact_500", |bch| bch.iter(|| metrics::empirical_w2(black_box(&a), &b, &opts).unwrap()));
}

criterion_group! {
    name = kernels;
    config = Criterion::default().sample_size(10);
    targets = mean_estimation, jordan_statevector, smoothing, qsvrg_chains, w2
}
criterion_main!(kernels);

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use noisepath::control::optimize_pulse_times;
use noisepath::dephasing::{attenuation_eigenbasis, attenuation_time_basis};
use noisepath::eigenmodes::{decompose, DEFAULT_CUTOFF};
use noisepath::gridops::{discretize_kernel, kernel_to_correlation};
use noisepath::markov::propagator;
use noisepath::modulation::{control_pulse_train, cpmg_times};
use noisepath::sampler::{factorize_covariance, monte_carlo_coherence};
use noisepath::{BoundaryCondition, GeneralizedState, KernelSpec, OptimizerOptions, TimeGrid};
use noisepath_bench::quenched_ou;

fn correlation(c: &mut Criterion) {
    let mut group = c.benchmark_group("correlation");
    for n in [201, 401, 801] {
        let grid = TimeGrid::new(0.0, 20.0, n).unwrap();
        let spec = KernelSpec::quartic(1.0, 1.0);
        group.bench_with_input(BenchmarkId::new("quartic_decay", n), &grid, |b, grid| {
            b.iter(|| {
                let k = discretize_kernel(&spec, grid).unwrap();
                kernel_to_correlation(&k, BoundaryCondition::DecayAtInfinity).unwrap()
            })
        });
    }
    group.finish();
}

fn eigenmodes(c: &mut Criterion) {
    let mut group = c.benchmark_group("decompose");
    group.sample_size(10);
    for n in [201, 401] {
        let g = quenched_ou(n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &g, |b, g| {
            b.iter(|| decompose(g, DEFAULT_CUTOFF).unwrap())
        });
    }
    group.finish();
}

fn attenuation(c: &mut Criterion) {
    let g = quenched_ou(401);
    let dec = decompose(&g, DEFAULT_CUTOFF).unwrap();
    let f = control_pulse_train(g.grid(), 1.0, 1.0, 8.0, &cpmg_times(1.0, 8.0, 8)).unwrap();
    c.bench_function("chi_time_basis_401", |b| b.iter(|| attenuation_time_basis(&g, black_box(&f)).unwrap()));
    c.bench_function("chi_eigenbasis_401", |b| b.iter(|| attenuation_eigenbasis(&dec, black_box(&f)).unwrap()));
}

fn monte_carlo(c: &mut Criterion) {
    let g = quenched_ou(201);
    let factor = factorize_covariance(&g).unwrap();
    let f = control_pulse_train(g.grid(), 1.0, 1.0, 8.0, &cpmg_times(1.0, 8.0, 8)).unwrap();
    let mut group = c.benchmark_group("monte_carlo");
    group.sample_size(10);
    group.bench_function("M_1e4_201", |b| {
        b.iter(|| monte_carlo_coherence(&factor, std::slice::from_ref(&f), 10_000, 7).unwrap())
    });
    group.finish();
}

fn optimizer(c: &mut Criterion) {
    let g = quenched_ou(201);
    let dec = decompose(&g, DEFAULT_CUTOFF).unwrap();
    let opts = OptimizerOptions {
        starts: 4,
        ..OptimizerOptions::default()
    };
    let mut group = c.benchmark_group("optimizer");
    group.sample_size(10);
    group.bench_function("P4_201", |b| {
        b.iter(|| optimize_pulse_times(&dec, 1.0, 8.0, 4, &[1.0], &opts).unwrap())
    });
    group.finish();
}

fn markov(c: &mut Criterion) {
    let spec = KernelSpec::quartic(1.0, 1.0);
    let x0 = GeneralizedState::zeros(1, 2);
    c.bench_function("propagator_quartic_80_steps", |b| {
        b.iter(|| propagator(&spec, 0.0, 4.0, &x0, 0.05).unwrap())
    });
}

criterion_group!(benches, correlation, eigenmodes, attenuation, monte_carlo, optimizer, markov);
criterion_main!(benches);

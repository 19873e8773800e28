use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gap_bench::{ensemble, lorenz96, observe};
use gap_core::diffusion::score;
use gap_core::verification::{crps_field, eof, power_spectrum, WeightVector};
use gap_core::{
    ensemble_forecast, sample_conditioned, step_truth, ForecastModel, Forcing, GapContext, GuidanceConfig,
    SamplerConfig,
};

fn kernels(c: &mut Criterion) {
    let fx = lorenz96(2000);
    let x = fx.data.states()[0].clone();

    c.bench_function("lorenz96_step", |b| {
        b.iter(|| step_truth(black_box(&x), &fx.spec, 0, 0).unwrap())
    });

    let mut group = c.benchmark_group("score");
    for (name, model) in [("gaussian", &fx.gaussian), ("mlp", &fx.mlp)] {
        group.bench_function(name, |b| b.iter(|| score(black_box(&x), 50, model, &fx.sched).unwrap()));
    }
    group.finish();

    let sampler = SamplerConfig {
        n_steps: 50,
        ..Default::default()
    };
    let guidance = GuidanceConfig::default();
    let obs = observe(&x, 5);
    let mut group = c.benchmark_group("conditioned_sampling");
    group.sample_size(10);
    for m in [8usize, 32] {
        group.bench_with_input(BenchmarkId::from_parameter(m), &m, |b, &m| {
            b.iter(|| sample_conditioned(&fx.gaussian, &fx.sched, &sampler, &obs, &guidance, m, 1).unwrap())
        });
    }
    group.finish();

    let fc = ForecastModel::perfect(fx.spec.clone());
    let ctx = GapContext {
        model: &fx.gaussian,
        sched: &fx.sched,
        sampler: &sampler,
        forecaster: &fc,
        guidance: &guidance,
    };
    let init = ensemble(&fx.data, 32);
    let mut group = c.benchmark_group("forecast_lead");
    group.sample_size(10);
    for tau in [0usize, 10] {
        group.bench_with_input(BenchmarkId::new("tau", tau), &tau, |b, &tau| {
            b.iter(|| ensemble_forecast(&ctx, &init, tau, 1, Forcing::None, 0, 1).unwrap())
        });
    }
    group.finish();

    let w = WeightVector::uniform(40);
    let truth = fx.data.states()[100].clone();
    c.bench_function("crps_field_m32", |b| b.iter(|| crps_field(black_box(&init), &truth, &w).unwrap()));
    c.bench_function("power_spectrum_d40", |b| {
        b.iter(|| power_spectrum(black_box(x.as_slice()), 40.0).unwrap())
    });
    c.bench_function("eof_2000x40", |b| b.iter(|| eof(black_box(&fx.data), 5).unwrap()));
}

criterion_group!(benches, kernels);
criterion_main!(benches);

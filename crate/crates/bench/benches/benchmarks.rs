use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use eqc_bench::{additive_panel, regression_panel};
use eqc_core::panel::TuningParams;
use eqc_core::sim::{generate, DesignFamily, SimDesign};
use eqc_core::solver::{fit_linear_quantile, pooled_quantile, SolverOptions, SortedPool};
use eqc_core::uncond::{infer, sigma2_hat};

fn bench_pooled_quantile(c: &mut Criterion) {
    let panel = additive_panel(200, 200, 1);
    c.bench_function("pooled_quantile/200x200", |b| {
        b.iter(|| pooled_quantile(black_box(&panel), black_box(0.05)).unwrap())
    });
    c.bench_function("sorted_pool/200x200", |b| {
        b.iter(|| SortedPool::from_panel(black_box(&panel)).unwrap())
    });
}

fn bench_sigma2(c: &mut Criterion) {
    let panel = additive_panel(200, 200, 2);
    let beta = pooled_quantile(&panel, 0.05).unwrap().beta_scalar();
    c.bench_function("sigma2_hat/200x200", |b| {
        b.iter(|| sigma2_hat(black_box(&panel), black_box(beta), black_box(0.05)).unwrap())
    });
}

fn bench_infer(c: &mut Criterion) {
    let panel = additive_panel(200, 200, 3);
    let tuning = TuningParams::default();
    c.bench_function("uncond_infer/200x200", |b| {
        b.iter(|| infer(black_box(&panel), black_box(0.05), black_box(&tuning)).unwrap())
    });
}

fn bench_interior_point(c: &mut Criterion) {
    let mut group = c.benchmark_group("fit_linear_quantile");
    let opts = SolverOptions::default();
    for (n, t, d) in [(50, 50, 2), (100, 100, 3)] {
        let panel = regression_panel(n, t, d, 4);
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{n}x{t}_d{d}")),
            &panel,
            |b, p| b.iter(|| fit_linear_quantile(black_box(p), black_box(0.1), &opts).unwrap()),
        );
    }
    group.finish();
}

fn bench_generate(c: &mut Criterion) {
    let design = SimDesign {
        family: DesignFamily::Additive,
        sigma_alpha: 1.0,
        sigma_gamma: 1.0,
        sigma_eps: 2.0,
        n: 200,
        t: 200,
        d: 0,
        xi_true: 0.0,
    };
    c.bench_function("generate/200x200", |b| {
        let mut seed = 0u64;
        b.iter(|| {
            seed += 1;
            generate(black_box(&design), seed)
        })
    });
}

criterion_group!(
    benches,
    bench_pooled_quantile,
    bench_sigma2,
    bench_infer,
    bench_interior_point,
    bench_generate
);
criterion_main!(benches);

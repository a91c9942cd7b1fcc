use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pipesim_core::dessim::{simulate, SyncPolicy};
use pipesim_core::perfmodel::{plan, predict_T};
use pipesim_core::schedgen::gen_schedule;
use pipesim_core::{CostProfile, PipelineConfig, Scaling, Scheme};

fn generate(c: &mut Criterion) {
    let mut g = c.benchmark_group("gen_schedule");
    for d in [8u32, 16, 32] {
        let cfg = PipelineConfig::new(Scheme::Chimera, d, 4 * d).with_scaling(Scaling::ForwardDoubling);
        g.bench_with_input(BenchmarkId::new("chimera_doubling", d), &cfg, |b, cfg| {
            b.iter(|| gen_schedule(black_box(cfg)).unwrap())
        });
    }
    g.finish();
}

fn sim(c: &mut Criterion) {
    let profile = CostProfile { alpha: 0.01, beta: 0.001, grad_bytes: 100.0, ..CostProfile::default() };
    let mut g = c.benchmark_group("simulate");
    for d in [8u32, 16, 32] {
        let s = gen_schedule(&PipelineConfig::new(Scheme::Chimera, d, 2 * d).with_width(2)).unwrap();
        g.bench_with_input(BenchmarkId::new("chimera_eager_opt", d), &s, |b, s| {
            b.iter(|| simulate(black_box(s), &profile, SyncPolicy::EagerSyncOpt).unwrap())
        });
    }
    g.finish();
}

fn model(c: &mut Criterion) {
    let profile = CostProfile { alpha: 0.01, beta: 0.001, grad_bytes: 100.0, ..CostProfile::default() };
    c.bench_function("predict_T chimera D=16 N=32", |b| {
        let cfg = PipelineConfig::new(Scheme::Chimera, 16, 32).with_width(2);
        b.iter(|| predict_T(black_box(&cfg), &profile).unwrap())
    });
    c.bench_function("plan P=32", |b| b.iter(|| plan(32, 256, black_box(&profile), Scheme::Chimera).unwrap()));
}

criterion_group!(benches, generate, sim, model);
criterion_main!(benches);

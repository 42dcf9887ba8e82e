use criterion::{criterion_group, criterion_main, Criterion};

use tgate::exec;
use tgate::pipeline::{ablation_sweep, ModeTag, Pipeline, PipelineConfig, SweepGrid, TrajectoryMode};
use tgate::tgate::GateSchedule;

fn small() -> Pipeline {
    Pipeline::new(PipelineConfig {
        steps: 10,
        ..PipelineConfig::default()
    })
    .unwrap()
}

fn bench_trajectory(c: &mut Criterion) {
    let p = small();
    let mut g = c.benchmark_group("trajectory");
    g.sample_size(10);
    g.bench_function("baseline", |b| {
        b.iter(|| p.run(&TrajectoryMode::Baseline, "a red cube", 7).unwrap())
    });
    let gated = TrajectoryMode::Tgate(GateSchedule::new(10));
    g.bench_function("gated", |b| b.iter(|| p.run(&gated, "a red cube", 7).unwrap()));
    g.finish();
}

fn bench_sweep(c: &mut Criterion) {
    let p = small();
    let grid = SweepGrid {
        modes: vec![ModeTag::SF, ModeTag::SL],
        m_values: vec![3, 5],
        k_values: vec![2],
        warmup: 2,
        seeds: vec![7],
        prompt: "a red cube".into(),
        base_schedule: GateSchedule::new(10),
    };
    let mut g = c.benchmark_group("sweep");
    g.sample_size(10);
    g.bench_function("pool", |b| {
        b.iter(|| exec::with_thread_cap(None, || ablation_sweep(&p, &grid).unwrap()))
    });
    g.bench_function("one_thread", |b| {
        b.iter(|| exec::with_thread_cap(Some(1), || ablation_sweep(&p, &grid).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, bench_trajectory, bench_sweep);
criterion_main!(benches);

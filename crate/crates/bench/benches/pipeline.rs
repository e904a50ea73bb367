use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use planar_mrf::bench::{downsample, generate_scene, PlaneSpec, SamplingMode, SceneSpec, SyntheticScene};
use planar_mrf::{
    assemble, estimate_variances, evaluate, run, solve, CameraConfig, PipelineConfig, ProblemConfig, Regularizer,
    SolverConfig, VarianceSelection, WeightField, WeightFunction,
};

fn scene(size: usize) -> SyntheticScene {
    let f = size as f64;
    let c = (f - 1.0) / 2.0;
    let camera = CameraConfig::pinhole(f, f, c, c);
    let plane = PlaneSpec::through_pixel(&camera.build().unwrap(), [1.0, 0.0, 2.0], c, c, 4.0);
    generate_scene(&SceneSpec::single_plane(size, size, camera, plane), 0).unwrap()
}

fn residuals(c: &mut Criterion) {
    let mut group = c.benchmark_group("evaluate");
    for size in [32, 64] {
        let s = scene(size);
        let obs = downsample(&s, 0.05, SamplingMode::Equidistant, 0).unwrap();
        let weights = WeightField::compute(&s.features, &WeightFunction::default()).unwrap();
        let graph = assemble(&s.rays, &obs, &weights, &ProblemConfig::default()).unwrap();
        let x: Vec<f64> = s.truth.depths().iter().map(|d| d * 1.01).collect();
        group.bench_with_input(BenchmarkId::from_parameter(size), &x, |b, x| {
            b.iter(|| evaluate(&graph, black_box(x)).unwrap())
        });
    }
    group.finish();
}

fn pipeline(c: &mut Criterion) {
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    let s = scene(64);
    for (name, regularizer) in [("planar", Regularizer::Planar), ("baseline", Regularizer::Baseline)] {
        let obs = downsample(&s, 0.05, SamplingMode::Random, 1).unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.problem.regularizer = regularizer;
        group.bench_function(name, |b| b.iter(|| run(&s.rays, &s.features, &obs, &cfg).unwrap()));
    }
    group.finish();
}

fn variances(c: &mut Criterion) {
    let mut group = c.benchmark_group("variances");
    group.sample_size(10);
    let s = scene(48);
    let obs = downsample(&s, 0.05, SamplingMode::Equidistant, 0).unwrap();
    let weights = WeightField::compute(&s.features, &WeightFunction::default()).unwrap();
    let graph = assemble(&s.rays, &obs, &weights, &ProblemConfig::default()).unwrap();
    let (solution, _) = solve(&graph, &s.truth, &SolverConfig::default()).unwrap();
    group.bench_function("all_pixels", |b| {
        b.iter(|| estimate_variances(&graph, &solution, &VarianceSelection::All).unwrap())
    });
    group.finish();
}

criterion_group!(benches, residuals, pipeline, variances);
criterion_main!(benches);

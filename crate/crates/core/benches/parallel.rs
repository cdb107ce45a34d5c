//! Sequential versus data-parallel execution of the heavy loops. Build
//! without default features to see the fallback path in both columns.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use lot_core::landscape::{build_landscape, tsne_points, LandscapeConfig, Projector, TsneParams};
use lot_core::parallel::Execution;
use lot_core::synthetic::{generate, SyntheticConfig};
use lot_core::verifier::{labelled_summaries, train_forest, ForestParams, SummaryScheme};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn synthetic(questions: usize, per_question: usize) -> Vec<lot_core::features::FeatureTrajectory> {
    generate(&SyntheticConfig { questions, per_question, ..Default::default() }).unwrap()
}

fn tsne(c: &mut Criterion) {
    let ftrajs = synthetic(12, 5);
    let points: Vec<Vec<f64>> =
        ftrajs.iter().flat_map(|f| f.features.iter().map(|s| s.normalized.clone())).collect();
    let params = TsneParams { iterations: 300, exaggeration_iterations: 100, momentum_switch: 100, ..Default::default() };
    let mut g = c.benchmark_group("tsne");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new(name, points.len()), &points, |b, p| {
            b.iter(|| tsne_points(exec, black_box(p), &params).unwrap())
        });
    }
    g.finish();
}

fn forest(c: &mut Criterion) {
    let data = labelled_summaries(&synthetic(100, 10), SummaryScheme::default()).unwrap();
    let x: Vec<Vec<f64>> = data.iter().map(|(s, _)| s.vector.clone()).collect();
    let y: Vec<bool> = data.iter().map(|(_, c)| *c).collect();
    let params = ForestParams::default();
    let mut g = c.benchmark_group("forest");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new(name, x.len()), &x, |b, x| {
            b.iter(|| train_forest(exec, black_box(x), &y, &params).unwrap())
        });
    }
    g.finish();
}

fn density(c: &mut Criterion) {
    let ftrajs = synthetic(40, 10);
    let cfg = LandscapeConfig::default();
    let mut g = c.benchmark_group("landscape_pca_density");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| build_landscape(exec, black_box(&ftrajs), 4, &Projector::Pca, &cfg).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, tsne, forest, density);
criterion_main!(benches);

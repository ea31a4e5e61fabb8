use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use brwlab::domain::{moment_matrix, truncate, BoundaryPolicy};
use brwlab::gallery::tree_edge_breeding;
use brwlab::genfun::{solve_global_extinction, solve_local_with_seed, SolveOptions, TargetSet};
use brwlab::model::BrwModel;
use brwlab::montecarlo::{estimate, Event, McConfig};
use brwlab::reproduce::halfline_default;
use brwlab::site::Site;
use brwlab::spectral::{perron_root, radial_tree_growth};

fn tree(d: usize) -> BrwModel {
    tree_edge_breeding(d, 0.5).expect("tree model")
}

fn bench_global(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve_global");
    let m = tree(3);
    for r in [6, 8, 10] {
        let dom = truncate(&m, &m.root(), r, BoundaryPolicy::OutsideExtinct).unwrap();
        group.bench_with_input(BenchmarkId::new("tree3", r), &dom, |b, dom| {
            b.iter(|| solve_global_extinction(black_box(dom), &SolveOptions::tol(1e-10)).unwrap())
        });
    }
    group.finish();
}

fn bench_local(c: &mut Criterion) {
    let h = halfline_default().unwrap();
    let dom = truncate(&h, &Site::Int(0), 40, BoundaryPolicy::OutsideExtinct).unwrap();
    let target = TargetSet::single(Site::Int(0));
    c.bench_function("solve_local/halfline_r40", |b| {
        b.iter(|| solve_local_with_seed(black_box(&dom), &target, &SolveOptions::tol(1e-8)).unwrap())
    });
}

fn bench_spectral(c: &mut Criterion) {
    c.bench_function("radial_tree_growth/d3_n1000", |b| {
        b.iter(|| radial_tree_growth(3, black_box(1.0), 1000).unwrap())
    });
    let m = tree(3);
    let dom = truncate(&m, &m.root(), 9, BoundaryPolicy::OutsideExtinct).unwrap();
    let mm = moment_matrix(&dom);
    c.bench_function("perron_root/tree3_r9", |b| b.iter(|| perron_root(black_box(&mm), None)));
}

fn bench_montecarlo(c: &mut Criterion) {
    let h = halfline_default().unwrap();
    let dom = truncate(&h, &Site::Int(0), 120, BoundaryPolicy::OutsideExtinct).unwrap();
    let cfg = McConfig { trials: 2000, horizon: 50, cap: 100_000, seed: 1 };
    c.bench_function("montecarlo/halfline_2k_trials", |b| {
        b.iter(|| estimate(black_box(&dom), &Site::Int(0), &[Event::Global], &cfg).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_global, bench_local, bench_spectral, bench_montecarlo
}
criterion_main!(benches);

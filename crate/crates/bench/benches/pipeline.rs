use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use satir_bench::{gates, world};
use satir_core::closure::{run_closure, ClosureConfig};
use satir_core::oracle::naive_match;
use satir_core::projection::{project_trial, ProjectionConfig};
use satir_core::retrieval::{retrieve, ObjectiveConfig, RetrievalOptions};
use satir_core::store::Store;

fn closure(c: &mut Criterion) {
    let w = world(10, 50);
    let cfg = ClosureConfig::default();
    c.bench_function("closure/50_patients", |b| {
        b.iter(|| w.patients.iter().map(|(_, f)| run_closure(f, &w.ontology, &w.rules, &cfg).report.derived).sum::<usize>())
    });
}

fn projection(c: &mut Criterion) {
    let w = world(500, 1);
    let policy = w.policy.compile(&w.ontology).unwrap();
    let cfg = ProjectionConfig::default();
    c.bench_function("projection/500_trials", |b| {
        b.iter(|| w.trials.iter().map(|p| project_trial(p, &w.ontology, &policy, &cfg).unwrap().gate.clauses.len()).sum::<usize>())
    });
}

fn store_build(c: &mut Criterion) {
    let w = world(1000, 10);
    let g = gates(&w).all();
    c.bench_function("store/build_1000_trials", |b| b.iter(|| Store::build_in_memory(&g, &w.ontology).unwrap()));
}

fn retrieval(c: &mut Criterion) {
    let mut group = c.benchmark_group("retrieve");
    group.sample_size(20);
    for n in [500usize, 2000] {
        let w = world(n, 5);
        let g = gates(&w);
        let store = Store::build_in_memory(&g.all(), &w.ontology).unwrap();
        let o = Arc::new(w.ontology.clone());
        let opts = RetrievalOptions::default();
        for (name, obj) in [("treat_chief", ObjectiveConfig::treat_chief()), ("relevant_to_any", ObjectiveConfig::relevant_to_any()), ("knockouts", ObjectiveConfig::treat_any().with_knockouts(true))] {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |b, _| b.iter(|| retrieve(&store, &o, &obj, &opts, None).unwrap().len()));
        }
        group.bench_with_input(BenchmarkId::new("naive", n), &n, |b, _| b.iter(|| naive_match(&g, &w.ontology, &ObjectiveConfig::relevant_to_any(), &opts).unwrap().len()));
    }
    group.finish();
}

criterion_group!(benches, closure, projection, store_build, retrieval);
criterion_main!(benches);

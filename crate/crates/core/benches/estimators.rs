use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use hybrid_value::dataset::generate_dataset;
use hybrid_value::learning::{fit_model_ensemble, EnsembleConfig};
use hybrid_value::par;
use hybrid_value::scenarios;
use hybrid_value::verify::{grid_run, ladder_report, GridSetup, LadderSetup};

// each group runs the same work on a one-thread pool and on the default pool
const POOLS: [(&str, usize); 2] = [("sequential", 1), ("parallel", 0)];

fn ensemble_fit(c: &mut Criterion) {
    let mdp = scenarios::rl_gridworld();
    let behavior = scenarios::medium_behavior(&mdp, 0.2, 91);
    let ds = generate_dataset(&mdp, &behavior, "medium", 200, 40, 7).unwrap();
    let cfg = EnsembleConfig::default();
    let mut g = c.benchmark_group("ensemble_fit");
    for (name, jobs) in POOLS {
        g.bench_function(name, |b| {
            b.iter(|| par::with_jobs(jobs, || fit_model_ensemble(black_box(&ds), &cfg, 3).unwrap()))
        });
    }
    g.finish();
}

fn ope_suite(c: &mut Criterion) {
    let setup = LadderSetup::default();
    let mut g = c.benchmark_group("ope_suite");
    g.sample_size(10);
    for (name, jobs) in POOLS {
        g.bench_function(name, |b| b.iter(|| par::with_jobs(jobs, || ladder_report(&setup, black_box(5)).unwrap())));
    }
    g.finish();
}

fn mohve_training(c: &mut Criterion) {
    let mut setup = GridSetup::default();
    setup.mohve.epochs = 100;
    let mut g = c.benchmark_group("mohve_training");
    g.sample_size(10);
    for (name, jobs) in POOLS {
        g.bench_function(name, |b| b.iter(|| par::with_jobs(jobs, || grid_run(&setup, black_box(5)).unwrap())));
    }
    g.finish();
}

criterion_group!(benches, ensemble_fit, ope_suite, mohve_training);
criterion_main!(benches);

//! Sequential vs rayon paths of every data-parallel loop.
//!
//! Built without the `parallel` feature both variants run sequentially,
//! which gives a baseline for the dispatch overhead.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pseudoalign::caps::accumulate_histogram_with;
use pseudoalign::detection::{BBox, Detection, PredictionBatch};
use pseudoalign::ema::{ema_closed_form_with, ema_step_with, WeightVector};
use pseudoalign::gradcheck::run_suite;
use pseudoalign::saliency::{reweight_features_with, FeatureMap, SaliencyMatrix};
use pseudoalign::sim::{generate_stream_with, sweep_static_thresholds, BetaParams, ClassProfile};
use pseudoalign::Exec;

const EXECS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn profiles() -> Vec<ClassProfile> {
    let p = |name: &str, a: f64, b: f64| ClassProfile {
        name: name.into(),
        tp_conf: BetaParams { alpha: a, beta: b },
        fp_conf: BetaParams { alpha: 2.0, beta: 6.0 },
        tp_rate: 2.0,
        fp_rate: 2.0,
        box_size: (16.0, 128.0),
    };
    vec![p("easy", 40.0, 8.0), p("hard", 12.0, 8.0)]
}

fn simulator(c: &mut Criterion) {
    let profiles = profiles();
    let mut g = c.benchmark_group("generate_stream");
    for (name, exec) in EXECS {
        g.bench_function(BenchmarkId::new(name, 5000), |b| {
            b.iter(|| generate_stream_with(&profiles, 5000, (640, 640), 1, exec).unwrap())
        });
    }
    g.finish();

    let stream = generate_stream_with(&profiles, 5000, (640, 640), 1, Exec::Parallel).unwrap();
    let thresholds: Vec<f64> = (1..20).map(|i| i as f64 / 20.0).collect();
    let mut g = c.benchmark_group("sweep_static_thresholds");
    for (name, exec) in EXECS {
        g.bench_function(BenchmarkId::new(name, thresholds.len()), |b| {
            b.iter(|| sweep_static_thresholds(black_box(&stream), &thresholds, 2, exec))
        });
    }
    g.finish();
}

fn histogram(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n_cls = 8;
    let mut batch = PredictionBatch::new("bench", (640, 640));
    for _ in 0..200_000 {
        let scores: Vec<f64> = (0..n_cls).map(|_| rng.random()).collect();
        batch.detections.push(Detection::new(BBox::new(0.0, 0.0, 8.0, 8.0), scores, rng.random()));
    }
    let mut g = c.benchmark_group("accumulate_histogram");
    for (name, exec) in EXECS {
        g.bench_function(BenchmarkId::new(name, batch.len()), |b| {
            b.iter(|| accumulate_histogram_with(black_box(&batch), n_cls, 20, exec))
        });
    }
    g.finish();
}

fn ema(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dim = 1 << 20;
    let mut vec = || WeightVector::new("bench", (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let teacher = vec();
    let students: Vec<WeightVector> = (0..8).map(|_| vec()).collect();

    let mut g = c.benchmark_group("ema_step");
    for (name, exec) in EXECS {
        g.bench_function(BenchmarkId::new(name, dim), |b| {
            b.iter(|| ema_step_with(black_box(&teacher), &students[0], 0.9996, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("ema_closed_form");
    for (name, exec) in EXECS {
        g.bench_function(BenchmarkId::new(name, students.len()), |b| {
            b.iter(|| ema_closed_form_with(black_box(&teacher), &students, 0.9996, exec).unwrap())
        });
    }
    g.finish();
}

fn reweight(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (ch, h, w) = (256, 80, 80);
    let f = FeatureMap::new(8, ch, h, w, (0..ch * h * w).map(|_| rng.random()).collect()).unwrap();
    let m = SaliencyMatrix::new(8, h, w, (0..h * w).map(|_| rng.random()).collect()).unwrap();
    let mut g = c.benchmark_group("reweight_features");
    for (name, exec) in EXECS {
        g.bench_function(BenchmarkId::new(name, ch * h * w), |b| {
            b.iter(|| reweight_features_with(black_box(&f), &m, exec).unwrap())
        });
    }
    g.finish();
}

fn gradcheck(c: &mut Criterion) {
    let mut g = c.benchmark_group("gradcheck_suite");
    g.sample_size(10);
    for (name, exec) in EXECS {
        g.bench_function(BenchmarkId::new(name, 32), |b| b.iter(|| run_suite(32, 0, 0.1, exec)));
    }
    g.finish();
}

criterion_group!(benches, simulator, histogram, ema, reweight, gradcheck);
criterion_main!(benches);

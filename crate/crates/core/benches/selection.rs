use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use streamfp::checks::random_selection_inputs;
use streamfp::coreset::select_coreset;
use streamfp::math::{batch_similarity, similarity_scores};
use streamfp::stream_sim::baselines::kcenter_coreset;
use streamfp::ExecPolicy;

const POLICIES: [(&str, ExecPolicy); 2] = [("sequential", ExecPolicy::Sequential), ("parallel", ExecPolicy::Parallel)];

fn similarity(c: &mut Criterion) {
    let mut g = c.benchmark_group("similarity");
    for b in [128, 512] {
        let (emd, pool) = random_selection_inputs(b, 4, 768, 100, 1).unwrap();
        let agg = pool.aggregate();
        for (name, policy) in POLICIES {
            g.bench_with_input(BenchmarkId::new(name, b), &b, |bch, _| {
                bch.iter(|| similarity_scores(black_box(&emd), &agg, policy).unwrap())
            });
        }
        g.bench_with_input(BenchmarkId::new("reference", b), &b, |bch, _| {
            bch.iter(|| batch_similarity(black_box(&emd), &agg).unwrap())
        });
    }
    g.finish();
}

fn kcenter(c: &mut Criterion) {
    let mut g = c.benchmark_group("kcenter");
    g.sample_size(10);
    let (emd, _) = random_selection_inputs(512, 1, 768, 1, 2).unwrap();
    for (name, policy) in POLICIES {
        g.bench_function(name, |bch| bch.iter(|| kcenter_coreset(black_box(&emd), 0.5, policy).unwrap()));
    }
    g.finish();
}

fn selectors(c: &mut Criterion) {
    let mut g = c.benchmark_group("selector");
    g.sample_size(10);
    let (emd, pool) = random_selection_inputs(512, 1, 768, 100, 3).unwrap();
    for (name, policy) in POLICIES {
        g.bench_function(BenchmarkId::new("streamfp", name), |bch| {
            bch.iter(|| {
                let s = similarity_scores(black_box(&emd), &pool.aggregate(), policy).unwrap();
                select_coreset(&s, 0.5).unwrap()
            })
        });
        g.bench_function(BenchmarkId::new("kcenter", name), |bch| {
            bch.iter(|| kcenter_coreset(black_box(&emd), 0.5, policy).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, similarity, kcenter, selectors);
criterion_main!(benches);

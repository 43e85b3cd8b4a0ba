use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use rankup::losses::{arc_labeled_loss, arc_unlabeled_fixmatch_loss, ranknet_loss, ArcLossConfig};
use rankup::model::{Layout, TwoHeadModel};
use rankup::rda::{align, interpolate_labeled_distribution};
use rankup_bench::{random_matrix, random_vec};

fn pairwise(c: &mut Criterion) {
    let mut g = c.benchmark_group("pairwise");
    for n in [32usize, 224] {
        let scores = random_vec(n, 1);
        let strong = random_vec(n, 2);
        let labels = random_vec(n, 3);
        let cfg = ArcLossConfig { tau: 0.6, ..ArcLossConfig::default() };
        g.bench_with_input(BenchmarkId::new("arc_labeled", n), &n, |b, _| {
            b.iter(|| arc_labeled_loss(black_box(&scores), black_box(&labels)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("arc_fixmatch", n), &n, |b, _| {
            b.iter(|| arc_unlabeled_fixmatch_loss(black_box(&scores), black_box(&strong), &cfg).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("ranknet", n), &n, |b, _| {
            b.iter(|| ranknet_loss(black_box(&scores), |i, j| f64::from(u8::from(labels[i] > labels[j]))))
        });
    }
    g.finish();
}

fn alignment(c: &mut Criterion) {
    let mut g = c.benchmark_group("align");
    let labels = random_vec(50, 4);
    for m in [1_000usize, 100_000] {
        let pseudo = random_vec(m, 5);
        let dist = interpolate_labeled_distribution(&labels, m).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(m), &m, |b, _| {
            b.iter(|| align(black_box(&pseudo), &dist).unwrap())
        });
    }
    g.finish();
}

fn forward_backward(c: &mut Criterion) {
    let model = TwoHeadModel::init(Layout::new(5, vec![64, 64]).unwrap(), 0);
    let x = random_matrix(256, 5, 6);
    let g_reg = random_vec(256, 7);
    let g_arc = random_vec(256, 8);
    c.bench_function("forward_backward/256x5", |b| {
        b.iter(|| {
            let f = model.forward(black_box(x.view())).unwrap();
            model.backward(&f.cache, &g_reg, &g_arc).unwrap()
        })
    });
}

criterion_group!(benches, pairwise, alignment, forward_backward);
criterion_main!(benches);

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use lesion_core::augment::{augment_images, default_pipeline};
use lesion_core::metrics::{auc, roc_curve};
use lesion_core::model::{predict_source, InputDims, Network, NetworkConfig};
use lesion_core::parallel::{map_indexed, Exec};
use lesion_core::rng::SeededRng;
use lesion_core::synthetic::blobs_vs_stripes;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench_augment(c: &mut Criterion) {
    let images: Vec<_> = blobs_vs_stripes(8, 48, 3, 1).into_iter().map(|(i, _)| i).collect();
    let p = default_pipeline();
    let mut g = c.benchmark_group("augment_images");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| augment_images(&images, 4, &p, 7, exec)));
    }
    g.finish();
}

fn bench_predict(c: &mut Criterion) {
    let data = blobs_vs_stripes(32, 16, 3, 2);
    let cfg = NetworkConfig::resnet_tiny(
        InputDims {
            height: 16,
            width: 16,
            channels: 3,
        },
        2,
    );
    let net = Network::new(cfg, 3).unwrap();
    let mut g = c.benchmark_group("predict_source");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| predict_source(&net, &data, 4, None, exec).unwrap()));
    }
    g.finish();
}

fn bench_auc(c: &mut Criterion) {
    let (n, k) = (5000, 12);
    let mut rng = SeededRng::new(4, 0);
    let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
    let scores: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| rng.unit()).collect()).collect();
    let mut g = c.benchmark_group("per_class_auc");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                map_indexed(exec, k, |c| {
                    let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
                    auc(&roc_curve(&scores[c], &positive, "class").unwrap())
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench_augment, bench_predict, bench_auc);
criterion_main!(benches);

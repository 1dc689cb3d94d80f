//! Sequential against rayon execution of the per-sample hot paths.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use promptmt::config::{Config, EncoderConfig};
use promptmt::data::{generate, GenSpec, Sample};
use promptmt::eval::evaluate;
use promptmt::model::Model;
use promptmt::numerics::kernels::{gemm, MatRef};
use promptmt::numerics::Graph;
use promptmt::par::{self, Parallelism};

const MODES: [(&str, Parallelism); 2] = [("sequential", Parallelism::Sequential), ("rayon", Parallelism::Rayon)];

fn setup() -> (Model<f32>, Vec<Sample>) {
    let mut cfg = Config::default();
    cfg.encoder = EncoderConfig {
        image_h: 32,
        image_w: 32,
        patch_size: 4,
        dim: 32,
        heads: 2,
        layers: 4,
        prompt_start: 3,
        prompt_end: 4,
        prompts: 4,
        tap_layers: vec![1, 2, 3],
        ..EncoderConfig::default()
    };
    cfg.decoder.dim = 16;
    let spec = GenSpec {
        train: 8,
        val: 0,
        height: 32,
        width: 32,
        ..GenSpec::default()
    };
    let (train, _) = generate(&spec, Parallelism::Sequential).unwrap();
    (Model::new(&cfg, 0).unwrap(), train)
}

fn forward_backward(c: &mut Criterion) {
    let (model, samples) = setup();
    let owners = model.own_prompts();
    let mut group = c.benchmark_group("sample_loss_and_grad");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                par::map(&samples, mode, |s| {
                    let mut g = Graph::new();
                    let (_, loss) = model.loss(&mut g, s, &owners).unwrap();
                    g.backward(loss.loss).unwrap();
                    g.value(loss.loss).item()
                })
            })
        });
    }
    group.finish();

    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate(&model, &samples, &owners, mode).unwrap().total_loss)
        });
    }
    group.finish();
}

fn matmul(c: &mut Criterion) {
    let n = 128;
    let mats: Vec<Vec<f32>> = (0..8)
        .map(|k| (0..n * n).map(|i| ((i * 31 + k * 7) % 17) as f32 / 17.0).collect())
        .collect();
    let mut group = c.benchmark_group("batched_gemm_128");
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                par::map(&mats, mode, |m| {
                    let mut out = vec![0.0f32; n * n];
                    gemm(MatRef::new(m, n, n, false), MatRef::new(m, n, n, true), &mut out, false);
                    black_box(out[0])
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward_backward, matmul);
criterion_main!(benches);

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dart_core::harness::{load_model, run_detector_bench, run_layer_sweep, RunConfig};
use dart_core::linalg::{vecmat_exec, Matrix};
use dart_core::model::{FfnPlan, ModelConfig};
use dart_core::Exec;
use std::hint::black_box;

const MODES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn vecmat(c: &mut Criterion) {
    let mut g = c.benchmark_group("vecmat");
    for n in [256usize, 1024, 4096] {
        let w = Matrix::from_fn(n, n, |i, j| ((i * 31 + j * 17) % 97) as f32 / 97.0 - 0.5);
        let x: Vec<f32> = (0..n).map(|i| (i % 13) as f32 / 13.0).collect();
        for (name, exec) in MODES {
            g.bench_with_input(BenchmarkId::new(name, n), &n, |b, _| {
                b.iter(|| vecmat_exec(exec, black_box(&x), black_box(&w)).unwrap())
            });
        }
    }
    g.finish();
}

fn decode(c: &mut Criterion) {
    let mut cfg = RunConfig::default();
    cfg.model.dims = ModelConfig {
        hidden_dim: 512,
        ffn_dim: 2048,
        num_heads: 8,
        num_kv_groups: 2,
        head_dim: 64,
        ..ModelConfig::toy()
    };
    let mut g = c.benchmark_group("decode_16_tokens");
    g.sample_size(10);
    for (name, exec) in MODES {
        let model = load_model(&cfg).unwrap().with_exec(exec);
        g.bench_function(name, |b| {
            b.iter(|| {
                let mut cache = model.new_cache();
                for t in 0..16 {
                    black_box(model.forward_token(t, &mut cache, FfnPlan::Dense).unwrap());
                }
            })
        });
    }
    g.finish();
}

fn layer_sweep(c: &mut Criterion) {
    let mut cfg = RunConfig::default();
    cfg.sweep.ratios = vec![0.3, 0.5, 0.7, 0.9];
    let mut g = c.benchmark_group("layer_sweep");
    g.sample_size(10);
    for (name, exec) in MODES {
        let model = load_model(&cfg).unwrap().with_exec(exec);
        g.bench_function(name, |b| b.iter(|| run_layer_sweep(&model, &cfg).unwrap()));
    }
    g.finish();
}

fn detector(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let mut g = c.benchmark_group("detector_bench");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| run_detector_bench(&cfg, exec).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, vecmat, decode, layer_sweep, detector);
criterion_main!(benches);

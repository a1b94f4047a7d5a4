//! Sequential vs rayon throughput of the batch-shaped kernels.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use latsurr::archspace::{resnet, sample_random};
use latsurr::encoding::{encode_batch, EncodingScheme};
use latsurr::lut::{build_lut, lut_predict_batch, LutConfig};
use latsurr::measurement::{oracle_means, OracleBackend, OracleParams};
use latsurr::par::Execution;
use latsurr::predictor::{MlpModel, TrainConfig};

const N: usize = 4096;

fn modes() -> Vec<(&'static str, Execution)> {
    #[cfg_attr(not(feature = "parallel"), allow(unused_mut))]
    let mut m = vec![("sequential", Execution::Sequential)];
    #[cfg(feature = "parallel")]
    m.push(("parallel", Execution::Parallel));
    m
}

fn throughput(c: &mut Criterion) {
    let spec = resnet();
    let archs = sample_random(&spec, N, 1).unwrap();
    let params = OracleParams::default();
    let xs: Vec<Vec<f64>> = encode_batch(&spec, EncodingScheme::Fcc, &archs, Execution::Sequential)
        .unwrap()
        .into_iter()
        .map(|e| e.values)
        .collect();
    let model = MlpModel::init(xs[0].len(), &TrainConfig::default(), &spec.name, EncodingScheme::Fcc).unwrap();
    let mut backend = OracleBackend::new(spec.clone(), params).unwrap();
    let lut = build_lut(&spec, &mut backend, &LutConfig { repeats: 1, ..LutConfig::default() }).unwrap();

    let mut group = c.benchmark_group("batch");
    group.throughput(Throughput::Elements(N as u64));
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::new("encode_fcc", name), &exec, |b, &e| {
            b.iter(|| encode_batch(&spec, EncodingScheme::Fcc, &archs, e).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("oracle_means", name), &exec, |b, &e| {
            b.iter(|| oracle_means(&spec, &archs, &params, e))
        });
        group.bench_with_input(BenchmarkId::new("mlp_predict", name), &exec, |b, &e| {
            b.iter(|| model.predict_batch(&xs, e).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("lut_predict", name), &exec, |b, &e| {
            b.iter(|| lut_predict_batch(&lut, &spec, &archs, e).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, throughput);
criterion_main!(benches);

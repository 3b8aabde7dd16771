use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pal::data::{generate_synthetic, SyntheticSpec};
use pal::encoder::{Encoder, EncoderConfig};
use pal::eval::{evaluate, EpisodeSpec};
use pal::par::{map_indexed, Exec};

fn episodes(c: &mut Criterion) {
    let bench = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let enc = Encoder::new(EncoderConfig::new(bench.novel.dim(), 0)).unwrap();
    let spec = EpisodeSpec { episodes: 200, ..EpisodeSpec::default() };
    let mut group = c.benchmark_group("evaluate_200_episodes");
    group.sample_size(10);
    for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| evaluate(&enc, &bench.novel, &spec, 0, exec).unwrap())
        });
    }
    group.finish();
}

fn embeddings(c: &mut Criterion) {
    let bench = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let enc = Encoder::new(EncoderConfig::new(bench.base.dim(), 0)).unwrap();
    let data = &bench.base;
    let chunk = 64;
    let chunks = data.len().div_ceil(chunk);
    let mut group = c.benchmark_group("embed_base_split");
    group.sample_size(10);
    for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                map_indexed(exec, chunks, |i| {
                    let lo = i * chunk;
                    let hi = (lo + chunk).min(data.len());
                    enc.embed_batch(&data.inputs()[lo * data.dim()..hi * data.dim()], hi - lo).unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, episodes, embeddings);
criterion_main!(benches);

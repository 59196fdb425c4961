use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use shardgraph_bench::{clustered, index_for};
use shardgraph_core::clustering::{train_kmeans, KMeansParams};
use shardgraph_core::distance::l2_squared;
use shardgraph_core::graphbuild::nn_descent;
use shardgraph_core::partitioner::partition_in_memory;
use shardgraph_core::searcher::greedy_search;
use shardgraph_core::{PartitionConfig, SearchParams};
use std::hint::black_box;

fn distance(c: &mut Criterion) {
    let mut g = c.benchmark_group("l2_squared");
    for dim in [16usize, 128, 960] {
        let a: Vec<f32> = (0..dim).map(|i| i as f32 * 0.5).collect();
        let b: Vec<f32> = (0..dim).map(|i| (dim - i) as f32).collect();
        g.throughput(Throughput::Elements(dim as u64));
        g.bench_with_input(BenchmarkId::from_parameter(dim), &dim, |bench, _| {
            bench.iter(|| l2_squared(black_box(&a), black_box(&b)))
        });
    }
    g.finish();
}

fn build(c: &mut Criterion) {
    let mut g = c.benchmark_group("nn_descent");
    g.sample_size(10);
    for n in [5_000usize, 10_000] {
        let data = clustered(n, 32);
        g.bench_with_input(BenchmarkId::from_parameter(n), &data, |bench, data| {
            bench.iter(|| nn_descent(data, 32, 12, 32, 1))
        });
    }
    g.finish();
}

fn search(c: &mut Criterion) {
    let data = clustered(20_000, 32);
    let index = index_for(&data, 32);
    let queries = clustered(256, 32);
    let mut g = c.benchmark_group("greedy_search");
    for beam in [32usize, 128] {
        let params = SearchParams::new(10, beam).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(beam), &params, |bench, p| {
            let mut i = 0;
            bench.iter(|| {
                i = (i + 1) % queries.rows();
                greedy_search(&index, &data, queries.row(i), p).unwrap()
            })
        });
    }
    g.finish();
}

fn partition(c: &mut Criterion) {
    let data = clustered(50_000, 32);
    let cs = train_kmeans(&data, &KMeansParams::with_defaults(16, data.rows(), 3)).unwrap();
    let cfg = PartitionConfig::new(16, 5_000);
    let mut g = c.benchmark_group("partition");
    g.sample_size(10);
    g.throughput(Throughput::Elements(data.rows() as u64));
    g.bench_function("50k_k16", |bench| bench.iter(|| partition_in_memory(&data, &cs, &cfg).unwrap()));
    g.finish();
}

criterion_group!(benches, distance, build, search, partition);
criterion_main!(benches);

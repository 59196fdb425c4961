//! Shared fixtures for the criterion benchmarks.

use shardgraph_core::graph::MergedIndex;
use shardgraph_core::graphbuild::{build_graph, BuildParams};
use shardgraph_core::synth;
use shardgraph_core::VectorMatrix;

pub fn clustered(n: usize, dim: usize) -> VectorMatrix {
    synth::clustered(n, dim, 32, 20.0, 42)
}

/// A single-shard graph over `data`, usable as a merged index.
pub fn index_for(data: &VectorMatrix, degree: usize) -> MergedIndex {
    let mut params = BuildParams::new(degree, degree * 2, 7);
    params.nnd_sample = degree;
    build_graph(data, &params).expect("fixture build")
}

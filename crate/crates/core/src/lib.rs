//! Partition-and-merge construction of graph-based approximate nearest
//! neighbour indexes for datasets that do not fit one worker's memory.
//!
//! The pipeline trains k-means centroids on a sample, partitions the dataset
//! into shards with selective replication ([`partitioner`]), builds a
//! fixed-degree proximity graph per shard ([`graphbuild`]), and merges the
//! shard graphs by edge union through the shard id maps ([`merger`]). Queries
//! run on the merged graph ([`searcher`]). [`fleetsched`] simulates running the
//! shard builds on a fleet of preemptible workers and prices the result.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clustering;
pub mod distance;
pub mod error;
pub mod fleetsched;
pub mod graph;
pub mod graphbuild;
pub mod merger;
pub mod partitioner;
pub mod pipeline;
pub mod searcher;
pub mod synth;
pub mod vecstore;

pub use clustering::{CentroidSet, KMeansParams};
pub use error::{Error, Result};
pub use graph::{FixedDegreeGraph, MergedIndex, ShardGraph, SENTINEL};
pub use graphbuild::BuildParams;
pub use partitioner::{PartitionConfig, PartitionPlan};
pub use pipeline::{PipelineConfig, Stage};
pub use searcher::{EvalReport, QueryResult, SearchParams};
pub use vecstore::{IdMap, ScalarKind, VectorDataset, VectorMatrix};

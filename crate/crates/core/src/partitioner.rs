//! Single-pass partitioning with selective replication.
//!
//! Vectors are read block by block. For every block the partitioner
//!
//! 1. places each vector in its nearest cluster that still has room (the
//!    primary assignment, gated only by hard capacity),
//! 2. refreshes each cluster's replica budget from the primary density seen so
//!    far, together with the radius-inflation factor `tau`,
//! 3. walks each vector's remaining clusters in ascending distance and places
//!    replicas that pass both the distance constraint `d' < eps * d` and the
//!    radius constraint `d' < eps * tau * R[c']`, until the vector sits in
//!    `omega` clusters.
//!
//! Distances inside this module are Euclidean (not squared) so that `eps`
//! scales lengths.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{ranked_centroids, CentroidSet};
use crate::error::{read_json, write_json, Error, Result};
use crate::vecstore::{
    write_idmap, DatasetWriter, IdMap, ScalarKind, VectorBlock, VectorDataset, VectorMatrix,
    DEFAULT_BLOCK_SIZE,
};

pub const DEFAULT_EPSILON: f32 = 1.2;
pub const DEFAULT_OMEGA: usize = 2;
pub const DEFAULT_THETA0: f32 = 0.4;
pub const DEFAULT_ALPHA: f32 = 1.0;

/// Bytes of graph index kept per vector when sizing shards (64 neighbours).
pub const INDEX_BYTES_PER_VECTOR: u64 = 64 * 4;
pub const FILL_FRACTION: f64 = 0.8;
pub const CAPACITY_SLACK: f64 = 1.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    /// Selectivity; larger values admit more replicas.
    pub epsilon: f32,
    /// Maximum number of shards a vector may live in, primary included.
    pub omega: usize,
    /// Base fraction of a cluster's capacity open to replicas.
    pub theta0: f32,
    /// Decay constant of the radius-inflation schedule.
    pub alpha: f32,
    pub k: usize,
    pub capacity: usize,
    pub block_size: usize,
    /// Rank centroids for the vectors of a block on the rayon pool.
    #[serde(default = "default_true")]
    pub parallel: bool,
}

fn default_true() -> bool {
    true
}

impl PartitionConfig {
    pub fn new(k: usize, capacity: usize) -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            omega: DEFAULT_OMEGA,
            theta0: DEFAULT_THETA0,
            alpha: DEFAULT_ALPHA,
            k,
            capacity,
            block_size: DEFAULT_BLOCK_SIZE,
            parallel: true,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        if self.omega == 0 {
            return Err(Error::invalid("omega must be at least 1"));
        }
        if !(self.theta0 > 0.0 && self.theta0 < 1.0) {
            return Err(Error::invalid("theta0 must lie in (0, 1)"));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::invalid("alpha must be non-negative"));
        }
        if self.k == 0 || self.block_size == 0 {
            return Err(Error::invalid("k and block_size must be positive"));
        }
        if (self.capacity as u128) * (self.k as u128) < n as u128 {
            return Err(Error::Capacity(format!(
                "k = {} clusters of capacity {} cannot hold {n} vectors",
                self.k, self.capacity
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub cluster_id: usize,
    pub size: usize,
    pub primary_count: usize,
    pub replica_count: usize,
    /// Largest primary-to-centroid distance seen so far.
    pub radius: f32,
    pub replica_budget: usize,
}

impl ClusterState {
    pub fn new(cluster_id: usize, cfg: &PartitionConfig) -> Self {
        Self {
            cluster_id,
            size: 0,
            primary_count: 0,
            replica_count: 0,
            radius: 0.0,
            replica_budget: replica_budget(cfg.theta0, cfg.capacity, cfg.k, 0.0),
        }
    }

    /// Room for one more replica (the budget and capacity half of the check).
    pub fn accepts_replica(&self, capacity: usize) -> bool {
        self.size < capacity && self.replica_count < self.replica_budget
    }
}

/// Radius-inflation factor for block `b`: `1 + alpha / (1 + b)`.
pub fn tau_schedule(block_index: usize, alpha: f32) -> f32 {
    1.0 + alpha / (1.0 + block_index as f32)
}

/// Both pruning constraints: `d' < eps * d` and `d' < eps * tau * radius`.
pub fn selective_check(d: f32, d_prime: f32, epsilon: f32, tau: f32, radius_c_prime: f32) -> bool {
    d_prime < epsilon * d && d_prime < epsilon * tau * radius_c_prime
}

/// Clusters ordered by Euclidean distance to one vector, ties to the lower id.
pub type Ranking = Vec<(usize, f32)>;

fn rank(v: &[f32], cs: &CentroidSet) -> Ranking {
    let mut r = ranked_centroids(v, cs, cs.k());
    for e in &mut r {
        e.1 = e.1.sqrt();
    }
    r
}

/// Ranks every centroid for every vector of a block.
pub fn rank_block(block: &VectorBlock, cs: &CentroidSet, parallel: bool) -> Result<Vec<Ranking>> {
    if block.vectors.dim() != cs.dim() {
        return Err(Error::DimensionMismatch {
            expected: cs.dim(),
            actual: block.vectors.dim(),
        });
    }
    let dim = cs.dim();
    let flat = block.vectors.as_flat();
    Ok(if parallel {
        flat.par_chunks(dim).map(|v| rank(v, cs)).collect()
    } else {
        flat.chunks(dim).map(|v| rank(v, cs)).collect()
    })
}

/// Places one vector given its ranking. Returns `(cluster, distance)`.
pub fn assign_primary_ranked(
    ranking: &[(usize, f32)],
    states: &mut [ClusterState],
    capacity: usize,
) -> Result<(usize, f32)> {
    let &(c, d) = ranking
        .iter()
        .find(|(c, _)| states[*c].size < capacity)
        .ok_or_else(|| Error::Capacity("every cluster is at capacity".into()))?;
    let st = &mut states[c];
    st.size += 1;
    st.primary_count += 1;
    st.radius = st.radius.max(d);
    Ok((c, d))
}

/// Places `v` in its nearest cluster below capacity. Replica budgets do not
/// gate primaries.
pub fn assign_primary(
    v: &[f32],
    cs: &CentroidSet,
    states: &mut [ClusterState],
    capacity: usize,
) -> Result<(usize, f32)> {
    if v.len() != cs.dim() {
        return Err(Error::DimensionMismatch {
            expected: cs.dim(),
            actual: v.len(),
        });
    }
    assign_primary_ranked(&rank(v, cs), states, capacity)
}

/// Replica budget for a cluster holding `share` of all primaries so far:
/// `floor(theta0 * capacity * min(1, (1/k) / share))`.
pub fn replica_budget(theta0: f32, capacity: usize, k: usize, share: f64) -> usize {
    let damping = if share > 0.0 {
        (1.0 / k as f64 / share).min(1.0)
    } else {
        1.0
    };
    // theta0 arrives as f32; 0.7f32 widens to 0.69999998.. and would floor
    // one slot short, so round through the shortest decimal form first.
    let theta0: f64 = theta0.to_string().parse().unwrap_or(theta0 as f64);
    (theta0 * capacity as f64 * damping + 1e-9).floor() as usize
}

/// Refreshes replica budgets after block `block_index` and returns `tau`.
pub fn update_block_statistics(
    states: &mut [ClusterState],
    block_index: usize,
    cfg: &PartitionConfig,
) -> f32 {
    let total: usize = states.iter().map(|s| s.primary_count).sum();
    for st in states.iter_mut() {
        let share = if total == 0 {
            0.0
        } else {
            st.primary_count as f64 / total as f64
        };
        st.replica_budget = replica_budget(cfg.theta0, cfg.capacity, cfg.k, share);
    }
    tau_schedule(block_index, cfg.alpha)
}

/// Free slots that must stay open for primaries not yet placed.
#[derive(Clone, Copy, Debug)]
pub struct PrimaryReserve {
    pub pending_primaries: usize,
}

/// Scans replica candidates for each vector of a block. Returns the replica
/// clusters per vector, in placement order. Declined replicas are silent.
pub fn assign_replicas(
    rankings: &[Ranking],
    primaries: &[(usize, f32)],
    states: &mut [ClusterState],
    cfg: &PartitionConfig,
    tau: f32,
    reserve: PrimaryReserve,
) -> Vec<Vec<usize>> {
    let mut free: usize = states.iter().map(|s| cfg.capacity - s.size).sum();
    let mut out = Vec::with_capacity(rankings.len());
    for (ranking, &(primary, d)) in rankings.iter().zip(primaries) {
        let mut replicas = Vec::new();
        let mut assigned = 1;
        for &(c, d_prime) in ranking {
            if assigned >= cfg.omega {
                break;
            }
            if free <= reserve.pending_primaries {
                break;
            }
            if c == primary {
                continue;
            }
            let st = &mut states[c];
            if st.accepts_replica(cfg.capacity)
                && selective_check(d, d_prime, cfg.epsilon, tau, st.radius)
            {
                st.size += 1;
                st.replica_count += 1;
                free -= 1;
                assigned += 1;
                replicas.push(c);
            }
        }
        out.push(replicas);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VectorAssignment {
    pub global_id: u32,
    pub primary: usize,
    pub replicas: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockAssignment {
    pub block_index: usize,
    pub tau: f32,
    pub vectors: Vec<VectorAssignment>,
}

/// Streaming driver: feed blocks in order, collect per-block assignments.
pub struct Partitioner<'a> {
    cs: &'a CentroidSet,
    cfg: PartitionConfig,
    n: usize,
    states: Vec<ClusterState>,
    primaries_done: usize,
    next_block: usize,
}

impl<'a> Partitioner<'a> {
    pub fn new(cs: &'a CentroidSet, cfg: PartitionConfig, n: usize) -> Result<Self> {
        cfg.validate(n)?;
        if cs.k() != cfg.k {
            return Err(Error::invalid(format!(
                "config says k = {} but {} centroids were given",
                cfg.k,
                cs.k()
            )));
        }
        let states = (0..cfg.k).map(|c| ClusterState::new(c, &cfg)).collect();
        Ok(Self {
            cs,
            cfg,
            n,
            states,
            primaries_done: 0,
            next_block: 0,
        })
    }

    pub fn states(&self) -> &[ClusterState] {
        &self.states
    }

    pub fn config(&self) -> &PartitionConfig {
        &self.cfg
    }

    pub fn process_block(&mut self, block: &VectorBlock) -> Result<BlockAssignment> {
        if block.start_id != self.primaries_done {
            return Err(Error::invalid(format!(
                "block starts at {} but {} vectors were processed",
                block.start_id, self.primaries_done
            )));
        }
        if self.primaries_done + block.rows() > self.n {
            return Err(Error::invalid("more vectors than announced"));
        }
        let rankings = rank_block(block, self.cs, self.cfg.parallel)?;
        let primaries = rankings
            .iter()
            .map(|r| assign_primary_ranked(r, &mut self.states, self.cfg.capacity))
            .collect::<Result<Vec<_>>>()?;
        self.primaries_done += block.rows();

        let block_index = self.next_block;
        self.next_block += 1;
        let tau = update_block_statistics(&mut self.states, block_index, &self.cfg);
        let reserve = PrimaryReserve {
            pending_primaries: self.n - self.primaries_done,
        };
        let replicas = assign_replicas(&rankings, &primaries, &mut self.states, &self.cfg, tau, reserve);

        let vectors = primaries
            .iter()
            .zip(replicas)
            .enumerate()
            .map(|(i, (&(primary, _), replicas))| VectorAssignment {
                global_id: (block.start_id + i) as u32,
                primary,
                replicas,
            })
            .collect();
        Ok(BlockAssignment {
            block_index,
            tau,
            vectors,
        })
    }
}

/// Replication summary shared by the in-memory and on-disk drivers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplicationStats {
    /// `histogram[m - 1]` counts vectors that live in exactly `m` shards.
    pub multiplicity_histogram: Vec<usize>,
    pub replicated_vectors: usize,
    pub total_replicas: usize,
    /// Fraction of vectors with at least one replica.
    pub replicated_proportion: f64,
    /// Replicas per input vector.
    pub replica_fraction: f64,
}

impl ReplicationStats {
    fn from_blocks(blocks: &[BlockAssignment], omega: usize, n: usize) -> Self {
        let mut hist = vec![0usize; omega.max(1)];
        let mut replicated = 0;
        let mut total = 0;
        for v in blocks.iter().flat_map(|b| &b.vectors) {
            hist[v.replicas.len()] += 1;
            total += v.replicas.len();
            replicated += usize::from(!v.replicas.is_empty());
        }
        let denom = n.max(1) as f64;
        Self {
            multiplicity_histogram: hist,
            replicated_vectors: replicated,
            total_replicas: total,
            replicated_proportion: replicated as f64 / denom,
            replica_fraction: total as f64 / denom,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PartitionOutcome {
    /// Global ids per shard in append order.
    pub shards: Vec<Vec<u32>>,
    pub blocks: Vec<BlockAssignment>,
    pub states: Vec<ClusterState>,
    pub stats: ReplicationStats,
}

fn collect_shards(blocks: &[BlockAssignment], k: usize) -> Vec<Vec<u32>> {
    let mut shards = vec![Vec::new(); k];
    for b in blocks {
        for v in &b.vectors {
            shards[v.primary].push(v.global_id);
        }
        for v in &b.vectors {
            for &c in &v.replicas {
                shards[c].push(v.global_id);
            }
        }
    }
    shards
}

/// Partitions an in-memory matrix, no files involved.
pub fn partition_in_memory(
    data: &VectorMatrix,
    cs: &CentroidSet,
    cfg: &PartitionConfig,
) -> Result<PartitionOutcome> {
    let n = data.rows();
    let mut p = Partitioner::new(cs, cfg.clone(), n)?;
    let mut blocks = Vec::new();
    let mut start = 0;
    while start < n {
        let rows = cfg.block_size.min(n - start);
        let ids: Vec<u32> = (start as u32..(start + rows) as u32).collect();
        let block = VectorBlock {
            start_id: start,
            vectors: data.select(&ids),
        };
        blocks.push(p.process_block(&block)?);
        start += rows;
    }
    let stats = ReplicationStats::from_blocks(&blocks, cfg.omega, n);
    Ok(PartitionOutcome {
        shards: collect_shards(&blocks, cfg.k),
        states: p.states,
        blocks,
        stats,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub shard_id: usize,
    pub count: usize,
    /// Vector file name, relative to the plan's directory.
    pub vectors: PathBuf,
    pub idmap: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub input: PathBuf,
    pub scalar: ScalarKind,
    pub n: usize,
    pub dim: usize,
    pub config: PartitionConfig,
    pub shards: Vec<ShardManifest>,
    #[serde(flatten)]
    pub stats: ReplicationStats,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

pub const PLAN_FILE: &str = "plan.json";

impl PartitionPlan {
    pub fn vectors_path(&self, shard: usize) -> PathBuf {
        self.base_dir.join(&self.shards[shard].vectors)
    }

    pub fn idmap_path(&self, shard: usize) -> PathBuf {
        self.base_dir.join(&self.shards[shard].idmap)
    }

    /// Loads `plan.json`; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut plan: PartitionPlan = read_json(path)?;
        plan.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(plan)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn replicated_proportion(&self) -> f64 {
        self.stats.replicated_proportion
    }
}

/// Partitions a dataset file into `shard_<i>.bin` / `shard_<i>.idmap` pairs
/// plus `plan.json` under `out_dir`, reading the input exactly once.
pub fn partition(
    ds: &VectorDataset,
    cs: &CentroidSet,
    cfg: &PartitionConfig,
    out_dir: impl AsRef<Path>,
) -> Result<PartitionPlan> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    if ds.dim != cs.dim() {
        return Err(Error::DimensionMismatch {
            expected: cs.dim(),
            actual: ds.dim,
        });
    }
    let mut p = Partitioner::new(cs, cfg.clone(), ds.count)?;
    let names: Vec<(PathBuf, PathBuf)> = (0..cfg.k)
        .map(|i| {
            (
                PathBuf::from(format!("shard_{i}.bin")),
                PathBuf::from(format!("shard_{i}.idmap")),
            )
        })
        .collect();
    let mut writers = names
        .iter()
        .map(|(v, _)| DatasetWriter::create(out_dir.join(v), ds.dim, ds.scalar))
        .collect::<Result<Vec<_>>>()?;
    let mut idmaps: Vec<Vec<u32>> = vec![Vec::new(); cfg.k];
    let mut blocks = Vec::new();

    for block in ds.blocks(cfg.block_size) {
        let block = block?;
        let assigned = p.process_block(&block)?;
        // Append primaries first, then replicas, matching the in-memory driver.
        for (i, v) in assigned.vectors.iter().enumerate() {
            writers[v.primary].append(block.vectors.row(i))?;
            idmaps[v.primary].push(v.global_id);
        }
        for (i, v) in assigned.vectors.iter().enumerate() {
            for &c in &v.replicas {
                writers[c].append(block.vectors.row(i))?;
                idmaps[c].push(v.global_id);
            }
        }
        blocks.push(assigned);
    }

    let mut shards = Vec::with_capacity(cfg.k);
    for (i, (w, ids)) in writers.into_iter().zip(idmaps).enumerate() {
        let written = w.finish()?;
        debug_assert_eq!(written.count, ids.len());
        write_idmap(out_dir.join(&names[i].1), &IdMap::new(ids))?;
        shards.push(ShardManifest {
            shard_id: i,
            count: written.count,
            vectors: names[i].0.clone(),
            idmap: names[i].1.clone(),
        });
    }

    let plan = PartitionPlan {
        input: ds.path.clone(),
        scalar: ds.scalar,
        n: ds.count,
        dim: ds.dim,
        config: cfg.clone(),
        shards,
        stats: ReplicationStats::from_blocks(&blocks, cfg.omega, ds.count),
        base_dir: out_dir.to_path_buf(),
    };
    plan.save(out_dir.join(PLAN_FILE))?;
    Ok(plan)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardSizing {
    pub k: usize,
    pub capacity: usize,
}

/// Picks the shard count so that each shard's vectors plus graph fit in
/// `FILL_FRACTION` of the memory budget, with `CAPACITY_SLACK` headroom on
/// per-shard capacity.
pub fn choose_k(
    n: usize,
    dim: usize,
    scalar: ScalarKind,
    memory_budget_bytes: u64,
    expected_dup: f32,
) -> Result<ShardSizing> {
    if !(expected_dup >= 1.0) {
        return Err(Error::invalid("expected_dup must be at least 1"));
    }
    let per_vector = (dim * scalar.width()) as u64 + INDEX_BYTES_PER_VECTOR;
    let usable = FILL_FRACTION * memory_budget_bytes as f64;
    if usable < per_vector as f64 {
        return Err(Error::invalid(format!(
            "memory budget of {memory_budget_bytes} bytes cannot hold one {per_vector}-byte vector"
        )));
    }
    let dup_n = n as f64 * expected_dup as f64;
    let k = ((dup_n * per_vector as f64) / usable).ceil().max(1.0) as usize;
    let capacity = ((dup_n / k as f64).ceil() * CAPACITY_SLACK).ceil().max(1.0) as usize;
    Ok(ShardSizing { k, capacity })
}

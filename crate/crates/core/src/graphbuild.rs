//! CPU shard-graph builder.
//!
//! A shard graph is built in two phases: an intermediate kNN graph of degree
//! `degree_l` (exact for small shards, NN-descent otherwise), then a
//! finalisation that unions forward and reverse edges and keeps the
//! `degree_r` closest per node.
//!
//! Every parallel step is a pure function of a snapshot, and candidate lists
//! are kept as the top entries of a total order on `(distance, id)`, so the
//! output does not depend on the number of worker threads.

use std::path::Path;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::sample_vectors;
use crate::distance::{cmp_dist_id, l2_squared};
use crate::error::{Error, Result};
use crate::graph::{ShardGraph, SENTINEL};
use crate::vecstore::{open_dataset_detect, read_idmap, VectorDataset, VectorMatrix};

/// Nodes joined per batch of NN-descent. Fixed so batching never depends on
/// the thread count.
const JOIN_BATCH: usize = 1024;
/// NN-descent stops once fewer than this fraction of list slots change.
const MIN_UPDATE_RATE: f64 = 0.001;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildParams {
    pub degree_r: usize,
    pub degree_l: usize,
    pub nnd_iters: usize,
    pub nnd_sample: usize,
    pub exact_threshold: usize,
    pub seed: u64,
    /// Refuse shards whose estimated build footprint exceeds this.
    #[serde(default)]
    pub memory_budget_bytes: Option<u64>,
}

impl BuildParams {
    pub fn new(degree_r: usize, degree_l: usize, seed: u64) -> Self {
        Self {
            degree_r,
            degree_l,
            nnd_iters: 12,
            nnd_sample: degree_l,
            exact_threshold: 2048,
            seed,
            memory_budget_bytes: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree_r == 0 || self.degree_l < self.degree_r {
            return Err(Error::invalid(format!(
                "need degree_l >= degree_r >= 1, got L = {}, R = {}",
                self.degree_l, self.degree_r
            )));
        }
        if self.exact_threshold < self.degree_l + 1 {
            return Err(Error::invalid("exact_threshold must exceed degree_l"));
        }
        if self.nnd_iters == 0 || self.nnd_sample == 0 {
            return Err(Error::invalid("nnd_iters and nnd_sample must be positive"));
        }
        Ok(())
    }

    fn footprint(&self, n: usize, dim: usize) -> u64 {
        n as u64 * (dim as u64 * 4 + self.degree_l as u64 * 9 + self.degree_r as u64 * 4)
    }
}

impl Default for BuildParams {
    fn default() -> Self {
        Self::new(64, 128, 0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub id: u32,
    pub dist: f32,
}

/// Intermediate kNN graph; each list is sorted by `(dist, id)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnGraph {
    pub degree: usize,
    pub lists: Vec<Vec<Neighbor>>,
}

impl KnnGraph {
    pub fn n(&self) -> usize {
        self.lists.len()
    }

    pub fn mean_distance(&self) -> f64 {
        let (sum, cnt) = self
            .lists
            .iter()
            .flatten()
            .fold((0.0f64, 0usize), |(s, c), nb| (s + nb.dist as f64, c + 1));
        if cnt == 0 {
            0.0
        } else {
            sum / cnt as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NnDescentTrace {
    /// Mean list distance after initialisation and after every iteration.
    pub mean_distance: Vec<f64>,
    /// List insertions performed by each iteration.
    pub updates: Vec<usize>,
}

/// Brute-force `l` nearest neighbours of every node.
pub fn exact_knn_graph(shard: &VectorMatrix, l: usize) -> KnnGraph {
    let n = shard.rows();
    let keep = l.min(n.saturating_sub(1));
    let lists = (0..n)
        .into_par_iter()
        .map(|u| {
            let q = shard.row(u);
            let mut all: Vec<Neighbor> = (0..n)
                .filter(|&v| v != u)
                .map(|v| Neighbor {
                    id: v as u32,
                    dist: l2_squared(q, shard.row(v)),
                })
                .collect();
            let order = |a: &Neighbor, b: &Neighbor| cmp_dist_id((a.dist, a.id), (b.dist, b.id));
            if keep > 0 && keep < all.len() {
                all.select_nth_unstable_by(keep - 1, order);
            }
            all.truncate(keep);
            all.sort_unstable_by(order);
            all
        })
        .collect();
    KnnGraph { degree: l, lists }
}

fn node_rng(seed: u64, round: u64, node: usize) -> ChaCha8Rng {
    let mut s = seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(round + 1);
    s ^= (node as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    ChaCha8Rng::seed_from_u64(s)
}

#[derive(Clone, Copy)]
struct Slot {
    id: u32,
    dist: f32,
    fresh: bool,
}

fn worst(list: &[Slot], cap: usize) -> (f32, u32) {
    if list.len() < cap {
        (f32::INFINITY, u32::MAX)
    } else {
        let w = list[list.len() - 1];
        (w.dist, w.id)
    }
}

/// Inserts `(id, dist)` if it beats the current worst entry. Returns whether
/// the list changed.
fn try_insert(list: &mut Vec<Slot>, cap: usize, id: u32, dist: f32) -> bool {
    if cmp_dist_id((dist, id), worst(list, cap)).is_ge() || list.iter().any(|s| s.id == id) {
        return false;
    }
    let pos = list.partition_point(|s| cmp_dist_id((s.dist, s.id), (dist, id)).is_lt());
    list.insert(pos, Slot { id, dist, fresh: true });
    list.truncate(cap);
    true
}

/// Approximate `l`-NN graph by NN-descent.
pub fn nn_descent(
    shard: &VectorMatrix,
    l: usize,
    max_iters: usize,
    sample: usize,
    seed: u64,
) -> (KnnGraph, NnDescentTrace) {
    let n = shard.rows();
    let cap = l.min(n.saturating_sub(1));
    let mut lists: Vec<Vec<Slot>> = (0..n)
        .into_par_iter()
        .map(|u| {
            let mut rng = node_rng(seed, 0, u);
            let mut list: Vec<Slot> = index::sample(&mut rng, n - 1, cap)
                .into_iter()
                .map(|x| {
                    let v = if x < u { x } else { x + 1 };
                    Slot {
                        id: v as u32,
                        dist: l2_squared(shard.row(u), shard.row(v)),
                        fresh: true,
                    }
                })
                .collect();
            list.sort_unstable_by(|a, b| cmp_dist_id((a.dist, a.id), (b.dist, b.id)));
            list
        })
        .collect();

    let mean = |lists: &[Vec<Slot>]| {
        let (s, c) = lists
            .iter()
            .flatten()
            .fold((0.0f64, 0usize), |(s, c), x| (s + x.dist as f64, c + 1));
        if c == 0 { 0.0 } else { s / c as f64 }
    };
    let mut trace = NnDescentTrace {
        mean_distance: vec![mean(&lists)],
        updates: Vec::new(),
    };

    for iter in 1..=max_iters as u64 {
        // Sample up to `sample` fresh and stale neighbours per node; sampled
        // fresh entries become stale.
        let (fwd_new, fwd_old): (Vec<Vec<u32>>, Vec<Vec<u32>>) = lists
            .par_iter_mut()
            .map(|list| {
                let mut new = Vec::new();
                let mut old = Vec::new();
                for s in list.iter_mut() {
                    if s.fresh {
                        if new.len() < sample {
                            new.push(s.id);
                            s.fresh = false;
                        }
                    } else if old.len() < sample {
                        old.push(s.id);
                    }
                }
                (new, old)
            })
            .unzip();

        let mut rev_new: Vec<Vec<u32>> = vec![Vec::new(); n];
        let mut rev_old: Vec<Vec<u32>> = vec![Vec::new(); n];
        for u in 0..n {
            for &v in &fwd_new[u] {
                rev_new[v as usize].push(u as u32);
            }
            for &v in &fwd_old[u] {
                rev_old[v as usize].push(u as u32);
            }
        }

        let join_sets: Vec<(Vec<u32>, Vec<u32>)> = (0..n)
            .into_par_iter()
            .map(|u| {
                let mut rng = node_rng(seed, iter, u);
                let mut rn = rev_new[u].clone();
                let mut ro = rev_old[u].clone();
                if rn.len() > sample {
                    rn.shuffle(&mut rng);
                    rn.truncate(sample);
                }
                if ro.len() > sample {
                    ro.shuffle(&mut rng);
                    ro.truncate(sample);
                }
                let mut new: Vec<u32> = fwd_new[u].iter().copied().chain(rn).collect();
                new.sort_unstable();
                new.dedup();
                let mut old: Vec<u32> = fwd_old[u].iter().copied().chain(ro).collect();
                old.sort_unstable();
                old.dedup();
                old.retain(|x| new.binary_search(x).is_err());
                (new, old)
            })
            .collect();
        drop(rev_new);
        drop(rev_old);

        let mut updates = 0usize;
        for batch_start in (0..n).step_by(JOIN_BATCH) {
            let batch_end = (batch_start + JOIN_BATCH).min(n);
            let snapshot = &lists;
            let mut proposals: Vec<(u32, f32, u32)> = (batch_start..batch_end)
                .into_par_iter()
                .flat_map_iter(|u| {
                    let (new, old) = &join_sets[u];
                    let mut out = Vec::new();
                    let mut consider = |a: u32, b: u32| {
                        let d = l2_squared(shard.row(a as usize), shard.row(b as usize));
                        if cmp_dist_id((d, b), worst(&snapshot[a as usize], cap)).is_lt() {
                            out.push((a, d, b));
                        }
                        if cmp_dist_id((d, a), worst(&snapshot[b as usize], cap)).is_lt() {
                            out.push((b, d, a));
                        }
                    };
                    for (i, &a) in new.iter().enumerate() {
                        for &b in &new[i + 1..] {
                            consider(a, b);
                        }
                        for &b in old {
                            consider(a, b);
                        }
                    }
                    out
                })
                .collect();
            proposals.par_sort_unstable_by(|x, y| {
                x.0.cmp(&y.0).then(cmp_dist_id((x.1, x.2), (y.1, y.2)))
            });
            updates += lists
                .par_iter_mut()
                .enumerate()
                .map(|(u, list)| {
                    let lo = proposals.partition_point(|p| (p.0 as usize) < u);
                    let hi = proposals.partition_point(|p| (p.0 as usize) <= u);
                    proposals[lo..hi]
                        .iter()
                        .filter(|&&(_, d, src)| try_insert(list, cap, src, d))
                        .count()
                })
                .sum::<usize>();
        }
        trace.updates.push(updates);
        trace.mean_distance.push(mean(&lists));
        if (updates as f64) < MIN_UPDATE_RATE * (n * cap) as f64 {
            break;
        }
    }

    let lists = lists
        .into_iter()
        .map(|l| l.into_iter().map(|s| Neighbor { id: s.id, dist: s.dist }).collect())
        .collect();
    (KnnGraph { degree: l, lists }, trace)
}

/// Builds the intermediate `degree_l` graph, exactly for small shards.
pub fn build_knn_graph(shard: &VectorMatrix, params: &BuildParams) -> Result<KnnGraph> {
    build_knn_graph_traced(shard, params).map(|(g, _)| g)
}

pub fn build_knn_graph_traced(
    shard: &VectorMatrix,
    params: &BuildParams,
) -> Result<(KnnGraph, Option<NnDescentTrace>)> {
    params.validate()?;
    let n = shard.rows();
    if n < 2 {
        return Err(Error::invalid(format!("a kNN graph needs at least 2 vectors, got {n}")));
    }
    if n <= params.exact_threshold {
        Ok((exact_knn_graph(shard, params.degree_l), None))
    } else {
        let (g, t) = nn_descent(
            shard,
            params.degree_l,
            params.nnd_iters,
            params.nnd_sample,
            params.seed,
        );
        Ok((g, Some(t)))
    }
}

/// Index of the vector nearest the mean, ties to the lower id.
pub fn medoid_approx(shard: &VectorMatrix) -> Option<u32> {
    let n = shard.rows();
    if n == 0 {
        return None;
    }
    let dim = shard.dim();
    let mut sum = vec![0.0f64; dim];
    for row in shard.iter() {
        for (s, &x) in sum.iter_mut().zip(row) {
            *s += x as f64;
        }
    }
    let mean: Vec<f32> = sum.iter().map(|s| (s / n as f64) as f32).collect();
    (0..n)
        .map(|i| (l2_squared(&mean, shard.row(i)), i as u32))
        .min_by(|a, b| cmp_dist_id(*a, *b))
        .map(|(_, i)| i)
}

/// Unions forward and reverse kNN edges per node and keeps the `degree_r`
/// closest.
pub fn finalize_graph(knn: &KnnGraph, shard: &VectorMatrix, params: &BuildParams) -> Result<ShardGraph> {
    let n = knn.n();
    if n != shard.rows() {
        return Err(Error::invalid("kNN graph and shard disagree on size"));
    }
    let max_len = knn.lists.iter().map(Vec::len).max().unwrap_or(0);
    if knn.degree < params.degree_r && max_len < n.saturating_sub(1) {
        return Err(Error::invalid(format!(
            "intermediate degree {} is below degree_r {}",
            knn.degree, params.degree_r
        )));
    }
    let mut reverse: Vec<Vec<Neighbor>> = vec![Vec::new(); n];
    for (u, list) in knn.lists.iter().enumerate() {
        for nb in list {
            reverse[nb.id as usize].push(Neighbor { id: u as u32, dist: nb.dist });
        }
    }
    let rows: Vec<Vec<u32>> = (0..n)
        .into_par_iter()
        .map(|u| {
            let mut cand: Vec<Neighbor> = knn.lists[u].iter().chain(&reverse[u]).copied().collect();
            cand.sort_unstable_by(|a, b| cmp_dist_id((a.dist, a.id), (b.dist, b.id)));
            cand.dedup_by_key(|c| c.id);
            cand.iter()
                .map(|c| c.id)
                .filter(|&id| id as usize != u)
                .take(params.degree_r)
                .collect()
        })
        .collect();
    let mut g = ShardGraph::empty(n, params.degree_r);
    for (u, row) in rows.iter().enumerate() {
        g.set_row(u, row);
    }
    g.entry_point = medoid_approx(shard).unwrap_or(SENTINEL);
    Ok(g)
}

/// Builds a graph over an in-memory shard, handling shards too small for a
/// kNN graph.
pub fn build_graph(shard: &VectorMatrix, params: &BuildParams) -> Result<ShardGraph> {
    params.validate()?;
    match shard.rows() {
        0 => Ok(ShardGraph::empty(0, params.degree_r)),
        1 => Ok(ShardGraph::empty(1, params.degree_r)),
        _ => {
            let knn = build_knn_graph(shard, params)?;
            finalize_graph(&knn, shard, params)
        }
    }
}

/// Loads one shard, builds its graph and writes it to `out_path`.
pub fn build_shard(
    shard_path: impl AsRef<Path>,
    idmap_path: impl AsRef<Path>,
    params: &BuildParams,
    out_path: impl AsRef<Path>,
) -> Result<ShardGraph> {
    let ds = open_dataset_detect(shard_path)?;
    let idmap = read_idmap(idmap_path)?;
    if idmap.len() != ds.count {
        return Err(Error::invalid(format!(
            "id map has {} entries but the shard has {} vectors",
            idmap.len(),
            ds.count
        )));
    }
    if let Some(budget) = params.memory_budget_bytes {
        let need = params.footprint(ds.count, ds.dim);
        if need > budget {
            return Err(Error::Capacity(format!(
                "shard of {} vectors needs ~{need} bytes, budget is {budget}",
                ds.count
            )));
        }
    }
    let shard = ds.read_all()?;
    let g = build_graph(&shard, params)?;
    g.save(out_path)?;
    Ok(g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub size: usize,
    /// Mean wall time over the repeats.
    pub seconds: f64,
    pub stddev: f64,
    pub runs: usize,
}

/// Times throwaway builds on seeded samples of the dataset.
pub fn micro_benchmark(
    ds: &VectorDataset,
    params: &BuildParams,
    sample_sizes: &[usize],
    repeats: usize,
) -> Result<Vec<BenchPoint>> {
    let repeats = repeats.max(1);
    let mut out = Vec::with_capacity(sample_sizes.len());
    for &size in sample_sizes {
        if size > ds.count {
            return Err(Error::invalid(format!(
                "sample of {size} exceeds dataset of {}",
                ds.count
            )));
        }
        let mut times = Vec::with_capacity(repeats);
        for r in 0..repeats {
            let sample = sample_vectors(ds, size, params.seed.wrapping_add(r as u64))?;
            let start = Instant::now();
            let g = build_graph(&sample, params)?;
            times.push(start.elapsed().as_secs_f64());
            std::hint::black_box(g);
        }
        let mean = times.iter().sum::<f64>() / repeats as f64;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / repeats as f64;
        out.push(BenchPoint {
            size,
            seconds: mean,
            stddev: var.sqrt(),
            runs: repeats,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(n: usize, dim: usize, seed: u64) -> VectorMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VectorMatrix::from_flat(dim, (0..n * dim).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn complete_case_lists_every_other_node() {
        let m = random_matrix(9, 4, 1);
        let g = exact_knn_graph(&m, 8);
        for (u, list) in g.lists.iter().enumerate() {
            let mut ids: Vec<u32> = list.iter().map(|x| x.id).collect();
            ids.sort();
            let expect: Vec<u32> = (0..9).filter(|&v| v != u as u32).collect();
            assert_eq!(ids, expect);
        }
    }

    #[test]
    fn needs_two_vectors() {
        let m = random_matrix(1, 4, 1);
        assert!(build_knn_graph(&m, &BuildParams::new(2, 4, 0)).is_err());
        let g = build_graph(&m, &BuildParams::new(2, 4, 0)).unwrap();
        assert_eq!(g.n, 1);
        assert_eq!(g.neighbors(0).count(), 0);
    }

    #[test]
    fn finalize_without_reverse_additions_is_top_r() {
        // Points on a line; with R = L every reverse edge is already forward.
        let m = VectorMatrix::from_rows(1, &[[0.0f32], [1.0], [2.0]]).unwrap();
        let p = BuildParams { exact_threshold: 10, ..BuildParams::new(2, 2, 0) };
        let knn = build_knn_graph(&m, &p).unwrap();
        let g = finalize_graph(&knn, &m, &p).unwrap();
        for u in 0..3 {
            let top: Vec<u32> = knn.lists[u].iter().map(|x| x.id).take(2).collect();
            assert_eq!(g.neighbors(u).collect::<Vec<_>>(), top);
        }
        assert_eq!(g.entry_point, 1);
    }

    #[test]
    fn node_without_in_edges_keeps_forward_list() {
        // Node 3 is far away; nobody lists it among their top-1.
        let m = VectorMatrix::from_rows(1, &[[0.0f32], [1.0], [2.5], [100.0]]).unwrap();
        let p = BuildParams { exact_threshold: 10, ..BuildParams::new(1, 1, 0) };
        let knn = build_knn_graph(&m, &p).unwrap();
        assert!(knn.lists.iter().all(|l| l[0].id != 3));
        let g = finalize_graph(&knn, &m, &p).unwrap();
        assert_eq!(g.neighbors(3).collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn params_validation() {
        assert!(BuildParams::new(8, 4, 0).validate().is_err());
        assert!(BuildParams::new(0, 4, 0).validate().is_err());
        let mut p = BuildParams::new(4, 8, 0);
        p.exact_threshold = 8;
        assert!(p.validate().is_err());
        p.exact_threshold = 9;
        assert!(p.validate().is_ok());
    }

    #[test]
    fn nn_descent_is_thread_count_independent() {
        let m = random_matrix(3000, 8, 5);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| nn_descent(&m, 12, 4, 12, 9).0)
        };
        assert_eq!(run(1), run(4));
    }
}

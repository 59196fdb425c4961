//! Query execution over a fixed-degree graph, exact ground truth, and
//! recall / throughput measurement.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::{cmp_dist_id, l2_squared};
use crate::error::{Error, Result};
use crate::graph::FixedDegreeGraph;
use crate::vecstore::{IdMap, VectorMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchParams {
    pub topk: usize,
    /// Candidate pool size.
    pub beam: usize,
}

impl SearchParams {
    pub fn new(topk: usize, beam: usize) -> Result<Self> {
        let p = Self { topk, beam };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if self.topk == 0 || self.beam < self.topk {
            return Err(Error::invalid(format!(
                "need beam >= topk >= 1, got topk = {}, beam = {}",
                self.topk, self.beam
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub ids: Vec<u32>,
    pub distances: Vec<f32>,
    pub n_distance_computations: usize,
    pub n_expanded: usize,
}

struct VisitedSet(Vec<u64>);

impl VisitedSet {
    fn new(n: usize) -> Self {
        Self(vec![0; n.div_ceil(64)])
    }

    /// Marks `id`; returns whether it was new.
    fn insert(&mut self, id: u32) -> bool {
        let (w, b) = (id as usize / 64, id % 64);
        let fresh = self.0[w] & (1 << b) == 0;
        self.0[w] |= 1 << b;
        fresh
    }
}

/// Best-first search from the graph's entry point with a pool of `beam`
/// candidates; stops once every pooled candidate has been expanded.
pub fn greedy_search(
    index: &FixedDegreeGraph,
    data: &VectorMatrix,
    q: &[f32],
    params: &SearchParams,
) -> Result<QueryResult> {
    params.validate()?;
    if index.n == 0 || index.entry_point as usize >= index.n {
        return Err(Error::invalid("cannot search an empty index"));
    }
    if data.rows() != index.n {
        return Err(Error::invalid(format!(
            "index has {} nodes but {} vectors were supplied",
            index.n,
            data.rows()
        )));
    }
    if q.len() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dim(),
            actual: q.len(),
        });
    }

    let mut visited = VisitedSet::new(index.n);
    let entry = index.entry_point;
    visited.insert(entry);
    // (distance, id, expanded), sorted by (distance, id).
    let mut pool: Vec<(f32, u32, bool)> = Vec::with_capacity(params.beam + 1);
    pool.push((l2_squared(q, data.row(entry as usize)), entry, false));
    let mut computed = 1;
    let mut expanded = 0;

    // Everything before `cursor` has been expanded.
    let mut cursor = 0;
    loop {
        while cursor < pool.len() && pool[cursor].2 {
            cursor += 1;
        }
        if cursor == pool.len() {
            break;
        }
        let pos = cursor;
        pool[pos].2 = true;
        expanded += 1;
        let node = pool[pos].1 as usize;
        for nb in index.neighbors(node) {
            if !visited.insert(nb) {
                continue;
            }
            let d = l2_squared(q, data.row(nb as usize));
            computed += 1;
            if pool.len() == params.beam {
                let last = pool[pool.len() - 1];
                if cmp_dist_id((d, nb), (last.0, last.1)).is_ge() {
                    continue;
                }
            }
            let at = pool.partition_point(|c| cmp_dist_id((c.0, c.1), (d, nb)).is_lt());
            pool.insert(at, (d, nb, false));
            pool.truncate(params.beam);
            cursor = cursor.min(at);
        }
    }

    pool.truncate(params.topk);
    Ok(QueryResult {
        ids: pool.iter().map(|c| c.1).collect(),
        distances: pool.iter().map(|c| c.0).collect(),
        n_distance_computations: computed,
        n_expanded: expanded,
    })
}

/// Exact top-k per query, ascending by distance with ties to the lower id.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub k: usize,
    pub ids: Vec<Vec<u32>>,
    pub distances: Vec<Vec<f32>>,
}

impl GroundTruth {
    pub fn queries(&self) -> usize {
        self.ids.len()
    }

    /// BIGANN-style layout: `nq`, `k`, then `nq * k` ids, then `nq * k`
    /// distances, all little-endian.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let nq = self.queries();
        let mut buf = Vec::with_capacity(8 + 8 * nq * self.k);
        buf.extend_from_slice(&(nq as u32).to_le_bytes());
        buf.extend_from_slice(&(self.k as u32).to_le_bytes());
        for row in &self.ids {
            for id in row {
                buf.extend_from_slice(&id.to_le_bytes());
            }
        }
        for row in &self.distances {
            for d in row {
                buf.extend_from_slice(&d.to_le_bytes());
            }
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 8 {
            return Err(Error::format(path, "ground-truth file shorter than its header"));
        }
        let nq = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let k = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() != 8 + 8 * nq * k {
            return Err(Error::format(path, "ground-truth length disagrees with header"));
        }
        let words: Vec<[u8; 4]> = bytes[8..].chunks_exact(4).map(|c| c.try_into().unwrap()).collect();
        let (id_words, dist_words) = words.split_at(nq * k);
        let ids = id_words.chunks(k.max(1)).map(|r| r.iter().map(|w| u32::from_le_bytes(*w)).collect()).collect();
        let distances = dist_words
            .chunks(k.max(1))
            .map(|r| r.iter().map(|w| f32::from_le_bytes(*w)).collect())
            .collect();
        Ok(Self { k, ids, distances })
    }
}

pub fn exact_knn(data: &VectorMatrix, queries: &VectorMatrix, k: usize) -> Result<GroundTruth> {
    if k > data.rows() {
        return Err(Error::invalid(format!("k = {k} exceeds {} vectors", data.rows())));
    }
    if queries.dim() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dim(),
            actual: queries.dim(),
        });
    }
    let rows: Vec<Vec<(f32, u32)>> = queries
        .as_flat()
        .par_chunks(queries.dim())
        .map(|q| {
            let mut all: Vec<(f32, u32)> = data
                .iter()
                .enumerate()
                .map(|(i, v)| (l2_squared(q, v), i as u32))
                .collect();
            if k > 0 && k < all.len() {
                all.select_nth_unstable_by(k - 1, |a, b| cmp_dist_id(*a, *b));
            }
            all.truncate(k);
            all.sort_unstable_by(|a, b| cmp_dist_id(*a, *b));
            all
        })
        .collect();
    Ok(GroundTruth {
        k,
        ids: rows.iter().map(|r| r.iter().map(|x| x.1).collect()).collect(),
        distances: rows.iter().map(|r| r.iter().map(|x| x.0).collect()).collect(),
    })
}

/// Mean over queries of `|retrieved ∩ truth[..k]| / k`.
pub fn recall_at_k(retrieved: &[Vec<u32>], gt: &GroundTruth, k: usize) -> Result<f64> {
    if retrieved.len() != gt.queries() {
        return Err(Error::invalid(format!(
            "{} result lists for {} ground-truth queries",
            retrieved.len(),
            gt.queries()
        )));
    }
    if k == 0 || gt.k < k {
        return Err(Error::invalid(format!("ground truth holds {} ids per query, need {k}", gt.k)));
    }
    if retrieved.is_empty() {
        return Ok(0.0);
    }
    let total: usize = retrieved
        .iter()
        .zip(&gt.ids)
        .map(|(got, truth)| {
            let truth = &truth[..k];
            got.iter().take(k).filter(|id| truth.contains(id)).count()
        })
        .sum();
    Ok(total as f64 / (k * retrieved.len()) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub queries: usize,
    pub topk: usize,
    pub beam: usize,
    pub recall_at_k: f64,
    pub mean_distance_computations: f64,
    pub qps: f64,
    pub mean_latency_ms: f64,
}

impl EvalReport {
    /// The fields that do not depend on wall-clock time.
    pub fn deterministic_part(&self) -> (usize, usize, usize, f64, f64) {
        (
            self.queries,
            self.topk,
            self.beam,
            self.recall_at_k,
            self.mean_distance_computations,
        )
    }
}

fn evaluate_with<F>(queries: &VectorMatrix, gt: &GroundTruth, params: &SearchParams, search: F) -> Result<EvalReport>
where
    F: Fn(&[f32]) -> Result<QueryResult> + Sync,
{
    params.validate()?;
    if gt.queries() != queries.rows() {
        return Err(Error::invalid(format!(
            "{} queries but ground truth covers {}",
            queries.rows(),
            gt.queries()
        )));
    }
    let start = Instant::now();
    let results: Vec<(QueryResult, f64)> = queries
        .as_flat()
        .par_chunks(queries.dim().max(1))
        .map(|q| {
            let t = Instant::now();
            let r = search(q)?;
            Ok((r, t.elapsed().as_secs_f64() * 1e3))
        })
        .collect::<Result<_>>()?;
    let wall = start.elapsed().as_secs_f64();

    let nq = results.len();
    let ids: Vec<Vec<u32>> = results.iter().map(|(r, _)| r.ids.clone()).collect();
    let recall = recall_at_k(&ids, gt, params.topk)?;
    let denom = nq.max(1) as f64;
    Ok(EvalReport {
        queries: nq,
        topk: params.topk,
        beam: params.beam,
        recall_at_k: recall,
        mean_distance_computations: results.iter().map(|(r, _)| r.n_distance_computations as f64).sum::<f64>() / denom,
        qps: if wall > 0.0 { nq as f64 / wall } else { f64::INFINITY },
        mean_latency_ms: results.iter().map(|(_, ms)| ms).sum::<f64>() / denom,
    })
}

/// Runs every query on the merged index and scores it against `gt`.
pub fn evaluate(
    index: &FixedDegreeGraph,
    data: &VectorMatrix,
    queries: &VectorMatrix,
    gt: &GroundTruth,
    params: &SearchParams,
) -> Result<EvalReport> {
    evaluate_with(queries, gt, params, |q| greedy_search(index, data, q, params))
}

/// One shard as seen by split-only search.
#[derive(Clone, Debug)]
pub struct SplitShard {
    pub graph: FixedDegreeGraph,
    pub vectors: VectorMatrix,
    pub idmap: IdMap,
}

/// Searches each shard independently and re-ranks the union of their
/// results into the global top-k.
pub fn split_only_search(shards: &[SplitShard], q: &[f32], params: &SearchParams) -> Result<QueryResult> {
    let mut pooled: Vec<(f32, u32)> = Vec::new();
    let mut computed = 0;
    let mut expanded = 0;
    for shard in shards.iter().filter(|s| s.graph.n > 0) {
        let r = greedy_search(&shard.graph, &shard.vectors, q, params)?;
        computed += r.n_distance_computations;
        expanded += r.n_expanded;
        pooled.extend(r.distances.iter().zip(&r.ids).map(|(&d, &l)| (d, shard.idmap.global(l as usize))));
    }
    if pooled.is_empty() && shards.iter().all(|s| s.graph.n == 0) {
        return Err(Error::invalid("cannot search an empty index"));
    }
    pooled.sort_unstable_by(|a, b| cmp_dist_id(*a, *b));
    pooled.dedup_by_key(|x| x.1);
    pooled.truncate(params.topk);
    Ok(QueryResult {
        ids: pooled.iter().map(|x| x.1).collect(),
        distances: pooled.iter().map(|x| x.0).collect(),
        n_distance_computations: computed,
        n_expanded: expanded,
    })
}

pub fn evaluate_split(
    shards: &[SplitShard],
    queries: &VectorMatrix,
    gt: &GroundTruth,
    params: &SearchParams,
) -> Result<EvalReport> {
    evaluate_with(queries, gt, params, |q| split_only_search(shards, q, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize) -> (FixedDegreeGraph, VectorMatrix) {
        let data = VectorMatrix::from_flat(1, (0..n).map(|i| i as f32).collect()).unwrap();
        let mut g = FixedDegreeGraph::empty(n, 2);
        for u in 0..n {
            let mut row = Vec::new();
            if u > 0 {
                row.push(u as u32 - 1);
            }
            if u + 1 < n {
                row.push(u as u32 + 1);
            }
            g.set_row(u, &row);
        }
        (g, data)
    }

    #[test]
    fn finds_indexed_vector_and_counts() {
        let (g, data) = line(50);
        let p = SearchParams::new(3, 4).unwrap();
        let r = greedy_search(&g, &data, &[37.0], &p).unwrap();
        assert_eq!(r.ids[0], 37);
        assert_eq!(r.distances[0], 0.0);
        assert_eq!(r.ids, vec![37, 36, 38]);
        assert!(r.n_distance_computations <= r.n_expanded * g.degree + 1);
    }

    #[test]
    fn params_and_empty_index() {
        assert!(SearchParams::new(5, 4).is_err());
        assert!(SearchParams::new(0, 4).is_err());
        let g = FixedDegreeGraph::empty(0, 2);
        let p = SearchParams::new(1, 1).unwrap();
        assert!(greedy_search(&g, &VectorMatrix::new(1), &[0.0], &p).is_err());
    }

    #[test]
    fn exact_knn_basics() {
        let data = VectorMatrix::from_rows(1, &[[3.0f32], [1.0], [2.0], [1.0]]).unwrap();
        let q = VectorMatrix::from_rows(1, &[[2.0f32]]).unwrap();
        let gt = exact_knn(&data, &q, 4).unwrap();
        assert_eq!(gt.ids[0], vec![2, 0, 1, 3]);
        assert!(exact_knn(&data, &q, 5).is_err());
    }

    #[test]
    fn recall_edge_cases() {
        let gt = GroundTruth { k: 2, ids: vec![vec![1, 2]], distances: vec![vec![0.0, 1.0]] };
        assert_eq!(recall_at_k(&gt.ids, &gt, 2).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[vec![7, 8]], &gt, 2).unwrap(), 0.0);
        assert_eq!(recall_at_k(&[vec![2, 9]], &gt, 2).unwrap(), 0.5);
        assert!(recall_at_k(&[], &gt, 2).is_err());
        assert!(recall_at_k(&gt.ids, &gt, 3).is_err());
    }

    #[test]
    fn gt_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let gt = GroundTruth { k: 2, ids: vec![vec![1, 2], vec![0, 3]], distances: vec![vec![0.0, 1.5], vec![2.0, 4.0]] };
        let p = dir.path().join("gt.bin");
        gt.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 8 + 2 * 2 * 8);
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(GroundTruth::load(&p).unwrap(), gt);
    }

    #[test]
    fn single_shard_split_matches_greedy() {
        let (g, data) = line(30);
        let shard = SplitShard { graph: g.clone(), vectors: data.clone(), idmap: IdMap::new((0..30).collect()) };
        let p = SearchParams::new(5, 8).unwrap();
        let a = greedy_search(&g, &data, &[12.2], &p).unwrap();
        let b = split_only_search(&[shard], &[12.2], &p).unwrap();
        assert_eq!(a, b);
    }
}

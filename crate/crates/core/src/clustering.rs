//! Sampled k-means used to seed the partitioner.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::distance::{cmp_dist_id, l2_squared};
use crate::error::{Error, Result};
use crate::vecstore::{open_dataset, write_dataset, ScalarKind, VectorDataset, VectorMatrix};

#[derive(Clone, Debug, PartialEq)]
pub struct CentroidSet {
    pub centroids: VectorMatrix,
}

impl CentroidSet {
    pub fn new(centroids: VectorMatrix) -> Result<Self> {
        if centroids.rows() == 0 {
            return Err(Error::invalid("a centroid set needs at least one centroid"));
        }
        Ok(Self { centroids })
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.dim()
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        self.centroids.row(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_dataset(path, &self.centroids, ScalarKind::F32).map(|_| ())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ds = open_dataset(path, ScalarKind::F32)?;
        Self::new(ds.read_all()?)
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub sample_size: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub tol: f32,
}

impl KMeansParams {
    /// Defaults for a dataset of `n` vectors: `min(n, 256 k)` samples,
    /// 15 Lloyd rounds, relative tolerance `1e-4`.
    pub fn with_defaults(k: usize, n: usize, seed: u64) -> Self {
        Self {
            k,
            sample_size: n.min(256 * k),
            max_iters: 15,
            seed,
            tol: 1e-4,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if self.sample_size < self.k {
            return Err(Error::invalid(format!(
                "sample_size {} is smaller than k = {}",
                self.sample_size, self.k
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::invalid("tol must be non-negative"));
        }
        Ok(())
    }
}

/// Uniform sample without replacement, gathered with one sequential pass over
/// the file. Rows come back in sampled (random) order.
pub fn sample_vectors(ds: &VectorDataset, sample_size: usize, seed: u64) -> Result<VectorMatrix> {
    if sample_size > ds.count {
        return Err(Error::invalid(format!(
            "cannot sample {sample_size} of {} vectors",
            ds.count
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, ds.count, sample_size).into_vec();
    let mut order: Vec<(usize, usize)> = picks.iter().enumerate().map(|(pos, &id)| (id, pos)).collect();
    order.sort_unstable();

    let mut out = vec![0.0f32; sample_size * ds.dim];
    let block_size = crate::vecstore::DEFAULT_BLOCK_SIZE;
    let mut cursor = order.iter().peekable();
    for b in 0..ds.num_blocks(block_size) {
        let Some(&&(next, _)) = cursor.peek() else { break };
        let (lo, hi) = (b * block_size, ((b + 1) * block_size).min(ds.count));
        if next >= hi {
            continue;
        }
        let block = ds.read_block(b, block_size)?;
        while let Some(&&(id, pos)) = cursor.peek() {
            if id >= hi {
                break;
            }
            out[pos * ds.dim..(pos + 1) * ds.dim].copy_from_slice(block.vectors.row(id - lo));
            cursor.next();
        }
    }
    VectorMatrix::from_flat(ds.dim, out)
}

/// The `m` nearest centroids of `v`, ascending by squared distance, ties to
/// the lower cluster id.
pub fn nearest_centroids(v: &[f32], cs: &CentroidSet, m: usize) -> Result<Vec<(usize, f32)>> {
    if v.len() != cs.dim() {
        return Err(Error::DimensionMismatch {
            expected: cs.dim(),
            actual: v.len(),
        });
    }
    if m > cs.k() {
        return Err(Error::invalid(format!("asked for {m} of {} centroids", cs.k())));
    }
    Ok(ranked_centroids(v, cs, m))
}

pub(crate) fn ranked_centroids(v: &[f32], cs: &CentroidSet, m: usize) -> Vec<(usize, f32)> {
    let mut all: Vec<(usize, f32)> = cs
        .centroids
        .iter()
        .enumerate()
        .map(|(c, row)| (c, l2_squared(v, row)))
        .collect();
    let order = |a: &(usize, f32), b: &(usize, f32)| cmp_dist_id((a.1, a.0 as u32), (b.1, b.0 as u32));
    if m < all.len() && m > 0 {
        all.select_nth_unstable_by(m - 1, order);
        all.truncate(m);
    } else {
        all.truncate(m);
    }
    all.sort_unstable_by(order);
    all
}

fn nearest_index(v: &[f32], centroids: &VectorMatrix) -> (usize, f32) {
    let mut best = (0usize, f32::INFINITY);
    for (c, row) in centroids.iter().enumerate() {
        let d = l2_squared(v, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn count_distinct(sample: &VectorMatrix, stop_at: usize) -> usize {
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    for row in sample.iter() {
        seen.insert(row.iter().map(|x| x.to_bits()).collect());
        if seen.len() >= stop_at {
            break;
        }
    }
    seen.len()
}

/// Trains `k` centroids on `sample`.
pub fn train_kmeans(sample: &VectorMatrix, params: &KMeansParams) -> Result<CentroidSet> {
    train_kmeans_traced(sample, params).map(|(cs, _)| cs)
}

/// Like [`train_kmeans`], also returning the distortion measured at every
/// assignment step.
pub fn train_kmeans_traced(
    sample: &VectorMatrix,
    params: &KMeansParams,
) -> Result<(CentroidSet, Vec<f64>)> {
    params.validate()?;
    if sample.rows() < params.k {
        return Err(Error::invalid(format!(
            "sample has {} rows, need at least k = {}",
            sample.rows(),
            params.k
        )));
    }
    if count_distinct(sample, params.k) < params.k {
        return Err(Error::invalid(format!(
            "sample has fewer than k = {} distinct points",
            params.k
        )));
    }
    if sample.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::invalid("sample contains non-finite values"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centroids = seed_plus_plus(sample, params.k, &mut rng);
    let dim = sample.dim();
    let mut history = Vec::with_capacity(params.max_iters);
    let mut labels: Vec<(usize, f32)>;

    for _ in 0..params.max_iters {
        labels = sample
            .as_flat()
            .par_chunks(dim)
            .map(|row| nearest_index(row, &centroids))
            .collect();
        // Summed in row order so the value does not depend on thread count.
        let distortion: f64 = labels.iter().map(|&(_, d)| d as f64).sum();
        let prev = history.last().copied();
        history.push(distortion);
        if let Some(prev) = prev {
            if prev <= 0.0 || (prev - distortion) / prev < params.tol as f64 {
                break;
            }
        }
        if distortion == 0.0 {
            break;
        }
        centroids = update_centroids(sample, &labels, params.k);
    }
    Ok((CentroidSet::new(centroids)?, history))
}

fn seed_plus_plus(sample: &VectorMatrix, k: usize, rng: &mut ChaCha8Rng) -> VectorMatrix {
    let n = sample.rows();
    let mut centroids = VectorMatrix::with_capacity(sample.dim(), k);
    let first = rng.gen_range(0..n);
    centroids.push(sample.row(first)).unwrap();
    let mut d2: Vec<f64> = sample
        .iter()
        .map(|r| l2_squared(r, sample.row(first)) as f64)
        .collect();
    while centroids.rows() < k {
        let total: f64 = d2.iter().sum();
        // Enough distinct points exist, so total > 0 until k are chosen.
        let mut target = rng.gen::<f64>() * total;
        let mut pick = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 && target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        if d2[pick] == 0.0 {
            // Rounding pushed us past the end; fall back to the farthest point.
            pick = (0..n)
                .max_by(|&a, &b| d2[a].total_cmp(&d2[b]).then(b.cmp(&a)))
                .unwrap();
        }
        centroids.push(sample.row(pick)).unwrap();
        let c = centroids.rows() - 1;
        for (i, row) in sample.iter().enumerate() {
            let d = l2_squared(row, centroids.row(c)) as f64;
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

fn update_centroids(sample: &VectorMatrix, labels: &[(usize, f32)], k: usize) -> VectorMatrix {
    let dim = sample.dim();
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (row, &(c, _)) in sample.iter().zip(labels) {
        counts[c] += 1;
        for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row) {
            *s += x as f64;
        }
    }
    let mut out = vec![0.0f32; k * dim];
    for c in 0..k {
        if counts[c] > 0 {
            for j in 0..dim {
                out[c * dim + j] = (sums[c * dim + j] / counts[c] as f64) as f32;
            }
        }
    }
    let mut centroids = VectorMatrix::from_flat(dim, out).unwrap();

    // Empty clusters take the point of the largest cluster farthest from its
    // old centroid. Each reseed uses a fresh point.
    let mut taken = HashSet::new();
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let largest = (0..k).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap();
        let far = labels
            .iter()
            .enumerate()
            .filter(|(i, &(l, _))| l == largest && !taken.contains(i))
            .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i);
        if let Some(i) = far {
            taken.insert(i);
            let dst = &mut centroids.flat_mut()[c * dim..(c + 1) * dim];
            dst.copy_from_slice(sample.row(i));
            counts[largest] -= 1;
            counts[c] = 1;
        }
    }
    centroids
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(points: &[[f32; 2]]) -> VectorMatrix {
        VectorMatrix::from_rows(2, points).unwrap()
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let s = grid(&[[0., 0.], [2., 0.], [4., 6.]]);
        let cs = train_kmeans(&s, &KMeansParams { k: 1, sample_size: 3, max_iters: 5, seed: 1, tol: 0.0 }).unwrap();
        assert!((cs.centroid(0)[0] - 2.0).abs() < 1e-6);
        assert!((cs.centroid(0)[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn k_equal_to_distinct_points_gives_zero_distortion() {
        let s = grid(&[[0., 0.], [5., 5.], [0., 0.], [9., 1.], [5., 5.]]);
        let (cs, hist) = train_kmeans_traced(
            &s,
            &KMeansParams { k: 3, sample_size: 5, max_iters: 10, seed: 7, tol: 0.0 },
        )
        .unwrap();
        assert_eq!(*hist.last().unwrap(), 0.0);
        let mut got: Vec<(u32, u32)> = cs.centroids.iter().map(|r| (r[0] as u32, r[1] as u32)).collect();
        got.sort();
        assert_eq!(got, vec![(0, 0), (5, 5), (9, 1)]);
    }

    #[test]
    fn too_few_distinct_points() {
        let s = grid(&[[1., 1.], [1., 1.], [1., 1.]]);
        let err = train_kmeans(&s, &KMeansParams { k: 2, sample_size: 3, max_iters: 3, seed: 0, tol: 0.0 });
        assert!(err.is_err());
    }

    #[test]
    fn nearest_centroids_order_and_ties() {
        let cs = CentroidSet::new(grid(&[[0., 0.], [1., 0.], [-1., 0.], [3., 3.]])).unwrap();
        let r = nearest_centroids(&[3., 3.], &cs, 1).unwrap();
        assert_eq!(r, vec![(3, 0.0)]);
        // Centroids 1 and 2 are equidistant from the origin.
        let r = nearest_centroids(&[0., 0.], &cs, 4).unwrap();
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert!(nearest_centroids(&[0., 0., 0.], &cs, 1).is_err());
        assert!(nearest_centroids(&[0., 0.], &cs, 5).is_err());
    }

    #[test]
    fn params_validation() {
        let s = grid(&[[0., 0.], [1., 1.]]);
        let bad = KMeansParams { k: 3, sample_size: 2, max_iters: 1, seed: 0, tol: 0.0 };
        assert!(train_kmeans(&s, &bad).is_err());
        let bad = KMeansParams { k: 1, sample_size: 2, max_iters: 0, seed: 0, tol: 0.0 };
        assert!(train_kmeans(&s, &bad).is_err());
    }
}

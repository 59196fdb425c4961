//! Edge-union merge of shard graphs into one global index.
//!
//! For every global id the merged row is the union of that vector's rows in
//! every shard it lives in, mapped to global ids. Rows are ordered by exact
//! distance (ties to the lower id) and truncated to the shard degree.
//!
//! Shard files are read through [`ShardBufferCache`], which keeps one aligned
//! block of records per shard in memory and reloads only when a request falls
//! outside it. Reads may therefore arrive in any order, which is what lets
//! shards be written in a different order than the original dataset.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::{cmp_dist_id, l2_squared};
use crate::error::{Error, Result};
use crate::graph::{parse_header, MergedIndex, GRAPH_HEADER_BYTES, SENTINEL};
use crate::partitioner::PartitionPlan;
use crate::vecstore::{decode_payload, open_dataset_detect, read_idmap, IdMap, ScalarKind, HEADER_BYTES};

pub const DEFAULT_BUFFER_BYTES: usize = 64 << 20;
/// Global ids handled per merge work item.
const MERGE_CHUNK: usize = 4096;

/// Global id to every `(shard, local id)` it occupies, shard-ascending.
pub type Homes = Vec<Vec<(u32, u32)>>;

pub fn invert_idmaps(idmaps: &[IdMap], n: usize) -> Result<Homes> {
    let mut homes: Homes = vec![Vec::new(); n];
    for (s, map) in idmaps.iter().enumerate() {
        for (local, &g) in map.local_to_global.iter().enumerate() {
            let entry = homes.get_mut(g as usize).ok_or_else(|| {
                Error::invalid(format!("shard {s} maps to global id {g}, beyond n = {n}"))
            })?;
            if entry.last().is_some_and(|&(last, _)| last == s as u32) {
                return Err(Error::invalid(format!(
                    "global id {g} appears twice in shard {s}"
                )));
            }
            entry.push((s as u32, local as u32));
        }
    }
    if let Some(g) = homes.iter().position(Vec::is_empty) {
        return Err(Error::invalid(format!("global id {g} is not covered by any shard")));
    }
    Ok(homes)
}

/// Block-buffered random access to a file of fixed-size records.
pub struct ShardBufferCache {
    path: PathBuf,
    file: File,
    header_bytes: u64,
    record_bytes: usize,
    records: usize,
    block_records: usize,
    lo: usize,
    hi: usize,
    buffer: Vec<u8>,
    loads: usize,
}

impl ShardBufferCache {
    fn open(
        path: &Path,
        header_bytes: u64,
        record_bytes: usize,
        records: usize,
        buffer_bytes: usize,
    ) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let block_records = (buffer_bytes / record_bytes.max(1)).max(1);
        Ok(Self {
            path: path.to_path_buf(),
            file,
            header_bytes,
            record_bytes,
            records,
            block_records,
            lo: 0,
            hi: 0,
            buffer: Vec::new(),
            loads: 0,
        })
    }

    /// Opens a shard graph file; records are adjacency rows.
    pub fn open_graph(path: impl AsRef<Path>, buffer_bytes: usize) -> Result<(Self, GraphHeader)> {
        let path = path.as_ref();
        let mut head = [0u8; GRAPH_HEADER_BYTES as usize];
        let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
        f.read_exact(&mut head)
            .map_err(|_| Error::format(path, "file shorter than the graph header"))?;
        let (n, degree, entry_point) = parse_header(path, &head)?;
        let len = f.metadata().map_err(|e| Error::io(path, e))?.len();
        if len != GRAPH_HEADER_BYTES + 4 * (n * degree) as u64 {
            return Err(Error::format(path, "graph file length disagrees with its header"));
        }
        let cache = Self::open(path, GRAPH_HEADER_BYTES, 4 * degree, n, buffer_bytes)?;
        Ok((cache, GraphHeader { n, degree, entry_point }))
    }

    /// Opens a shard vector file; records are vectors.
    pub fn open_vectors(path: impl AsRef<Path>, buffer_bytes: usize) -> Result<(Self, ScalarKind, usize)> {
        let ds = open_dataset_detect(path)?;
        let cache = Self::open(
            &ds.path,
            HEADER_BYTES,
            ds.dim * ds.scalar.width(),
            ds.count,
            buffer_bytes,
        )?;
        Ok((cache, ds.scalar, ds.dim))
    }

    /// Number of block loads so far.
    pub fn loads(&self) -> usize {
        self.loads
    }

    pub fn buffered_range(&self) -> (usize, usize) {
        (self.lo, self.hi)
    }

    /// Returns record `idx`, reloading the aligned block that contains it
    /// when it lies outside the buffered range.
    pub fn read_record(&mut self, idx: usize) -> Result<&[u8]> {
        if idx >= self.records {
            return Err(Error::invalid(format!(
                "record {idx} out of range for {} ({} records)",
                self.path.display(),
                self.records
            )));
        }
        if !(self.lo <= idx && idx < self.hi) {
            let lo = idx / self.block_records * self.block_records;
            let hi = (lo + self.block_records).min(self.records);
            self.buffer.resize((hi - lo) * self.record_bytes, 0);
            self.file
                .seek(SeekFrom::Start(self.header_bytes + (lo * self.record_bytes) as u64))
                .and_then(|_| self.file.read_exact(&mut self.buffer))
                .map_err(|e| Error::io(&self.path, e))?;
            self.lo = lo;
            self.hi = hi;
            self.loads += 1;
        }
        let off = (idx - self.lo) * self.record_bytes;
        Ok(&self.buffer[off..off + self.record_bytes])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphHeader {
    pub n: usize,
    pub degree: usize,
    pub entry_point: u32,
}

/// Reads one adjacency row (sentinel padding included) through the cache.
pub fn buffered_read_row(cache: &mut ShardBufferCache, local: usize) -> Result<Vec<u32>> {
    Ok(cache
        .read_record(local)?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn buffered_read_vector(cache: &mut ShardBufferCache, scalar: ScalarKind, local: usize) -> Result<Vec<f32>> {
    Ok(decode_payload(cache.read_record(local)?, scalar))
}

/// The three files that make up one built shard.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardFiles {
    pub graph: PathBuf,
    pub idmap: PathBuf,
    pub vectors: PathBuf,
}

#[derive(Clone, Debug)]
pub struct MergeOptions {
    /// Buffer size per shard stream, in bytes.
    pub buffer_bytes: usize,
}

impl Default for MergeOptions {
    fn default() -> Self {
        Self {
            buffer_bytes: DEFAULT_BUFFER_BYTES,
        }
    }
}

struct ShardMeta {
    header: GraphHeader,
    idmap: IdMap,
    scalar: ScalarKind,
}

/// Per-worker readers, opened on first use.
struct Streams<'a> {
    files: &'a [ShardFiles],
    buffer_bytes: usize,
    graphs: Vec<Option<ShardBufferCache>>,
    vectors: Vec<Option<ShardBufferCache>>,
}

impl<'a> Streams<'a> {
    fn new(files: &'a [ShardFiles], buffer_bytes: usize) -> Self {
        Self {
            files,
            buffer_bytes,
            graphs: (0..files.len()).map(|_| None).collect(),
            vectors: (0..files.len()).map(|_| None).collect(),
        }
    }

    fn row(&mut self, shard: usize, local: usize) -> Result<Vec<u32>> {
        if self.graphs[shard].is_none() {
            let (c, _) = ShardBufferCache::open_graph(&self.files[shard].graph, self.buffer_bytes)?;
            self.graphs[shard] = Some(c);
        }
        buffered_read_row(self.graphs[shard].as_mut().unwrap(), local)
    }

    fn vector(&mut self, shard: usize, scalar: ScalarKind, local: usize) -> Result<Vec<f32>> {
        if self.vectors[shard].is_none() {
            let (c, _, _) = ShardBufferCache::open_vectors(&self.files[shard].vectors, self.buffer_bytes)?;
            self.vectors[shard] = Some(c);
        }
        buffered_read_vector(self.vectors[shard].as_mut().unwrap(), scalar, local)
    }
}

/// Merges shard graphs over `n` global vectors.
pub fn merge(shards: &[ShardFiles], n: usize, degree_r: usize, opts: &MergeOptions) -> Result<MergedIndex> {
    if shards.is_empty() {
        return Err(Error::invalid("nothing to merge"));
    }
    let mut metas = Vec::with_capacity(shards.len());
    for (s, f) in shards.iter().enumerate() {
        let (_, header) = ShardBufferCache::open_graph(&f.graph, 0)?;
        if header.degree != degree_r {
            return Err(Error::invalid(format!(
                "shard {s} has degree {}, expected {degree_r}",
                header.degree
            )));
        }
        let idmap = read_idmap(&f.idmap)?;
        if idmap.len() != header.n {
            return Err(Error::invalid(format!(
                "shard {s}: graph has {} nodes but id map has {} entries",
                header.n,
                idmap.len()
            )));
        }
        let vectors = open_dataset_detect(&f.vectors)?;
        if vectors.count != header.n {
            return Err(Error::invalid(format!("shard {s}: vector file and graph disagree on size")));
        }
        metas.push(ShardMeta {
            header,
            idmap,
            scalar: vectors.scalar,
        });
    }
    let idmaps: Vec<IdMap> = metas.iter().map(|m| m.idmap.clone()).collect();
    let homes = invert_idmaps(&idmaps, n)?;

    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(MERGE_CHUNK)
        .map(|lo| (lo, (lo + MERGE_CHUNK).min(n)))
        .collect();
    let rows: Vec<Vec<Vec<u32>>> = chunks
        .par_iter()
        .map(|&(lo, hi)| {
            let mut streams = Streams::new(shards, opts.buffer_bytes);
            (lo..hi)
                .map(|g| merged_row(g, &homes[g], &metas, &mut streams, degree_r))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut index = MergedIndex::empty(n, degree_r);
    for (g, row) in rows.into_iter().flatten().enumerate() {
        index.set_row(g, &row);
    }
    let largest = (0..metas.len())
        .max_by(|&a, &b| metas[a].header.n.cmp(&metas[b].header.n).then(b.cmp(&a)))
        .unwrap();
    let m = &metas[largest];
    index.entry_point = if m.header.n == 0 {
        SENTINEL
    } else {
        m.idmap.global(m.header.entry_point as usize)
    };
    Ok(index)
}

fn merged_row(
    g: usize,
    homes: &[(u32, u32)],
    metas: &[ShardMeta],
    streams: &mut Streams<'_>,
    degree_r: usize,
) -> Result<Vec<u32>> {
    // (global, shard, local) for every mapped neighbour.
    let mut cand: Vec<(u32, u32, u32)> = Vec::new();
    for &(s, local) in homes {
        let meta = &metas[s as usize];
        for nb in streams.row(s as usize, local as usize)? {
            if nb == SENTINEL {
                break;
            }
            let global = meta.idmap.global(nb as usize);
            if global as usize != g {
                cand.push((global, s, nb));
            }
        }
    }
    cand.sort_unstable();
    cand.dedup_by_key(|c| c.0);

    let (s0, l0) = homes[0];
    let me = streams.vector(s0 as usize, metas[s0 as usize].scalar, l0 as usize)?;
    let mut scored = Vec::with_capacity(cand.len());
    for (global, s, local) in cand {
        let v = streams.vector(s as usize, metas[s as usize].scalar, local as usize)?;
        scored.push((l2_squared(&me, &v), global));
    }
    scored.sort_unstable_by(|a, b| cmp_dist_id(*a, *b));
    scored.truncate(degree_r);
    Ok(scored.into_iter().map(|(_, id)| id).collect())
}

/// Graph file name used for shard `i` inside a graphs directory.
pub fn shard_graph_name(i: usize) -> String {
    format!("shard_{i}.graph")
}

/// Resolves the shard files named by a partition plan.
pub fn plan_shard_files(plan: &PartitionPlan, graphs_dir: impl AsRef<Path>) -> Vec<ShardFiles> {
    (0..plan.shards.len())
        .map(|i| ShardFiles {
            graph: graphs_dir.as_ref().join(shard_graph_name(i)),
            idmap: plan.idmap_path(i),
            vectors: plan.vectors_path(i),
        })
        .collect()
}

/// Merges every shard of a plan; the degree comes from the graph headers.
pub fn merge_plan(plan: &PartitionPlan, graphs_dir: impl AsRef<Path>, opts: &MergeOptions) -> Result<MergedIndex> {
    let files = plan_shard_files(plan, graphs_dir);
    let first = files
        .first()
        .ok_or_else(|| Error::invalid("plan has no shards"))?;
    let (_, header) = ShardBufferCache::open_graph(&first.graph, 0)?;
    merge(&files, plan.n, header.degree, opts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectivityReport {
    pub n: usize,
    /// Nodes reachable from the entry point along directed edges.
    pub reachable_from_entry: usize,
    /// Weakly connected components.
    pub components: usize,
}

impl ConnectivityReport {
    pub fn fully_reachable(&self) -> bool {
        self.reachable_from_entry == self.n
    }
}

pub fn connectivity_report(index: &MergedIndex) -> ConnectivityReport {
    let n = index.n;
    let mut seen = vec![false; n];
    let mut reachable = 0;
    if (index.entry_point as usize) < n {
        let mut queue = VecDeque::from([index.entry_point]);
        seen[index.entry_point as usize] = true;
        while let Some(u) = queue.pop_front() {
            reachable += 1;
            for v in index.neighbors(u as usize) {
                if !std::mem::replace(&mut seen[v as usize], true) {
                    queue.push_back(v);
                }
            }
        }
    }

    let mut parent: Vec<u32> = (0..n as u32).collect();
    fn find(parent: &mut [u32], mut x: u32) -> u32 {
        while parent[x as usize] != x {
            let up = parent[parent[x as usize] as usize];
            parent[x as usize] = up;
            x = up;
        }
        x
    }
    let mut components = n;
    for u in 0..n {
        for v in index.neighbors(u) {
            let (a, b) = (find(&mut parent, u as u32), find(&mut parent, v));
            if a != b {
                parent[a.max(b) as usize] = a.min(b);
                components -= 1;
            }
        }
    }
    ConnectivityReport {
        n,
        reachable_from_entry: reachable,
        components,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::FixedDegreeGraph;
    use crate::vecstore::{write_dataset, write_idmap, VectorMatrix};

    fn write_shard(dir: &Path, i: usize, g: &FixedDegreeGraph, ids: &[u32], vectors: &VectorMatrix) -> ShardFiles {
        let f = ShardFiles {
            graph: dir.join(format!("g{i}")),
            idmap: dir.join(format!("m{i}")),
            vectors: dir.join(format!("v{i}")),
        };
        g.save(&f.graph).unwrap();
        write_idmap(&f.idmap, &IdMap::new(ids.to_vec())).unwrap();
        write_dataset(&f.vectors, vectors, ScalarKind::F32).unwrap();
        f
    }

    #[test]
    fn invert_examples() {
        let homes = invert_idmaps(&[IdMap::new(vec![0, 1, 2])], 3).unwrap();
        assert_eq!(homes, vec![vec![(0, 0)], vec![(0, 1)], vec![(0, 2)]]);

        let maps = [IdMap::new(vec![0, 1]), IdMap::new(vec![2]), IdMap::new(vec![]), IdMap::new(vec![1])];
        let homes = invert_idmaps(&maps, 3).unwrap();
        assert_eq!(homes[1], vec![(0, 1), (3, 0)]);
        assert!(invert_idmaps(&[IdMap::new(vec![0])], 2).is_err());
        assert!(invert_idmaps(&[IdMap::new(vec![0, 0])], 1).is_err());
    }

    #[test]
    fn buffer_state_check_loads() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = FixedDegreeGraph::empty(10, 2);
        for u in 0..10 {
            g.set_row(u, &[((u + 1) % 10) as u32]);
        }
        g.save(dir.path().join("g")).unwrap();
        // Two rows of 8 bytes per 16-byte block.
        let (mut c, h) = ShardBufferCache::open_graph(dir.path().join("g"), 16).unwrap();
        assert_eq!(h, GraphHeader { n: 10, degree: 2, entry_point: 0 });
        buffered_read_row(&mut c, 2).unwrap();
        buffered_read_row(&mut c, 3).unwrap();
        assert_eq!(c.loads(), 1);
        buffered_read_row(&mut c, 4).unwrap();
        assert_eq!(c.loads(), 2);
        assert_eq!(c.buffered_range(), (4, 6));
        assert_eq!(buffered_read_row(&mut c, 9).unwrap(), vec![0, SENTINEL]);
        assert!(buffered_read_row(&mut c, 10).is_err());
    }

    #[test]
    fn union_of_two_homes() {
        let dir = tempfile::tempdir().unwrap();
        // Global ids 0..4 on a line; g = 0 lives in both shards.
        let pts = VectorMatrix::from_rows(1, &[[0.0f32], [1.0], [2.0], [3.0]]).unwrap();
        let mut g0 = FixedDegreeGraph::empty(3, 3);
        g0.set_row(0, &[1, 2]); // -> globals {1, 2}
        g0.set_row(1, &[0]);
        g0.set_row(2, &[0]);
        let f0 = write_shard(dir.path(), 0, &g0, &[0, 1, 2], &pts.select(&[0, 1, 2]));
        let mut g1 = FixedDegreeGraph::empty(2, 3);
        g1.set_row(0, &[1]); // local 0 is global 3 here
        g1.set_row(1, &[0]);
        let f1 = write_shard(dir.path(), 1, &g1, &[3, 0], &pts.select(&[3, 0]));
        let merged = merge(&[f0, f1], 4, 3, &MergeOptions::default()).unwrap();
        assert_eq!(merged.neighbors(0).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(merged.neighbors(3).collect::<Vec<_>>(), vec![0]);
        assert_eq!(merged.entry_point, 0);
        merged.validate().unwrap();
    }

    #[test]
    fn degree_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let pts = VectorMatrix::from_rows(1, &[[0.0f32], [1.0]]).unwrap();
        let g = FixedDegreeGraph::empty(2, 2);
        let f = write_shard(dir.path(), 0, &g, &[0, 1], &pts);
        assert!(merge(&[f], 2, 3, &MergeOptions::default()).is_err());
    }

    #[test]
    fn connectivity_counts() {
        let mut g = FixedDegreeGraph::empty(4, 3);
        for u in 0..4u32 {
            let others: Vec<u32> = (0..4).filter(|&v| v != u).collect();
            g.set_row(u as usize, &others);
        }
        assert_eq!(
            connectivity_report(&g),
            ConnectivityReport { n: 4, reachable_from_entry: 4, components: 1 }
        );
        let mut g = FixedDegreeGraph::empty(4, 1);
        g.set_row(0, &[1]);
        g.set_row(2, &[3]);
        let r = connectivity_report(&g);
        assert_eq!((r.reachable_from_entry, r.components), (2, 2));
        assert!(!r.fully_reachable());
    }
}

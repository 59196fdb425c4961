//! Fixed-degree adjacency arrays and their on-disk layout.
//!
//! File layout: `n`, `degree`, `entry_point` as little-endian `u32`, then
//! `n * degree` little-endian `u32` neighbour ids. Unused slots hold
//! [`SENTINEL`] and only ever appear at the tail of a row.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};

pub const SENTINEL: u32 = u32::MAX;
pub const GRAPH_HEADER_BYTES: u64 = 12;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixedDegreeGraph {
    pub n: usize,
    pub degree: usize,
    pub entry_point: u32,
    pub adjacency: Vec<u32>,
}

/// A graph over one shard; ids are shard-local.
pub type ShardGraph = FixedDegreeGraph;
/// The merged graph; ids are global.
pub type MergedIndex = FixedDegreeGraph;

impl FixedDegreeGraph {
    pub fn empty(n: usize, degree: usize) -> Self {
        Self {
            n,
            degree,
            entry_point: if n == 0 { SENTINEL } else { 0 },
            adjacency: vec![SENTINEL; n * degree],
        }
    }

    /// Raw row including sentinel padding.
    pub fn row(&self, node: usize) -> &[u32] {
        &self.adjacency[node * self.degree..(node + 1) * self.degree]
    }

    /// Real neighbours of `node`.
    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = u32> + '_ {
        self.row(node).iter().copied().take_while(|&x| x != SENTINEL)
    }

    pub fn set_row(&mut self, node: usize, ids: &[u32]) {
        assert!(ids.len() <= self.degree, "row longer than degree");
        let row = &mut self.adjacency[node * self.degree..(node + 1) * self.degree];
        row[..ids.len()].copy_from_slice(ids);
        row[ids.len()..].fill(SENTINEL);
    }

    /// Checks the structural invariants: ids in range, no self loops, no
    /// duplicates, padding only at the tail.
    pub fn validate(&self) -> Result<()> {
        if self.adjacency.len() != self.n * self.degree {
            return Err(Error::invalid("adjacency length does not match n * degree"));
        }
        if self.n > 0 && self.entry_point as usize >= self.n {
            return Err(Error::invalid(format!("entry point {} out of range", self.entry_point)));
        }
        let mut seen = HashSet::with_capacity(self.degree);
        for u in 0..self.n {
            seen.clear();
            let mut padded = false;
            for &v in self.row(u) {
                if v == SENTINEL {
                    padded = true;
                    continue;
                }
                if padded {
                    return Err(Error::invalid(format!("node {u}: id after padding")));
                }
                if v as usize >= self.n {
                    return Err(Error::invalid(format!("node {u}: neighbour {v} out of range")));
                }
                if v as usize == u {
                    return Err(Error::invalid(format!("node {u}: self loop")));
                }
                if !seen.insert(v) {
                    return Err(Error::invalid(format!("node {u}: duplicate neighbour {v}")));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(12 + 4 * self.adjacency.len());
        buf.extend_from_slice(&(self.n as u32).to_le_bytes());
        buf.extend_from_slice(&(self.degree as u32).to_le_bytes());
        buf.extend_from_slice(&self.entry_point.to_le_bytes());
        for &id in &self.adjacency {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if self.n > u32::MAX as usize - 1 || self.degree > u32::MAX as usize {
            return Err(Error::invalid("graph too large for the u32 file format"));
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (n, degree, entry_point) = parse_header(path, &bytes)?;
        let expected = GRAPH_HEADER_BYTES as usize + 4 * n * degree;
        if bytes.len() != expected {
            return Err(Error::format(
                path,
                format!("header implies {expected} bytes, file has {}", bytes.len()),
            ));
        }
        let adjacency = bytes[12..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            n,
            degree,
            entry_point,
            adjacency,
        })
    }
}

pub(crate) fn parse_header(path: &Path, bytes: &[u8]) -> Result<(usize, usize, u32)> {
    if bytes.len() < GRAPH_HEADER_BYTES as usize {
        return Err(Error::format(path, "file shorter than the 12-byte graph header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    Ok((word(0) as usize, word(1) as usize, word(2)))
}

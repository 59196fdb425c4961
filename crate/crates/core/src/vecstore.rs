//! Vector datasets on disk.
//!
//! Every vector file starts with an 8-byte header of two little-endian `u32`
//! values, the vector count `n` and the dimension `d`, followed by `n * d`
//! row-major scalars. Scalars are either `u8` or little-endian `f32`; on read
//! everything is promoted to `f32`.
//!
//! Id-map files reuse the same header with `d = 1` and carry one `u32` global
//! id per shard-local slot.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER_BYTES: u64 = 8;
pub const DEFAULT_BLOCK_SIZE: usize = 65_536;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarKind {
    U8,
    F32,
}

impl ScalarKind {
    pub fn width(self) -> usize {
        match self {
            ScalarKind::U8 => 1,
            ScalarKind::F32 => 4,
        }
    }
}

impl fmt::Display for ScalarKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScalarKind::U8 => "u8",
            ScalarKind::F32 => "f32",
        })
    }
}

impl FromStr for ScalarKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "u8" | "uint8" => Ok(ScalarKind::U8),
            "f32" | "float" | "float32" => Ok(ScalarKind::F32),
            other => Err(Error::invalid(format!("unknown scalar kind {other:?}"))),
        }
    }
}

/// Dense row-major `f32` matrix. Rows are vectors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VectorMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl VectorMatrix {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_flat(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            if !data.is_empty() {
                return Err(Error::invalid("zero dimension with non-empty payload"));
            }
        } else if data.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "payload of {} values is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows<R: AsRef<[f32]>>(dim: usize, rows: &[R]) -> Result<Self> {
        let mut m = Self::with_capacity(dim, rows.len());
        for r in rows {
            m.push(r.as_ref())?;
        }
        Ok(m)
    }

    pub fn with_capacity(dim: usize, rows: usize) -> Self {
        Self {
            dim,
            data: Vec::with_capacity(dim * rows),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        // chunks_exact panics on zero; an empty matrix has no rows anyway.
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f32> {
        self.data
    }

    /// Gathers the given rows into a new matrix.
    pub fn select(&self, ids: &[u32]) -> VectorMatrix {
        let mut m = VectorMatrix::with_capacity(self.dim, ids.len());
        for &id in ids {
            m.data.extend_from_slice(self.row(id as usize));
        }
        m
    }
}

/// A vector file on disk, described by its header.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VectorDataset {
    pub path: PathBuf,
    pub count: usize,
    pub dim: usize,
    pub scalar: ScalarKind,
}

/// A contiguous run of vectors read from a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorBlock {
    pub start_id: usize,
    pub vectors: VectorMatrix,
}

impl VectorBlock {
    pub fn rows(&self) -> usize {
        self.vectors.rows()
    }
}

fn read_header(path: &Path, file: &mut File) -> Result<(u32, u32)> {
    let mut header = [0u8; HEADER_BYTES as usize];
    file.read_exact(&mut header)
        .map_err(|_| Error::format(path, "file shorter than the 8-byte header"))?;
    let n = u32::from_le_bytes(header[0..4].try_into().unwrap());
    let d = u32::from_le_bytes(header[4..8].try_into().unwrap());
    Ok((n, d))
}

/// Opens a vector file and validates its header against the file length.
pub fn open_dataset(path: impl AsRef<Path>, scalar: ScalarKind) -> Result<VectorDataset> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let (n, d) = read_header(path, &mut file)?;
    if d == 0 {
        return Err(Error::format(path, "dimension must be positive"));
    }
    let expected = HEADER_BYTES + n as u64 * d as u64 * scalar.width() as u64;
    if len != expected {
        return Err(Error::format(
            path,
            format!("header (n={n}, d={d}, {scalar}) implies {expected} bytes, file has {len}"),
        ));
    }
    Ok(VectorDataset {
        path: path.to_path_buf(),
        count: n as usize,
        dim: d as usize,
        scalar,
    })
}

/// Opens a vector file, inferring the scalar kind from the file length.
///
/// Files with `n = 0` are ambiguous and are reported as `f32`.
pub fn open_dataset_detect(path: impl AsRef<Path>) -> Result<VectorDataset> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let (n, d) = read_header(path, &mut file)?;
    let cells = n as u64 * d as u64;
    let payload = len.saturating_sub(HEADER_BYTES);
    let scalar = if cells == 0 || payload == cells * 4 {
        ScalarKind::F32
    } else if payload == cells {
        ScalarKind::U8
    } else {
        return Err(Error::format(
            path,
            format!("payload of {payload} bytes fits neither u8 nor f32 for n={n}, d={d}"),
        ));
    };
    open_dataset(path, scalar)
}

impl VectorDataset {
    fn row_bytes(&self) -> usize {
        self.dim * self.scalar.width()
    }

    pub fn num_blocks(&self, block_size: usize) -> usize {
        self.count.div_ceil(block_size.max(1))
    }

    /// Reads `rows` vectors starting at `start`. Each call opens its own
    /// handle, so concurrent readers never share a cursor.
    pub fn read_rows(&self, start: usize, rows: usize) -> Result<VectorMatrix> {
        if start + rows > self.count {
            return Err(Error::invalid(format!(
                "rows [{start}, {}) out of range for {} vectors",
                start + rows,
                self.count
            )));
        }
        let mut file = File::open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        file.seek(SeekFrom::Start(HEADER_BYTES + (start * self.row_bytes()) as u64))
            .map_err(|e| Error::io(&self.path, e))?;
        let mut raw = vec![0u8; rows * self.row_bytes()];
        file.read_exact(&mut raw)
            .map_err(|_| Error::format(&self.path, "short read"))?;
        let data = decode_payload(&raw, self.scalar);
        VectorMatrix::from_flat(self.dim, data)
    }

    pub fn read_block(&self, block_index: usize, block_size: usize) -> Result<VectorBlock> {
        if block_size == 0 {
            return Err(Error::invalid("block_size must be positive"));
        }
        let start = block_index
            .checked_mul(block_size)
            .filter(|&s| s < self.count)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "block {block_index} of size {block_size} is past the end of {} vectors",
                    self.count
                ))
            })?;
        let rows = block_size.min(self.count - start);
        Ok(VectorBlock {
            start_id: start,
            vectors: self.read_rows(start, rows)?,
        })
    }

    pub fn blocks(&self, block_size: usize) -> impl Iterator<Item = Result<VectorBlock>> + '_ {
        (0..self.num_blocks(block_size)).map(move |b| self.read_block(b, block_size))
    }

    pub fn read_all(&self) -> Result<VectorMatrix> {
        self.read_rows(0, self.count)
    }
}

pub(crate) fn decode_payload(raw: &[u8], scalar: ScalarKind) -> Vec<f32> {
    match scalar {
        ScalarKind::U8 => raw.iter().map(|&b| b as f32).collect(),
        ScalarKind::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    }
}

fn encode_row(row: &[f32], scalar: ScalarKind, out: &mut Vec<u8>) -> std::result::Result<(), f32> {
    match scalar {
        ScalarKind::U8 => {
            for &v in row {
                if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                    return Err(v);
                }
                out.push(v as u8);
            }
        }
        ScalarKind::F32 => {
            for &v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(())
}

/// Incremental writer for vector files; the header count is patched on `finish`.
pub struct DatasetWriter {
    path: PathBuf,
    out: BufWriter<File>,
    dim: usize,
    scalar: ScalarKind,
    count: usize,
    scratch: Vec<u8>,
}

impl DatasetWriter {
    pub fn create(path: impl AsRef<Path>, dim: usize, scalar: ScalarKind) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if dim == 0 || dim > u32::MAX as usize {
            return Err(Error::invalid(format!("unsupported dimension {dim}")));
        }
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(&0u32.to_le_bytes())
            .and_then(|_| out.write_all(&(dim as u32).to_le_bytes()))
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            out,
            dim,
            scalar,
            count: 0,
            scratch: Vec::new(),
        })
    }

    pub fn append(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: row.len(),
            });
        }
        self.scratch.clear();
        encode_row(row, self.scalar, &mut self.scratch).map_err(|v| {
            Error::invalid(format!("value {v} is not representable as {}", self.scalar))
        })?;
        self.out
            .write_all(&self.scratch)
            .map_err(|e| Error::io(&self.path, e))?;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(self) -> Result<VectorDataset> {
        let DatasetWriter {
            path,
            out,
            dim,
            scalar,
            count,
            ..
        } = self;
        let count32 = u32::try_from(count)
            .map_err(|_| Error::invalid(format!("{count} vectors exceed the u32 header")))?;
        let mut file = out.into_inner().map_err(|e| Error::io(&path, e.into_error()))?;
        file.seek(SeekFrom::Start(0))
            .and_then(|_| file.write_all(&count32.to_le_bytes()))
            .and_then(|_| file.sync_data())
            .map_err(|e| Error::io(&path, e))?;
        Ok(VectorDataset {
            path,
            count,
            dim,
            scalar,
        })
    }
}

/// Writes a full vector file. `u8` output requires integral values in `[0, 255]`.
pub fn write_dataset(
    path: impl AsRef<Path>,
    vectors: &VectorMatrix,
    scalar: ScalarKind,
) -> Result<VectorDataset> {
    let mut w = DatasetWriter::create(path, vectors.dim(), scalar)?;
    for row in vectors.iter() {
        w.append(row)?;
    }
    w.finish()
}

/// Shard-local slot to global vector id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdMap {
    pub local_to_global: Vec<u32>,
}

impl IdMap {
    pub fn new(local_to_global: Vec<u32>) -> Self {
        Self { local_to_global }
    }

    pub fn len(&self) -> usize {
        self.local_to_global.len()
    }

    pub fn is_empty(&self) -> bool {
        self.local_to_global.is_empty()
    }

    pub fn global(&self, local: usize) -> u32 {
        self.local_to_global[local]
    }

    /// Checks the id-map invariants against a dataset of `n` vectors.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.len());
        for &g in &self.local_to_global {
            if g as usize >= n {
                return Err(Error::invalid(format!("global id {g} out of range for {n} vectors")));
            }
            if !seen.insert(g) {
                return Err(Error::invalid(format!("duplicate global id {g} in id map")));
            }
        }
        Ok(())
    }
}

pub fn write_idmap(path: impl AsRef<Path>, map: &IdMap) -> Result<()> {
    let path = path.as_ref();
    let m = u32::try_from(map.len()).map_err(|_| Error::invalid("id map too long"))?;
    let mut buf = Vec::with_capacity(8 + 4 * map.len());
    buf.extend_from_slice(&m.to_le_bytes());
    buf.extend_from_slice(&1u32.to_le_bytes());
    for &g in &map.local_to_global {
        buf.extend_from_slice(&g.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_idmap(path: impl AsRef<Path>) -> Result<IdMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::format(path, "file shorter than the 8-byte header"));
    }
    let m = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if d != 1 {
        return Err(Error::format(path, format!("id map width must be 1, found {d}")));
    }
    if bytes.len() != 8 + 4 * m {
        return Err(Error::format(
            path,
            format!("header promises {m} ids, file has {} bytes", bytes.len()),
        ));
    }
    let ids: Vec<u32> = bytes[8..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut seen = HashSet::with_capacity(ids.len());
    if let Some(dup) = ids.iter().find(|&&g| !seen.insert(g)) {
        return Err(Error::format(path, format!("duplicate global id {dup}")));
    }
    Ok(IdMap::new(ids))
}

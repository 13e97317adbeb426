//! Memory-mapped safetensors index, single file or sharded.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use memmap2::Mmap;
use serde::{Deserialize, Serialize};

use super::dtype::Dtype;
use super::roles::{RoleTable, TensorRole};
use crate::error::{Error, Result};

/// Header entries above this size are rejected outright (same cap as the reference loader).
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Offsets into the data region of the owning shard.
    pub byte_range: (u64, u64),
    pub role: TensorRole,
    /// Index of the shard file holding the payload (always 0 for single files).
    pub shard: usize,
}

impl TensorMeta {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

struct Shard {
    path: PathBuf,
    mmap: Mmap,
    data_start: usize,
}

/// Validated, immutable view of a checkpoint. Payload bytes stay in the page cache
/// and are only touched when a tensor view is decoded.
pub struct CheckpointIndex {
    pub path: PathBuf,
    pub tensors: BTreeMap<String, TensorMeta>,
    pub total_params: u64,
    pub metadata: BTreeMap<String, String>,
    shards: Vec<Shard>,
}

impl std::fmt::Debug for CheckpointIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CheckpointIndex")
            .field("path", &self.path)
            .field("tensors", &self.tensors.len())
            .field("total_params", &self.total_params)
            .field("shards", &self.shards.len())
            .finish()
    }
}

#[derive(Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<u64>,
    data_offsets: [u64; 2],
}

#[derive(Deserialize)]
struct ShardIndexFile {
    weight_map: BTreeMap<String, String>,
}

struct ParsedFile {
    mmap: Mmap,
    data_start: usize,
    entries: Vec<(String, Dtype, Vec<usize>, (u64, u64))>,
    metadata: BTreeMap<String, String>,
}

fn parse_file(path: &Path) -> Result<ParsedFile> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    if file_len < 8 {
        return Err(Error::MalformedHeader(format!(
            "{}: file too small ({file_len} bytes) to hold a header length",
            path.display()
        )));
    }
    // SAFETY: the mapping is read-only; concurrent truncation of the file by another
    // process is outside what this tool supports.
    let mmap = unsafe { Mmap::map(&file) }.map_err(|e| Error::io(path, e))?;
    let header_len = u64::from_le_bytes(mmap[..8].try_into().expect("8 bytes"));
    if header_len > MAX_HEADER_LEN || header_len > file_len - 8 {
        return Err(Error::MalformedHeader(format!(
            "{}: header length {header_len} exceeds file size {file_len}",
            path.display()
        )));
    }
    let data_start = 8 + header_len as usize;
    let header = std::str::from_utf8(&mmap[8..data_start])
        .map_err(|e| Error::MalformedHeader(format!("{}: header is not UTF-8: {e}", path.display())))?;
    let raw: BTreeMap<String, serde_json::Value> = serde_json::from_str(header)
        .map_err(|e| Error::MalformedHeader(format!("{}: {e}", path.display())))?;

    let data_len = file_len - data_start as u64;
    let mut metadata = BTreeMap::new();
    let mut entries = Vec::with_capacity(raw.len());
    for (name, value) in raw {
        if name == "__metadata__" {
            metadata = serde_json::from_value(value).map_err(|e| {
                Error::MalformedHeader(format!("{}: __metadata__: {e}", path.display()))
            })?;
            continue;
        }
        let entry: RawEntry = serde_json::from_value(value)
            .map_err(|e| Error::MalformedHeader(format!("tensor {name}: {e}")))?;
        let dtype = Dtype::parse(&entry.dtype, &name)?;
        let [begin, end] = entry.data_offsets;
        if end < begin || end > data_len {
            return Err(Error::OffsetOutOfBounds(name));
        }
        let shape: Vec<usize> = entry.shape.iter().map(|&d| d as usize).collect();
        let expected = shape
            .iter()
            .try_fold(dtype.width() as u64, |acc, &d| acc.checked_mul(d as u64));
        if expected != Some(end - begin) {
            return Err(Error::MalformedHeader(format!(
                "tensor {name}: shape {shape:?} x {dtype} does not match byte range {begin}..{end}"
            )));
        }
        entries.push((name, dtype, shape, (begin, end)));
    }

    let mut ranges: Vec<(u64, u64, &str)> = entries
        .iter()
        .filter(|e| e.3 .1 > e.3 .0)
        .map(|e| (e.3 .0, e.3 .1, e.0.as_str()))
        .collect();
    ranges.sort_unstable();
    for pair in ranges.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::OffsetOutOfBounds(pair[1].2.to_string()));
        }
    }

    Ok(ParsedFile {
        mmap,
        data_start,
        entries,
        metadata,
    })
}

impl CheckpointIndex {
    /// Opens a `.safetensors` file, or a sharded checkpoint through its JSON shard index.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::open_with_roles(path, &RoleTable::builtin())
    }

    pub fn open_with_roles(path: impl AsRef<Path>, roles: &RoleTable) -> Result<Self> {
        let path = path.as_ref();
        if path.extension().is_some_and(|e| e == "json") {
            Self::open_sharded(path, roles)
        } else {
            Self::open_single(path, roles)
        }
    }

    fn open_single(path: &Path, roles: &RoleTable) -> Result<Self> {
        let parsed = parse_file(path)?;
        let mut tensors = BTreeMap::new();
        let mut total_params = 0u64;
        for (name, dtype, shape, byte_range) in parsed.entries {
            total_params += shape.iter().product::<usize>() as u64;
            let role = roles.classify(&name);
            tensors.insert(
                name.clone(),
                TensorMeta {
                    name,
                    dtype,
                    shape,
                    byte_range,
                    role,
                    shard: 0,
                },
            );
        }
        Ok(CheckpointIndex {
            path: path.to_path_buf(),
            tensors,
            total_params,
            metadata: parsed.metadata,
            shards: vec![Shard {
                path: path.to_path_buf(),
                mmap: parsed.mmap,
                data_start: parsed.data_start,
            }],
        })
    }

    fn open_sharded(path: &Path, roles: &RoleTable) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let index: ShardIndexFile = serde_json::from_str(&text)
            .map_err(|e| Error::MalformedHeader(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let files: BTreeSet<&String> = index.weight_map.values().collect();

        let mut shards = Vec::with_capacity(files.len());
        let mut tensors = BTreeMap::new();
        let mut total_params = 0u64;
        let mut metadata = BTreeMap::new();
        for (shard_id, file) in files.into_iter().enumerate() {
            let shard_path = base.join(file);
            let parsed = parse_file(&shard_path)?;
            for (name, dtype, shape, byte_range) in parsed.entries {
                if index.weight_map.get(&name) != Some(file) {
                    continue;
                }
                total_params += shape.iter().product::<usize>() as u64;
                let role = roles.classify(&name);
                tensors.insert(
                    name.clone(),
                    TensorMeta {
                        name,
                        dtype,
                        shape,
                        byte_range,
                        role,
                        shard: shard_id,
                    },
                );
            }
            if metadata.is_empty() {
                metadata = parsed.metadata;
            }
            shards.push(Shard {
                path: shard_path,
                mmap: parsed.mmap,
                data_start: parsed.data_start,
            });
        }
        if let Some(missing) = index.weight_map.keys().find(|n| !tensors.contains_key(*n)) {
            return Err(Error::MalformedHeader(format!(
                "shard index lists {missing} but its shard file does not contain it"
            )));
        }
        Ok(CheckpointIndex {
            path: path.to_path_buf(),
            tensors,
            total_params,
            metadata,
            shards,
        })
    }

    pub fn meta(&self, name: &str) -> Result<&TensorMeta> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    /// Zero-copy view of a tensor's stored bytes.
    pub fn view(&self, name: &str) -> Result<TensorView<'_>> {
        let meta = self.meta(name)?;
        let shard = &self.shards[meta.shard];
        let begin = shard.data_start + meta.byte_range.0 as usize;
        let end = shard.data_start + meta.byte_range.1 as usize;
        Ok(TensorView {
            meta,
            bytes: &shard.mmap[begin..end],
        })
    }

    pub fn shard_paths(&self) -> impl Iterator<Item = &Path> {
        self.shards.iter().map(|s| s.path.as_path())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }
}

/// Borrowed tensor payload with its metadata.
#[derive(Clone, Copy)]
pub struct TensorView<'a> {
    pub meta: &'a TensorMeta,
    bytes: &'a [u8],
}

impl<'a> TensorView<'a> {
    pub fn len(&self) -> usize {
        self.bytes.len() / self.meta.dtype.width()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn bytes(&self) -> &'a [u8] {
        self.bytes
    }

    /// Decodes elements `range` into `out` (cleared first).
    pub fn decode_range(&self, range: Range<usize>, out: &mut Vec<f32>) {
        let w = self.meta.dtype.width();
        out.clear();
        self.meta
            .dtype
            .decode_into(&self.bytes[range.start * w..range.end * w], out);
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        let mut out = Vec::new();
        self.decode_range(0..self.len(), &mut out);
        out
    }
}

/// Reads a whole tensor as exact `f32` upcasts in row-major order.
pub fn read_tensor_f32(index: &CheckpointIndex, name: &str) -> Result<Vec<f32>> {
    Ok(index.view(name)?.to_f32_vec())
}

/// Splits `0..len` into consecutive ranges of at most `chunk` elements.
pub fn chunk_ranges(len: usize, chunk: usize) -> impl Iterator<Item = Range<usize>> {
    let chunk = chunk.max(1);
    (0..len.div_ceil(chunk)).map(move |i| i * chunk..((i + 1) * chunk).min(len))
}

/// In-memory tensor used when writing fixtures and toy-run checkpoints.
#[derive(Debug, Clone)]
pub struct TensorData {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl TensorData {
    pub fn new(name: impl Into<String>, dtype: Dtype, shape: Vec<usize>, values: Vec<f32>) -> Self {
        TensorData {
            name: name.into(),
            dtype,
            shape,
            values,
        }
    }
}

/// Writes a safetensors file with tensors laid out contiguously in the given order.
pub fn write_safetensors(
    path: impl AsRef<Path>,
    tensors: &[TensorData],
    metadata: Option<&BTreeMap<String, String>>,
) -> Result<()> {
    let path = path.as_ref();
    let mut header = serde_json::Map::new();
    if let Some(m) = metadata {
        header.insert("__metadata__".into(), serde_json::to_value(m).expect("string map"));
    }
    let mut offset = 0u64;
    for t in tensors {
        let numel: usize = t.shape.iter().product();
        if numel != t.values.len() {
            return Err(Error::DimMismatch(format!(
                "tensor {}: shape {:?} holds {numel} elements but {} were given",
                t.name,
                t.shape,
                t.values.len()
            )));
        }
        let end = offset + (numel * t.dtype.width()) as u64;
        header.insert(
            t.name.clone(),
            serde_json::json!({
                "dtype": t.dtype.as_str(),
                "shape": t.shape,
                "data_offsets": [offset, end],
            }),
        );
        offset = end;
    }
    let mut header = serde_json::to_vec(&header).expect("json header");
    while header.len() % 8 != 0 {
        header.push(b' ');
    }
    let mut buf = Vec::with_capacity(8 + header.len() + offset as usize);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for t in tensors {
        t.dtype.encode_into(&t.values, &mut buf);
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

//! Checkpoint container I/O.
//!
//! Layout on disk:
//!
//! ```text
//! [8 bytes LE u64: N] [N bytes UTF-8 JSON header] [data region]
//! ```
//!
//! The header maps tensor name to `{"dtype", "shape", "data_offsets"}` with
//! offsets relative to the start of the data region, plus an optional
//! `"__metadata__"` string map. This is layout-compatible with safetensors,
//! restricted to `F32` and `F16`.
//!
//! Files are memory-mapped on read; tensor payloads are views into the map
//! and are never copied until a numeric kernel decodes them.

mod fixture;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::{Deref, Range};
use std::path::Path;
use std::sync::Arc;

use half::f16;
use indexmap::IndexMap;
use memmap2::Mmap;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub use fixture::{
    gen_synthetic, perturb, transformer_fixture_spec, write_synthetic, FixtureSpec, TensorSpec,
};

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    F16,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(DType::F32),
            "F16" => Some(DType::F16),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

enum Backing {
    Heap(Vec<u8>),
    Map(Mmap),
}

impl Backing {
    fn as_slice(&self) -> &[u8] {
        match self {
            Backing::Heap(v) => v,
            Backing::Map(m) => m,
        }
    }
}

/// Immutable, cheaply clonable byte view. Either owns a heap buffer or
/// borrows a range of a shared memory map.
#[derive(Clone)]
pub struct TensorBytes {
    backing: Arc<Backing>,
    range: Range<usize>,
}

impl TensorBytes {
    fn shared(backing: Arc<Backing>, range: Range<usize>) -> Self {
        Self { backing, range }
    }

    /// True when the bytes live in a memory-mapped file rather than the heap.
    pub fn is_mapped(&self) -> bool {
        matches!(*self.backing, Backing::Map(_))
    }
}

impl From<Vec<u8>> for TensorBytes {
    fn from(v: Vec<u8>) -> Self {
        let len = v.len();
        Self {
            backing: Arc::new(Backing::Heap(v)),
            range: 0..len,
        }
    }
}

impl Deref for TensorBytes {
    type Target = [u8];

    fn deref(&self) -> &[u8] {
        &self.backing.as_slice()[self.range.clone()]
    }
}

impl PartialEq for TensorBytes {
    fn eq(&self, other: &Self) -> bool {
        **self == **other
    }
}

impl Eq for TensorBytes {}

impl fmt::Debug for TensorBytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TensorBytes({} bytes)", self.len())
    }
}

/// One named weight tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorRecord {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    data: TensorBytes,
}

impl TensorRecord {
    pub fn new(
        name: impl Into<String>,
        dtype: DType,
        shape: Vec<usize>,
        data: impl Into<TensorBytes>,
    ) -> Result<Self> {
        let record = Self {
            name: name.into(),
            dtype,
            shape,
            data: data.into(),
        };
        record.validate()?;
        Ok(record)
    }

    /// Encodes `values` into `dtype` (round-to-nearest-even for F16).
    pub fn from_f32(
        name: impl Into<String>,
        dtype: DType,
        shape: Vec<usize>,
        values: &[f32],
    ) -> Result<Self> {
        let mut bytes = Vec::with_capacity(values.len() * dtype.width());
        encode_f32(dtype, values, &mut bytes);
        Self::new(name, dtype, shape, bytes)
    }

    fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::EmptyName);
        }
        if self.shape.is_empty() || self.shape.contains(&0) {
            return Err(Error::InvalidShape {
                tensor: self.name.clone(),
                shape: self.shape.clone(),
            });
        }
        let expected = checked_numel(&self.shape)
            .and_then(|n| n.checked_mul(self.dtype.width()))
            .ok_or_else(|| Error::InvalidShape {
                tensor: self.name.clone(),
                shape: self.shape.clone(),
            })?;
        if expected != self.data.len() {
            return Err(Error::SizeMismatch {
                tensor: self.name.clone(),
                expected,
                actual: self.data.len(),
            });
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorBytes {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Rank-2 with both dimensions at least one.
    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// `(rows, cols)` for matrix-like records.
    pub fn matrix_dims(&self) -> Result<(usize, usize)> {
        if self.is_matrix() {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(Error::NotMatrix {
                tensor: self.name.clone(),
                shape: self.shape.clone(),
            })
        }
    }

    /// Decodes elements `range` into `out` (cleared first).
    pub fn decode_range(&self, range: Range<usize>, out: &mut Vec<f32>) {
        let w = self.dtype.width();
        decode_f32(self.dtype, &self.data[range.start * w..range.end * w], out);
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.numel());
        decode_f32(self.dtype, &self.data, &mut out);
        out
    }

    pub fn check_finite(&self) -> Result<()> {
        let finite = match self.dtype {
            DType::F32 => self
                .data
                .chunks_exact(4)
                .all(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]).is_finite()),
            DType::F16 => self
                .data
                .chunks_exact(2)
                .all(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])).is_finite()),
        };
        if finite {
            Ok(())
        } else {
            Err(Error::NonFinite {
                tensor: self.name.clone(),
            })
        }
    }

    /// Same name/dtype/shape with different data.
    pub fn with_data(&self, data: Vec<u8>) -> Result<Self> {
        Self::new(self.name.clone(), self.dtype, self.shape.clone(), data)
    }
}

fn checked_numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// Decodes little-endian `bytes` of `dtype` into `out` (cleared first).
pub fn decode_f32(dtype: DType, bytes: &[u8], out: &mut Vec<f32>) {
    out.clear();
    match dtype {
        DType::F32 => out.extend(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
        ),
        DType::F16 => out.extend(
            bytes
                .chunks_exact(2)
                .map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32()),
        ),
    }
}

/// Appends `values` encoded as `dtype` to `out`.
pub fn encode_f32(dtype: DType, values: &[f32], out: &mut Vec<u8>) {
    match dtype {
        DType::F32 => {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        DType::F16 => {
            for v in values {
                out.extend_from_slice(&f16::from_f32(*v).to_bits().to_le_bytes());
            }
        }
    }
}

/// Ordered collection of tensors; iteration follows file order.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    tensors: IndexMap<String, TensorRecord>,
    metadata: BTreeMap<String, String>,
}

impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        self.metadata == other.metadata
            && self.tensors.len() == other.tensors.len()
            && self.tensors.values().eq(other.tensors.values())
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a record; names must be unique.
    pub fn insert(&mut self, record: TensorRecord) -> Result<()> {
        if self.tensors.contains_key(record.name()) {
            return Err(Error::DuplicateName(record.name.clone()));
        }
        self.tensors.insert(record.name.clone(), record);
        Ok(())
    }

    /// Replaces an existing record in place, keeping its position.
    pub fn replace(&mut self, record: TensorRecord) -> Result<()> {
        match self.tensors.get_mut(record.name()) {
            Some(slot) => {
                *slot = record;
                Ok(())
            }
            None => Err(Error::MissingLayer(record.name.clone())),
        }
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&TensorRecord> {
        self.get(name)
            .ok_or_else(|| Error::MissingLayer(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &TensorRecord> {
        self.tensors.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    pub fn data_bytes(&self) -> usize {
        self.iter().map(|t| t.data.len()).sum()
    }

    /// Parses a complete container held in memory.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        parse(Arc::new(Backing::Heap(bytes)))
    }

    /// Serializes to the container layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = render_header(&self.metadata, self.iter().map(TensorHeader::of));
        let mut out = Vec::with_capacity(8 + header.len() + self.data_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for t in self.iter() {
            out.extend_from_slice(&t.data);
        }
        out
    }
}

/// Memory-maps and validates a checkpoint file.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    if len < 8 {
        return Err(Error::TruncatedPrefix);
    }
    // SAFETY: the map is read-only; callers must not truncate the file while
    // a checkpoint read from it is alive.
    let map = unsafe { Mmap::map(&file) }.map_err(|e| Error::io(path, e))?;
    parse(Arc::new(Backing::Map(map)))
}

/// Writes `ckpt` with tensors laid out contiguously in map order.
pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let headers: Vec<TensorHeader> = ckpt.iter().map(TensorHeader::of).collect();
    let mut writer = CheckpointWriter::create(path, ckpt.metadata(), &headers)?;
    for t in ckpt.iter() {
        t.validate()?;
        writer.write_data(&t.data)?;
    }
    writer.finish()
}

/// Name, dtype and shape of a tensor whose payload is produced later.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorHeader {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

impl TensorHeader {
    pub fn of(t: &TensorRecord) -> Self {
        Self {
            name: t.name.clone(),
            dtype: t.dtype,
            shape: t.shape.clone(),
        }
    }

    pub fn byte_len(&self) -> usize {
        self.shape.iter().product::<usize>() * self.dtype.width()
    }
}

fn render_header(
    metadata: &BTreeMap<String, String>,
    tensors: impl Iterator<Item = TensorHeader>,
) -> String {
    let mut root = serde_json::Map::new();
    if !metadata.is_empty() {
        let meta: serde_json::Map<String, Value> = metadata
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        root.insert(METADATA_KEY.to_string(), Value::Object(meta));
    }
    let mut offset = 0u64;
    for h in tensors {
        let end = offset + h.byte_len() as u64;
        root.insert(
            h.name.clone(),
            serde_json::json!({
                "dtype": h.dtype.as_str(),
                "shape": h.shape,
                "data_offsets": [offset, end],
            }),
        );
        offset = end;
    }
    Value::Object(root).to_string()
}

/// Streaming writer: the header is emitted up front, then each tensor's
/// payload is appended in declaration order. Nothing beyond the I/O buffer
/// is held in memory.
pub struct CheckpointWriter {
    out: BufWriter<File>,
    path: std::path::PathBuf,
    expected: Vec<(String, usize)>,
    next: usize,
    written: usize,
}

impl CheckpointWriter {
    pub fn create(
        path: impl AsRef<Path>,
        metadata: &BTreeMap<String, String>,
        tensors: &[TensorHeader],
    ) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut seen = std::collections::HashSet::new();
        for h in tensors {
            if h.name.is_empty() {
                return Err(Error::EmptyName);
            }
            if h.name == METADATA_KEY || !seen.insert(h.name.as_str()) {
                return Err(Error::DuplicateName(h.name.clone()));
            }
            if h.shape.is_empty() || h.shape.contains(&0) {
                return Err(Error::InvalidShape {
                    tensor: h.name.clone(),
                    shape: h.shape.clone(),
                });
            }
        }
        let header = render_header(metadata, tensors.iter().cloned());
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::with_capacity(1 << 20, file);
        out.write_all(&(header.len() as u64).to_le_bytes())
            .and_then(|_| out.write_all(header.as_bytes()))
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            out,
            path,
            expected: tensors
                .iter()
                .map(|h| (h.name.clone(), h.byte_len()))
                .collect(),
            next: 0,
            written: 0,
        })
    }

    /// Appends payload bytes for the current tensor. May be called several
    /// times per tensor; advances once the declared size is reached.
    pub fn write_data(&mut self, bytes: &[u8]) -> Result<()> {
        let mut bytes = bytes;
        while !bytes.is_empty() {
            let Some(&(_, size)) = self.expected.get(self.next) else {
                return Err(Error::Config(format!(
                    "{} surplus bytes after last tensor",
                    bytes.len()
                )));
            };
            let take = (size - self.written).min(bytes.len());
            if let Err(e) = self.out.write_all(&bytes[..take]) {
                return Err(Error::io(&self.path, e));
            }
            self.written += take;
            bytes = &bytes[take..];
            if self.written == size {
                self.next += 1;
                self.written = 0;
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if let Some((name, size)) = self.expected.get(self.next) {
            return Err(Error::SizeMismatch {
                tensor: name.clone(),
                expected: *size,
                actual: self.written,
            });
        }
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        self.out
            .get_ref()
            .sync_data()
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Header entries in file order, with duplicate keys detected.
struct RawHeader(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawHeader, A::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    entries.push((k, v));
                }
                Ok(RawHeader(entries))
            }
        }
        d.deserialize_map(V)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    dtype: String,
    shape: Vec<u64>,
    data_offsets: [u64; 2],
}

fn parse(backing: Arc<Backing>) -> Result<Checkpoint> {
    let bytes = backing.as_slice();
    if bytes.len() < 8 {
        return Err(Error::TruncatedPrefix);
    }
    let declared = u64::from_le_bytes(bytes[..8].try_into().expect("8-byte prefix"));
    let available = (bytes.len() - 8) as u64;
    if declared > available {
        return Err(Error::HeaderOverrun {
            declared,
            available,
        });
    }
    let data_start = 8 + declared as usize;
    let data_len = (bytes.len() - data_start) as u64;
    let raw: RawHeader = serde_json::from_slice(&bytes[8..data_start])
        .map_err(|e| Error::HeaderJson(e.to_string()))?;

    let mut metadata = BTreeMap::new();
    let mut seen = std::collections::HashSet::new();
    let mut entries = Vec::with_capacity(raw.0.len());
    for (name, value) in raw.0 {
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateName(name));
        }
        if name == METADATA_KEY {
            metadata = serde_json::from_value(value).map_err(|e| Error::HeaderEntry {
                tensor: name.clone(),
                reason: e.to_string(),
            })?;
            continue;
        }
        if name.is_empty() {
            return Err(Error::EmptyName);
        }
        let entry: RawEntry = serde_json::from_value(value).map_err(|e| Error::HeaderEntry {
            tensor: name.clone(),
            reason: e.to_string(),
        })?;
        let dtype = DType::parse(&entry.dtype).ok_or_else(|| Error::UnknownDType {
            tensor: name.clone(),
            dtype: entry.dtype.clone(),
        })?;
        let [begin, end] = entry.data_offsets;
        if begin > end || end > data_len {
            return Err(Error::OutOfBounds {
                tensor: name,
                begin,
                end,
                len: data_len,
            });
        }
        let shape: Vec<usize> = entry
            .shape
            .iter()
            .map(|&d| usize::try_from(d))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidShape {
                tensor: name.clone(),
                shape: vec![],
            })?;
        entries.push((name, dtype, shape, begin as usize, end as usize));
    }

    let mut by_start: Vec<usize> = (0..entries.len()).collect();
    by_start.sort_by_key(|&i| (entries[i].3, entries[i].4));
    for pair in by_start.windows(2) {
        let (a, b) = (&entries[pair[0]], &entries[pair[1]]);
        if b.3 < a.4 {
            return Err(Error::Overlapping {
                tensor: b.0.clone(),
                other: a.0.clone(),
            });
        }
    }

    // File order is data order.
    let mut ckpt = Checkpoint {
        tensors: IndexMap::with_capacity(entries.len()),
        metadata,
    };
    for i in by_start {
        let (name, dtype, shape, begin, end) = entries[i].clone();
        let data = TensorBytes::shared(backing.clone(), data_start + begin..data_start + end);
        ckpt.insert(TensorRecord::new(name, dtype, shape, data)?)?;
    }
    Ok(ckpt)
}

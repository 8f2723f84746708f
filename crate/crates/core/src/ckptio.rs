//! Checkpoint container ("EVC1").
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! 0..4        magic "EVC1"
//! 4..12       u64 header length H
//! 12..12+H    UTF-8 JSON header
//! 12+H..      data section
//! ```
//!
//! The header is `{"metadata": {..}, "tensors": {name: {"dtype", "shape", "offset", "nbytes"}}}`
//! with offsets relative to the start of the data section. The canonical form written by
//! [`write_checkpoint`] sorts tensors by name, packs their data contiguously in that order and
//! serializes the header as compact JSON, so equal checkpoints always produce equal bytes.
//!
//! [`CheckpointReader`] and [`CheckpointWriter`] give tensor-at-a-time access for pipelines
//! that must not hold a whole checkpoint in memory.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EVC1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }
}

/// Number of elements implied by `shape`, or `None` on overflow.
pub fn element_count(shape: &[u64]) -> Option<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(usize::try_from(d).ok()?))
}

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<u64>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<u64>, data: TensorData) -> Result<Self> {
        let expected = element_count(&shape)
            .ok_or_else(|| Error::Invalid(format!("shape {shape:?} overflows")))?;
        if expected != data.len() {
            return Err(Error::Invalid(format!(
                "shape {shape:?} needs {expected} elements, data has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f32(shape: Vec<u64>, values: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(values))
    }

    pub fn from_f64(shape: Vec<u64>, values: Vec<f64>) -> Result<Self> {
        Self::new(shape, TensorData::F64(values))
    }

    /// Builds a tensor of `dtype` from f64 values, rounding when narrowing to f32.
    pub fn from_f64_as(dtype: DType, shape: Vec<u64>, values: Vec<f64>) -> Result<Self> {
        match dtype {
            DType::F64 => Self::from_f64(shape, values),
            DType::F32 => Self::from_f32(shape, values.into_iter().map(|v| v as f32).collect()),
        }
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn shape(&self) -> &[u64] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn nbytes(&self) -> usize {
        self.len() * self.dtype().size()
    }

    /// Values promoted to f64.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    pub fn info(&self) -> TensorInfo {
        TensorInfo {
            dtype: self.dtype(),
            shape: self.shape.clone(),
        }
    }

    fn write_le(&self, out: &mut impl Write) -> std::io::Result<()> {
        match &self.data {
            TensorData::F32(v) => {
                for x in v {
                    out.write_all(&x.to_le_bytes())?;
                }
            }
            TensorData::F64(v) => {
                for x in v {
                    out.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    fn decode(info: &TensorInfo, bytes: &[u8]) -> Result<Self> {
        let data = match info.dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
        };
        Tensor::new(info.shape.clone(), data)
    }
}

/// Dtype and shape of a tensor, without its data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub dtype: DType,
    pub shape: Vec<u64>,
}

impl TensorInfo {
    pub fn element_count(&self) -> usize {
        element_count(&self.shape).unwrap_or(usize::MAX)
    }
}

/// A named tensor map plus free-form string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a checkpoint from `(name, tensor)` pairs, rejecting empty or repeated names.
    pub fn from_entries(entries: impl IntoIterator<Item = (String, Tensor)>) -> Result<Self> {
        let mut ckpt = Self::new();
        for (name, tensor) in entries {
            ckpt.insert(name, tensor)?;
        }
        Ok(ckpt)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::Invalid("empty tensor name".into()));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate tensor name {name:?}")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn infos(&self) -> BTreeMap<String, TensorInfo> {
        self.tensors
            .iter()
            .map(|(k, t)| (k.clone(), t.info()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, tensor) in &self.tensors {
            if name.is_empty() {
                return Err(Error::Invalid("empty tensor name".into()));
            }
            if element_count(&tensor.shape) != Some(tensor.len()) {
                return Err(Error::Invalid(format!(
                    "tensor {name:?}: data length does not match shape"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<u64>,
    offset: u64,
    nbytes: u64,
}

#[derive(Serialize)]
struct HeaderOut<'a> {
    metadata: &'a BTreeMap<String, String>,
    tensors: BTreeMap<&'a str, HeaderEntry>,
}

#[derive(Deserialize)]
struct HeaderIn {
    #[serde(default)]
    metadata: UniqueMap<String>,
    tensors: UniqueMap<HeaderEntry>,
}

/// JSON object that rejects repeated keys instead of keeping the last one.
struct UniqueMap<V>(BTreeMap<String, V>);

impl<V> Default for UniqueMap<V> {
    fn default() -> Self {
        Self(BTreeMap::new())
    }
}

impl<'de, V: Deserialize<'de>> Deserialize<'de> for UniqueMap<V> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct UniqueVisitor<V>(std::marker::PhantomData<V>);

        impl<'de, V: Deserialize<'de>> Visitor<'de> for UniqueVisitor<V> {
            type Value = UniqueMap<V>;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object with unique keys")
            }

            fn visit_map<A: MapAccess<'de>>(
                self,
                mut access: A,
            ) -> std::result::Result<Self::Value, A::Error> {
                let mut map = BTreeMap::new();
                while let Some((key, value)) = access.next_entry::<String, V>()? {
                    if map.contains_key(&key) {
                        return Err(serde::de::Error::custom(format!("duplicate key {key:?}")));
                    }
                    map.insert(key, value);
                }
                Ok(UniqueMap(map))
            }
        }

        deserializer.deserialize_map(UniqueVisitor(std::marker::PhantomData))
    }
}

fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Format(format!("unknown dtype {other:?}"))),
    }
}

#[derive(Debug, Clone)]
struct Located {
    info: TensorInfo,
    offset: u64,
    nbytes: u64,
}

/// Parses and validates a header against a data section of `data_len` bytes.
fn parse_header(
    json: &[u8],
    data_len: u64,
) -> Result<(BTreeMap<String, String>, BTreeMap<String, Located>)> {
    let text = std::str::from_utf8(json)
        .map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
    let header: HeaderIn =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("bad header JSON: {e}")))?;

    let mut located = BTreeMap::new();
    for (name, entry) in header.tensors.0 {
        if name.is_empty() {
            return Err(Error::Format("empty tensor name".into()));
        }
        let dtype = parse_dtype(&entry.dtype)?;
        let count = element_count(&entry.shape)
            .ok_or_else(|| Error::Format(format!("tensor {name:?}: shape overflows")))?;
        let expected = (count as u64)
            .checked_mul(dtype.size() as u64)
            .ok_or_else(|| Error::Format(format!("tensor {name:?}: size overflows")))?;
        if expected != entry.nbytes {
            return Err(Error::Format(format!(
                "tensor {name:?}: nbytes {} does not match shape {:?} x {dtype}",
                entry.nbytes, entry.shape
            )));
        }
        let end = entry
            .offset
            .checked_add(entry.nbytes)
            .ok_or_else(|| Error::Format(format!("tensor {name:?}: offset overflows")))?;
        if end > data_len {
            return Err(Error::Format(format!(
                "truncated data section: tensor {name:?} ends at {end}, data section has {data_len} bytes"
            )));
        }
        located.insert(
            name,
            Located {
                info: TensorInfo {
                    dtype,
                    shape: entry.shape,
                },
                offset: entry.offset,
                nbytes: entry.nbytes,
            },
        );
    }

    let mut spans: Vec<(u64, u64, &str)> = located
        .iter()
        .filter(|(_, l)| l.nbytes > 0)
        .map(|(n, l)| (l.offset, l.offset + l.nbytes, n.as_str()))
        .collect();
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::Format(format!(
                "overlapping tensors {:?} and {:?}",
                pair[0].2, pair[1].2
            )));
        }
    }
    Ok((header.metadata.0, located))
}

/// Random-access reader over an EVC1 file; tensors are decoded on demand.
pub struct CheckpointReader {
    path: PathBuf,
    file: File,
    data_start: u64,
    metadata: BTreeMap<String, String>,
    entries: BTreeMap<String, Located>,
}

impl CheckpointReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(&path, e))?.len();

        let mut prefix = [0u8; 12];
        if file_len < 12 {
            return Err(Error::Format("file shorter than the fixed preamble".into()));
        }
        file.read_exact(&mut prefix)
            .map_err(|e| Error::io(&path, e))?;
        if &prefix[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &prefix[..4])));
        }
        let header_len = u64::from_le_bytes(prefix[4..12].try_into().unwrap());
        if header_len > file_len - 12 {
            return Err(Error::Format(format!(
                "header length {header_len} exceeds file size {file_len}"
            )));
        }
        let mut json = vec![0u8; header_len as usize];
        file.read_exact(&mut json)
            .map_err(|e| Error::io(&path, e))?;
        let data_start = 12 + header_len;
        let (metadata, entries) = parse_header(&json, file_len - data_start)?;
        Ok(Self {
            path,
            file,
            data_start,
            metadata,
            entries,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn info(&self, name: &str) -> Option<&TensorInfo> {
        self.entries.get(name).map(|l| &l.info)
    }

    pub fn infos(&self) -> BTreeMap<String, TensorInfo> {
        self.entries
            .iter()
            .map(|(k, l)| (k.clone(), l.info.clone()))
            .collect()
    }

    pub fn read_tensor(&self, name: &str) -> Result<Tensor> {
        let loc = self
            .entries
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let mut bytes = vec![0u8; loc.nbytes as usize];
        self.file
            .read_exact_at(&mut bytes, self.data_start + loc.offset)
            .map_err(|e| Error::io(&self.path, e))?;
        Tensor::decode(&loc.info, &bytes)
    }

    pub fn read_all(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        ckpt.metadata = self.metadata.clone();
        for name in self.entries.keys() {
            ckpt.tensors.insert(name.clone(), self.read_tensor(name)?);
        }
        Ok(ckpt)
    }
}

/// Streaming writer producing the canonical form.
///
/// The full tensor layout is fixed up front (it determines the header); tensors must then be
/// supplied in lexicographic name order via [`CheckpointWriter::write_tensor`].
pub struct CheckpointWriter {
    path: PathBuf,
    out: BufWriter<File>,
    layout: Vec<(String, TensorInfo)>,
    next: usize,
}

impl CheckpointWriter {
    pub fn create(
        path: impl AsRef<Path>,
        layout: &BTreeMap<String, TensorInfo>,
        metadata: &BTreeMap<String, String>,
    ) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut tensors = BTreeMap::new();
        let mut offset = 0u64;
        for (name, info) in layout {
            if name.is_empty() {
                return Err(Error::Invalid("empty tensor name".into()));
            }
            let nbytes = (info.element_count() as u64) * info.dtype.size() as u64;
            tensors.insert(
                name.as_str(),
                HeaderEntry {
                    dtype: info.dtype.as_str().to_string(),
                    shape: info.shape.clone(),
                    offset,
                    nbytes,
                },
            );
            offset += nbytes;
        }
        let json = serde_json::to_vec(&HeaderOut { metadata, tensors })
            .map_err(|e| Error::Format(format!("cannot encode header: {e}")))?;

        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        let io = |e| Error::io(&path, e);
        out.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        out.write_all(&(json.len() as u64).to_le_bytes())
            .map_err(io)?;
        out.write_all(&json).map_err(io)?;
        Ok(Self {
            layout: layout.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            path,
            out,
            next: 0,
        })
    }

    pub fn write_tensor(&mut self, name: &str, tensor: &Tensor) -> Result<()> {
        let Some((expected_name, info)) = self.layout.get(self.next) else {
            return Err(Error::Invalid(format!("unexpected extra tensor {name:?}")));
        };
        if expected_name != name {
            return Err(Error::Invalid(format!(
                "tensor {name:?} written out of order, expected {expected_name:?}"
            )));
        }
        if tensor.info() != *info {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: info.shape.clone(),
                found: tensor.shape().to_vec(),
            });
        }
        tensor
            .write_le(&mut self.out)
            .map_err(|e| Error::io(&self.path, e))?;
        self.next += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.next != self.layout.len() {
            return Err(Error::Invalid(format!(
                "checkpoint incomplete: {} of {} tensors written",
                self.next,
                self.layout.len()
            )));
        }
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    CheckpointReader::open(path)?.read_all()
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.validate()?;
    let mut writer = CheckpointWriter::create(path, &ckpt.infos(), &ckpt.metadata)?;
    for (name, tensor) in &ckpt.tensors {
        writer.write_tensor(name, tensor)?;
    }
    writer.finish()
}

/// Canonical serialized bytes of a checkpoint, as [`write_checkpoint`] would produce them.
pub fn to_canonical_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.validate()?;
    let mut tensors = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in &ckpt.tensors {
        let nbytes = t.nbytes() as u64;
        tensors.insert(
            name.as_str(),
            HeaderEntry {
                dtype: t.dtype().as_str().to_string(),
                shape: t.shape().to_vec(),
                offset,
                nbytes,
            },
        );
        offset += nbytes;
    }
    let json = serde_json::to_vec(&HeaderOut {
        metadata: &ckpt.metadata,
        tensors,
    })
    .map_err(|e| Error::Format(format!("cannot encode header: {e}")))?;
    let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in ckpt.tensors.values() {
        t.write_le(&mut out).expect("writing to a Vec cannot fail");
    }
    Ok(out)
}

/// Decodes a checkpoint from an in-memory EVC1 image.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 {
        return Err(Error::Format("file shorter than the fixed preamble".into()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    if header_len > (bytes.len() - 12) as u64 {
        return Err(Error::Format(format!(
            "header length {header_len} exceeds file size {}",
            bytes.len()
        )));
    }
    let data_start = 12 + header_len as usize;
    let data = &bytes[data_start..];
    let (metadata, entries) = parse_header(&bytes[12..data_start], data.len() as u64)?;
    let mut ckpt = Checkpoint {
        tensors: BTreeMap::new(),
        metadata,
    };
    for (name, loc) in entries {
        let start = loc.offset as usize;
        let tensor = Tensor::decode(&loc.info, &data[start..start + loc.nbytes as usize])?;
        ckpt.tensors.insert(name, tensor);
    }
    Ok(ckpt)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMismatch {
    pub name: String,
    pub a: TensorInfo,
    pub b: TensorInfo,
}

/// Structural differences between two checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SchemaReport {
    pub only_in_a: Vec<String>,
    pub only_in_b: Vec<String>,
    pub mismatches: Vec<TensorMismatch>,
}

impl SchemaReport {
    pub fn is_empty(&self) -> bool {
        self.only_in_a.is_empty() && self.only_in_b.is_empty() && self.mismatches.is_empty()
    }
}

pub fn diff_schemas(a: &Checkpoint, b: &Checkpoint) -> SchemaReport {
    diff_infos(&a.infos(), &b.infos())
}

pub fn diff_infos(
    a: &BTreeMap<String, TensorInfo>,
    b: &BTreeMap<String, TensorInfo>,
) -> SchemaReport {
    let mut report = SchemaReport::default();
    for (name, ia) in a {
        match b.get(name) {
            None => report.only_in_a.push(name.clone()),
            Some(ib) if ia != ib => report.mismatches.push(TensorMismatch {
                name: name.clone(),
                a: ia.clone(),
                b: ib.clone(),
            }),
            Some(_) => {}
        }
    }
    report.only_in_b = b.keys().filter(|k| !a.contains_key(*k)).cloned().collect();
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_tensor() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("w", Tensor::from_f32(vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        c
    }

    fn hand_built(header: &str, data: &[u8]) -> Vec<u8> {
        let mut bytes = b"EVC1".to_vec();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(data);
        bytes
    }

    #[test]
    fn decodes_hand_built_file() {
        let mut data = Vec::new();
        data.extend_from_slice(&1.0f32.to_le_bytes());
        data.extend_from_slice(&2.0f32.to_le_bytes());
        let bytes = hand_built(
            r#"{"metadata":{},"tensors":{"w":{"dtype":"f32","shape":[2],"offset":0,"nbytes":8}}}"#,
            &data,
        );
        let ckpt = from_bytes(&bytes).unwrap();
        assert_eq!(ckpt, one_tensor());
        assert_eq!(to_canonical_bytes(&ckpt).unwrap(), bytes);
    }

    #[test]
    fn empty_tensor_is_allowed() {
        let bytes = hand_built(
            r#"{"metadata":{},"tensors":{"e":{"dtype":"f64","shape":[0],"offset":0,"nbytes":0}}}"#,
            &[],
        );
        let ckpt = from_bytes(&bytes).unwrap();
        assert_eq!(ckpt.get("e").unwrap().len(), 0);
    }

    #[test]
    fn rejects_length_past_end() {
        let bytes = hand_built(
            r#"{"metadata":{},"tensors":{"w":{"dtype":"f32","shape":[2],"offset":0,"nbytes":8}}}"#,
            &[0u8; 4],
        );
        let err = from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("truncated data section"), "{err}");
    }

    #[test]
    fn rejects_overlap_unknown_dtype_and_duplicates() {
        let overlap = hand_built(
            r#"{"metadata":{},"tensors":{"a":{"dtype":"f32","shape":[2],"offset":0,"nbytes":8},"b":{"dtype":"f32","shape":[2],"offset":4,"nbytes":8}}}"#,
            &[0u8; 12],
        );
        assert!(from_bytes(&overlap)
            .unwrap_err()
            .to_string()
            .contains("overlapping"));

        let dtype = hand_built(
            r#"{"metadata":{},"tensors":{"a":{"dtype":"i8","shape":[1],"offset":0,"nbytes":1}}}"#,
            &[0u8; 1],
        );
        assert!(from_bytes(&dtype)
            .unwrap_err()
            .to_string()
            .contains("unknown dtype"));

        let dup = hand_built(
            r#"{"metadata":{},"tensors":{"a":{"dtype":"f32","shape":[1],"offset":0,"nbytes":4},"a":{"dtype":"f32","shape":[1],"offset":4,"nbytes":4}}}"#,
            &[0u8; 8],
        );
        assert!(from_bytes(&dup)
            .unwrap_err()
            .to_string()
            .contains("duplicate"));

        let mut magic = hand_built(r#"{"metadata":{},"tensors":{}}"#, &[]);
        magic[0] = b'X';
        assert!(from_bytes(&magic)
            .unwrap_err()
            .to_string()
            .contains("bad magic"));

        let json = hand_built("{not json", &[]);
        assert!(matches!(from_bytes(&json), Err(Error::Format(_))));
    }

    #[test]
    fn write_is_deterministic_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = one_tensor();
        c.insert(
            "a.bias",
            Tensor::from_f64(vec![3, 1], vec![0.5, -1.0, 3.25]).unwrap(),
        )
        .unwrap();
        c.metadata.insert("speaker_id".into(), "p225".into());
        let p1 = dir.path().join("one.evc");
        let p2 = dir.path().join("two.evc");
        write_checkpoint(&c, &p1).unwrap();
        write_checkpoint(&c, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        assert_eq!(b1, std::fs::read(&p2).unwrap());
        assert_eq!(read_checkpoint(&p1).unwrap(), c);
        assert_eq!(b1, to_canonical_bytes(&c).unwrap());
    }

    #[test]
    fn duplicate_names_rejected_before_writing() {
        let t = Tensor::from_f32(vec![1], vec![1.0]).unwrap();
        let err = Checkpoint::from_entries([("x".to_string(), t.clone()), ("x".to_string(), t)]);
        assert!(err.is_err());
    }

    #[test]
    fn tensor_length_must_match_shape() {
        assert!(Tensor::from_f32(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::from_f64(vec![], vec![7.0]).is_ok());
    }

    #[test]
    fn schema_diff_cases() {
        let mut a = Checkpoint::new();
        a.insert("dec.w", Tensor::from_f32(vec![2, 3], vec![0.0; 6]).unwrap())
            .unwrap();
        a.insert("enc.w", Tensor::from_f32(vec![1], vec![0.0]).unwrap())
            .unwrap();
        assert!(diff_schemas(&a, &a).is_empty());

        let mut b = a.clone();
        b.tensors.remove("dec.w");
        assert_eq!(diff_schemas(&a, &b).only_in_a, vec!["dec.w".to_string()]);

        let mut c = a.clone();
        c.tensors.insert(
            "dec.w".into(),
            Tensor::from_f32(vec![3, 2], vec![0.0; 6]).unwrap(),
        );
        let report = diff_schemas(&a, &c);
        assert_eq!(report.mismatches.len(), 1);
        assert_eq!(report.mismatches[0].a.shape, vec![2, 3]);
        assert_eq!(report.mismatches[0].b.shape, vec![3, 2]);
    }
}

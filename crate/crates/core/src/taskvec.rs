//! Flattening of a checkpoint's trainable subset into one long vector, and task-vector
//! extraction/application over that flattening.
//!
//! The flat order is lexicographic by tensor name, row-major within each tensor. Every
//! [`FlatVector`] carries the fingerprint of the [`FlattenSchema`] it was produced under so
//! vectors from different filters cannot be mixed silently.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs::File;
use std::hash::Hasher;
use std::io::{BufWriter, Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use glob::Pattern;
use serde::{Deserialize, Serialize};

use crate::ckptio::{Checkpoint, CheckpointReader, CheckpointWriter, DType, Tensor, TensorInfo};
use crate::error::{Error, Result};
use crate::PROVENANCE_KEY;

pub const VECTOR_MAGIC: &[u8; 4] = b"EVV1";

/// Fingerprint used for vectors that do not come from a flattening (e.g. external embeddings).
pub const NULL_FINGERPRINT: u64 = 0;

/// Include/exclude glob patterns over tensor names.
///
/// An empty include list selects every tensor.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamFilter {
    #[serde(default)]
    pub include: Vec<String>,
    #[serde(default)]
    pub exclude: Vec<String>,
}

impl ParamFilter {
    pub fn new<I, E, S, T>(include: I, exclude: E) -> Self
    where
        I: IntoIterator<Item = S>,
        E: IntoIterator<Item = T>,
        S: Into<String>,
        T: Into<String>,
    {
        Self {
            include: include.into_iter().map(Into::into).collect(),
            exclude: exclude.into_iter().map(Into::into).collect(),
        }
    }

    pub fn all() -> Self {
        Self::default()
    }

    fn compile(&self) -> Result<CompiledFilter> {
        let compile = |list: &[String]| {
            list.iter()
                .map(|p| {
                    Pattern::new(p).map_err(|e| Error::Pattern {
                        pattern: p.clone(),
                        message: e.msg.to_string(),
                    })
                })
                .collect::<Result<Vec<_>>>()
        };
        Ok(CompiledFilter {
            include: compile(&self.include)?,
            exclude: compile(&self.exclude)?,
        })
    }
}

struct CompiledFilter {
    include: Vec<Pattern>,
    exclude: Vec<Pattern>,
}

impl CompiledFilter {
    fn selects(&self, name: &str) -> bool {
        let included = self.include.is_empty() || self.include.iter().any(|p| p.matches(name));
        included && !self.exclude.iter().any(|p| p.matches(name))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaEntry {
    pub name: String,
    pub shape: Vec<u64>,
    pub dtype: DType,
    pub offset: u64,
}

impl SchemaEntry {
    pub fn len(&self) -> usize {
        crate::ckptio::element_count(&self.shape).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        let start = self.offset as usize;
        start..start + self.len()
    }
}

/// Ordered mapping between a checkpoint subset and positions `0..total_dim` of a flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlattenSchema {
    entries: Vec<SchemaEntry>,
    total_dim: usize,
    fingerprint: u64,
}

#[derive(Serialize, Deserialize)]
struct SchemaFile {
    entries: Vec<SchemaEntry>,
    total_dim: usize,
    fingerprint: String,
}

impl FlattenSchema {
    /// Builds a schema from entries, checking ordering and contiguity.
    pub fn from_entries(entries: Vec<SchemaEntry>) -> Result<Self> {
        let mut next = 0u64;
        for (i, e) in entries.iter().enumerate() {
            if i > 0 && entries[i - 1].name >= e.name {
                return Err(Error::Invalid(format!(
                    "schema entries not strictly sorted at {:?}",
                    e.name
                )));
            }
            if e.offset != next {
                return Err(Error::Invalid(format!(
                    "schema entry {:?} at offset {} but expected {next}",
                    e.name, e.offset
                )));
            }
            next += e.len() as u64;
        }
        let fingerprint = fingerprint_entries(&entries);
        Ok(Self {
            total_dim: next as usize,
            entries,
            fingerprint,
        })
    }

    pub fn entries(&self) -> &[SchemaEntry] {
        &self.entries
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn entry(&self, name: &str) -> Option<&SchemaEntry> {
        self.entries
            .binary_search_by(|e| e.name.as_str().cmp(name))
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&SchemaFile {
            entries: self.entries.clone(),
            total_dim: self.total_dim,
            fingerprint: format!("{:016x}", self.fingerprint),
        })
        .expect("schema serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SchemaFile = serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("bad schema JSON: {e}")))?;
        let schema = Self::from_entries(file.entries)?;
        let stated = u64::from_str_radix(&file.fingerprint, 16)
            .map_err(|e| Error::Format(format!("bad schema fingerprint: {e}")))?;
        if stated != schema.fingerprint || file.total_dim != schema.total_dim {
            return Err(Error::FingerprintMismatch {
                expected: schema.fingerprint,
                found: stated,
            });
        }
        Ok(schema)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// 64-bit FNV-1a over the compact JSON encoding of the entries.
fn fingerprint_entries(entries: &[SchemaEntry]) -> u64 {
    let json = serde_json::to_vec(entries).expect("schema entries serialize");
    let mut hasher = FnvHasher::default();
    hasher.write(&json);
    hasher.finish()
}

pub fn derive_schema(pre: &Checkpoint, filter: &ParamFilter) -> Result<FlattenSchema> {
    derive_schema_from_infos(&pre.infos(), filter)
}

pub fn derive_schema_from_infos(
    infos: &BTreeMap<String, TensorInfo>,
    filter: &ParamFilter,
) -> Result<FlattenSchema> {
    let compiled = filter.compile()?;
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (name, info) in infos.iter().filter(|(n, _)| compiled.selects(n)) {
        entries.push(SchemaEntry {
            name: name.clone(),
            shape: info.shape.clone(),
            dtype: info.dtype,
            offset,
        });
        offset += info.element_count() as u64;
    }
    if entries.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "filter (include {:?}, exclude {:?}) selects no tensors",
            filter.include, filter.exclude
        )));
    }
    FlattenSchema::from_entries(entries)
}

/// A dense M-dimensional vector tagged with the schema it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatVector {
    pub values: Vec<f64>,
    pub fingerprint: u64,
}

impl FlatVector {
    pub fn new(values: Vec<f64>, fingerprint: u64) -> Self {
        Self {
            values,
            fingerprint,
        }
    }

    pub fn zeros(dim: usize, fingerprint: u64) -> Self {
        Self::new(vec![0.0; dim], fingerprint)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self::new(
            self.values.iter().map(|v| alpha * v).collect(),
            self.fingerprint,
        )
    }

    pub fn check_compatible(&self, schema: &FlattenSchema) -> Result<()> {
        if self.fingerprint != schema.fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: schema.fingerprint(),
                found: self.fingerprint,
            });
        }
        if self.dim() != schema.total_dim() {
            return Err(Error::DimMismatch {
                expected: schema.total_dim(),
                found: self.dim(),
            });
        }
        Ok(())
    }
}

/// Anything that can hand out tensors by name: an in-memory checkpoint or a file reader.
pub trait TensorSource {
    fn tensor_info(&self, name: &str) -> Option<TensorInfo>;
    fn tensor(&self, name: &str) -> Result<Cow<'_, Tensor>>;
    fn tensor_infos(&self) -> BTreeMap<String, TensorInfo>;
    fn source_metadata(&self) -> &BTreeMap<String, String>;
}

impl TensorSource for Checkpoint {
    fn tensor_info(&self, name: &str) -> Option<TensorInfo> {
        self.get(name).map(Tensor::info)
    }

    fn tensor(&self, name: &str) -> Result<Cow<'_, Tensor>> {
        self.get(name)
            .map(Cow::Borrowed)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    fn tensor_infos(&self) -> BTreeMap<String, TensorInfo> {
        self.infos()
    }

    fn source_metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }
}

impl TensorSource for CheckpointReader {
    fn tensor_info(&self, name: &str) -> Option<TensorInfo> {
        self.info(name).cloned()
    }

    fn tensor(&self, name: &str) -> Result<Cow<'_, Tensor>> {
        self.read_tensor(name).map(Cow::Owned)
    }

    fn tensor_infos(&self) -> BTreeMap<String, TensorInfo> {
        self.infos()
    }

    fn source_metadata(&self) -> &BTreeMap<String, String> {
        self.metadata()
    }
}

/// Random access to the values of a flat vector, in memory or on disk.
pub trait VectorSource: Sync {
    fn dim(&self) -> usize;
    fn fingerprint(&self) -> u64;
    /// Fills `buf` with values `start..start + buf.len()`.
    fn read_range(&self, start: usize, buf: &mut [f64]) -> Result<()>;
}

impl VectorSource for FlatVector {
    fn dim(&self) -> usize {
        self.values.len()
    }

    fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn read_range(&self, start: usize, buf: &mut [f64]) -> Result<()> {
        let end = start + buf.len();
        if end > self.values.len() {
            return Err(Error::DimMismatch {
                expected: self.values.len(),
                found: end,
            });
        }
        buf.copy_from_slice(&self.values[start..end]);
        Ok(())
    }
}

impl<T: VectorSource + ?Sized> VectorSource for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn fingerprint(&self) -> u64 {
        (**self).fingerprint()
    }
    fn read_range(&self, start: usize, buf: &mut [f64]) -> Result<()> {
        (**self).read_range(start, buf)
    }
}

/// Consumer of flat-vector values delivered in order.
pub trait VectorSink {
    fn push(&mut self, values: &[f64]) -> Result<()>;
}

impl VectorSink for Vec<f64> {
    fn push(&mut self, values: &[f64]) -> Result<()> {
        self.extend_from_slice(values);
        Ok(())
    }
}

/// Consumer of whole tensors delivered in lexicographic name order.
pub trait CheckpointSink {
    fn put(&mut self, name: &str, tensor: Tensor) -> Result<()>;
}

impl CheckpointSink for Checkpoint {
    fn put(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        self.insert(name, tensor)
    }
}

impl CheckpointSink for CheckpointWriter {
    fn put(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        self.write_tensor(name, &tensor)
    }
}

fn check_finite(name: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            name: name.to_string(),
            index,
        }),
        None => Ok(()),
    }
}

fn schema_tensor<'a, S: TensorSource>(src: &'a S, entry: &SchemaEntry) -> Result<Cow<'a, Tensor>> {
    let info = src
        .tensor_info(&entry.name)
        .ok_or_else(|| Error::MissingTensor(entry.name.clone()))?;
    if info.shape != entry.shape {
        return Err(Error::ShapeMismatch {
            name: entry.name.clone(),
            expected: entry.shape.clone(),
            found: info.shape,
        });
    }
    src.tensor(&entry.name)
}

/// Streams `ft - pre` over the schema into `sink`, one tensor at a time.
pub fn extract_task_vector_into<F, P, K>(
    ft: &F,
    pre: &P,
    schema: &FlattenSchema,
    sink: &mut K,
) -> Result<()>
where
    F: TensorSource,
    P: TensorSource,
    K: VectorSink,
{
    for entry in schema.entries() {
        let ft_vals = schema_tensor(ft, entry)?.to_f64_vec();
        check_finite(&entry.name, &ft_vals)?;
        let pre_vals = schema_tensor(pre, entry)?.to_f64_vec();
        check_finite(&entry.name, &pre_vals)?;
        let diff: Vec<f64> = ft_vals.iter().zip(&pre_vals).map(|(f, p)| f - p).collect();
        sink.push(&diff)?;
    }
    Ok(())
}

pub fn extract_task_vector<F: TensorSource, P: TensorSource>(
    ft: &F,
    pre: &P,
    schema: &FlattenSchema,
) -> Result<FlatVector> {
    let mut values = Vec::with_capacity(schema.total_dim());
    extract_task_vector_into(ft, pre, schema, &mut values)?;
    Ok(FlatVector::new(values, schema.fingerprint()))
}

/// Rewrites `pre` tensor by tensor, replacing every schema tensor with `edit(entry, pre_values)`.
///
/// Non-schema tensors are copied verbatim; edited tensors keep the dtype of `pre`.
pub(crate) fn rewrite_checkpoint<P, K, E>(
    pre: &P,
    schema: &FlattenSchema,
    sink: &mut K,
    mut edit: E,
) -> Result<()>
where
    P: TensorSource,
    K: CheckpointSink,
    E: FnMut(&SchemaEntry, Vec<f64>) -> Result<Vec<f64>>,
{
    let infos = pre.tensor_infos();
    for entry in schema.entries() {
        if !infos.contains_key(&entry.name) {
            return Err(Error::MissingTensor(entry.name.clone()));
        }
    }
    for (name, info) in &infos {
        let tensor = pre.tensor(name)?;
        match schema.entry(name) {
            None => sink.put(name, tensor.into_owned())?,
            Some(entry) => {
                if info.shape != entry.shape {
                    return Err(Error::ShapeMismatch {
                        name: name.clone(),
                        expected: entry.shape.clone(),
                        found: info.shape.clone(),
                    });
                }
                let edited = edit(entry, tensor.to_f64_vec())?;
                check_finite(name, &edited)?;
                sink.put(
                    name,
                    Tensor::from_f64_as(info.dtype, info.shape.clone(), edited)?,
                )?;
            }
        }
    }
    Ok(())
}

/// Output metadata: the reference checkpoint's metadata plus a provenance record chaining any
/// provenance already present.
pub(crate) fn provenance_metadata(
    base: &BTreeMap<String, String>,
    mut record: serde_json::Map<String, serde_json::Value>,
) -> BTreeMap<String, String> {
    let mut metadata = base.clone();
    if let Some(parent) = base.get(PROVENANCE_KEY) {
        let parent =
            serde_json::from_str(parent).unwrap_or(serde_json::Value::String(parent.clone()));
        record.insert("parent".into(), parent);
    }
    metadata.insert(
        PROVENANCE_KEY.to_string(),
        serde_json::Value::Object(record).to_string(),
    );
    metadata
}

fn apply_metadata<P: TensorSource>(
    pre: &P,
    tau: &impl VectorSource,
    alpha: f64,
) -> BTreeMap<String, String> {
    let mut record = serde_json::Map::new();
    record.insert("op".into(), "apply_task_vector".into());
    record.insert("alpha".into(), alpha.into());
    record.insert(
        "schema_fingerprint".into(),
        format!("{:016x}", tau.fingerprint()).into(),
    );
    provenance_metadata(pre.source_metadata(), record)
}

fn check_vector<V: VectorSource>(tau: &V, schema: &FlattenSchema) -> Result<()> {
    if tau.fingerprint() != schema.fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: schema.fingerprint(),
            found: tau.fingerprint(),
        });
    }
    if tau.dim() != schema.total_dim() {
        return Err(Error::DimMismatch {
            expected: schema.total_dim(),
            found: tau.dim(),
        });
    }
    Ok(())
}

fn apply_into<P, V, K>(
    pre: &P,
    tau: &V,
    alpha: f64,
    schema: &FlattenSchema,
    sink: &mut K,
) -> Result<()>
where
    P: TensorSource,
    V: VectorSource,
    K: CheckpointSink,
{
    rewrite_checkpoint(pre, schema, sink, |entry, mut values| {
        let mut delta = vec![0.0; values.len()];
        tau.read_range(entry.offset as usize, &mut delta)?;
        for (v, d) in values.iter_mut().zip(&delta) {
            *v += alpha * d;
        }
        Ok(values)
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "alpha must be finite, got {alpha}"
        )))
    }
}

/// `pre + alpha * tau` over the schema subset; everything else copied from `pre`.
pub fn apply_task_vector<P: TensorSource, V: VectorSource>(
    pre: &P,
    tau: &V,
    alpha: f64,
    schema: &FlattenSchema,
) -> Result<Checkpoint> {
    check_vector(tau, schema)?;
    check_alpha(alpha)?;
    let mut out = Checkpoint::new();
    apply_into(pre, tau, alpha, schema, &mut out)?;
    out.metadata = apply_metadata(pre, tau, alpha);
    Ok(out)
}

/// Streaming form of [`apply_task_vector`] writing straight to an EVC1 file.
pub fn apply_task_vector_to_file<P: TensorSource, V: VectorSource>(
    pre: &P,
    tau: &V,
    alpha: f64,
    schema: &FlattenSchema,
    path: impl AsRef<Path>,
) -> Result<()> {
    check_vector(tau, schema)?;
    check_alpha(alpha)?;
    let metadata = apply_metadata(pre, tau, alpha);
    let mut writer = CheckpointWriter::create(path, &pre.tensor_infos(), &metadata)?;
    apply_into(pre, tau, alpha, schema, &mut writer)?;
    writer.finish()
}

/// Sequential EVV1 writer.
pub struct VectorWriter {
    path: PathBuf,
    out: BufWriter<File>,
    dim: usize,
    written: usize,
}

impl VectorWriter {
    pub fn create(path: impl AsRef<Path>, dim: usize, fingerprint: u64) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        let mut preamble = Vec::with_capacity(20);
        preamble.extend_from_slice(VECTOR_MAGIC);
        preamble.extend_from_slice(&(dim as u64).to_le_bytes());
        preamble.extend_from_slice(&fingerprint.to_le_bytes());
        out.write_all(&preamble).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            out,
            dim,
            written: 0,
        })
    }

    pub fn finish(mut self) -> Result<()> {
        if self.written != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: self.written,
            });
        }
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl VectorSink for VectorWriter {
    fn push(&mut self, values: &[f64]) -> Result<()> {
        if self.written + values.len() > self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: self.written + values.len(),
            });
        }
        for v in values {
            self.out
                .write_all(&v.to_le_bytes())
                .map_err(|e| Error::io(&self.path, e))?;
        }
        self.written += values.len();
        Ok(())
    }
}

const VECTOR_PREAMBLE: u64 = 20;

/// Random-access EVV1 reader.
pub struct VectorReader {
    path: PathBuf,
    file: File,
    dim: usize,
    fingerprint: u64,
}

impl VectorReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let len = file.metadata().map_err(|e| Error::io(&path, e))?.len();
        if len < VECTOR_PREAMBLE {
            return Err(Error::Format(format!(
                "{}: too short for EVV1",
                path.display()
            )));
        }
        let mut preamble = [0u8; 20];
        file.read_exact(&mut preamble)
            .map_err(|e| Error::io(&path, e))?;
        if &preamble[..4] != VECTOR_MAGIC {
            return Err(Error::Format(format!("{}: bad EVV1 magic", path.display())));
        }
        let dim = u64::from_le_bytes(preamble[4..12].try_into().unwrap());
        let fingerprint = u64::from_le_bytes(preamble[12..20].try_into().unwrap());
        let expected = dim
            .checked_mul(8)
            .and_then(|n| n.checked_add(VECTOR_PREAMBLE))
            .ok_or_else(|| Error::Format("EVV1 dimension overflows".into()))?;
        if expected != len {
            return Err(Error::Format(format!(
                "{}: EVV1 declares {dim} values but file has {len} bytes",
                path.display()
            )));
        }
        Ok(Self {
            path,
            file,
            dim: dim as usize,
            fingerprint,
        })
    }

    pub fn read_all(&self) -> Result<FlatVector> {
        let mut values = vec![0.0; self.dim];
        self.read_range(0, &mut values)?;
        Ok(FlatVector::new(values, self.fingerprint))
    }
}

impl VectorSource for VectorReader {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn read_range(&self, start: usize, buf: &mut [f64]) -> Result<()> {
        if start + buf.len() > self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: start + buf.len(),
            });
        }
        let mut bytes = vec![0u8; buf.len() * 8];
        self.file
            .read_exact_at(&mut bytes, VECTOR_PREAMBLE + 8 * start as u64)
            .map_err(|e| Error::io(&self.path, e))?;
        for (v, b) in buf.iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(b.try_into().unwrap());
        }
        Ok(())
    }
}

pub fn write_vector(v: &FlatVector, path: impl AsRef<Path>) -> Result<()> {
    write_values(&v.values, v.fingerprint, path)
}

pub fn write_values(values: &[f64], fingerprint: u64, path: impl AsRef<Path>) -> Result<()> {
    let mut w = VectorWriter::create(path, values.len(), fingerprint)?;
    w.push(values)?;
    w.finish()
}

pub fn read_vector(path: impl AsRef<Path>) -> Result<FlatVector> {
    VectorReader::open(path)?.read_all()
}

//! Checkpoint container: one `series.json` index per series, one
//! `step_<t>/manifest.json` plus one raw little-endian blob per tensor per
//! checkpoint. Blobs carry no header; layout is fully described by the
//! manifest, and each blob's CRC32C is stored next to its shape.
//!
//! All values are widened to f64 on read and narrowed (round to nearest,
//! ties to even) to the schema dtype on write. Opening a series validates
//! structure and schema agreement across steps; checksums are verified on
//! every read path, including streamed block reads.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::DOT_BLOCK;

pub const FORMAT_VERSION: u32 = 1;

/// Element type of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f16")]
    F16,
    #[serde(rename = "bf16")]
    Bf16,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::Bf16 => 2,
        }
    }

    /// Decode little-endian bytes into f64. f32 widens losslessly; the
    /// half-precision types go through their standard conversions.
    pub fn decode_into(self, bytes: &[u8], out: &mut Vec<f64>) {
        match self {
            Dtype::F32 => {
                for chunk in bytes.chunks_exact(4) {
                    let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                    out.push(v as f64);
                }
            }
            Dtype::F16 => {
                for chunk in bytes.chunks_exact(2) {
                    let v = half::f16::from_le_bytes([chunk[0], chunk[1]]);
                    out.push(v.to_f64());
                }
            }
            Dtype::Bf16 => {
                for chunk in bytes.chunks_exact(2) {
                    let v = half::bf16::from_le_bytes([chunk[0], chunk[1]]);
                    out.push(v.to_f64());
                }
            }
        }
    }

    /// Narrow f64 values to this dtype (round to nearest even) and append
    /// the little-endian encoding to `out`.
    pub fn encode_into(self, values: &[f64], out: &mut Vec<u8>) {
        match self {
            Dtype::F32 => {
                for &v in values {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            Dtype::F16 => {
                for &v in values {
                    out.extend_from_slice(&half::f16::from_f64(v).to_le_bytes());
                }
            }
            Dtype::Bf16 => {
                for &v in values {
                    out.extend_from_slice(&half::bf16::from_f64(v).to_le_bytes());
                }
            }
        }
    }
}

// CRC32C (Castagnoli), reflected polynomial 0x82F63B78, as used by iSCSI.
// Table-based software implementation; the format pins this exact checksum.
fn crc32c_table() -> &'static [u32; 256] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<[u32; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [0u32; 256];
        for (i, slot) in table.iter_mut().enumerate() {
            let mut crc = i as u32;
            for _ in 0..8 {
                crc = if crc & 1 != 0 { (crc >> 1) ^ 0x82F6_3B78 } else { crc >> 1 };
            }
            *slot = crc;
        }
        table
    })
}

/// Incremental CRC32C state.
#[derive(Debug, Clone)]
pub struct Crc32c {
    state: u32,
}

impl Default for Crc32c {
    fn default() -> Self {
        Self::new()
    }
}

impl Crc32c {
    pub fn new() -> Self {
        Self { state: !0 }
    }

    pub fn update(&mut self, bytes: &[u8]) {
        let table = crc32c_table();
        let mut crc = self.state;
        for &b in bytes {
            crc = (crc >> 8) ^ table[((crc ^ b as u32) & 0xFF) as usize];
        }
        self.state = crc;
    }

    pub fn finish(&self) -> u32 {
        !self.state
    }
}

pub fn crc32c(bytes: &[u8]) -> u32 {
    let mut crc = Crc32c::new();
    crc.update(bytes);
    crc.finish()
}

/// Shape, dtype and name of one tensor. `element_count` is always the
/// product of the shape entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, dtype: Dtype) -> Self {
        Self { name: name.into(), shape, dtype }
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains('/') || self.name.contains('\\') {
            return Err(Error::InvalidIndex(format!(
                "tensor name {:?} is empty or contains a path separator",
                self.name
            )));
        }
        if self.shape.is_empty() || self.shape.contains(&0) {
            return Err(Error::InvalidIndex(format!(
                "tensor {:?} has empty or zero-sized shape {:?}",
                self.name, self.shape
            )));
        }
        let mut n: usize = 1;
        for &d in &self.shape {
            n = n.checked_mul(d).ok_or_else(|| {
                Error::InvalidIndex(format!("tensor {:?} shape overflows", self.name))
            })?;
        }
        Ok(())
    }
}

/// One manifest entry: the tensor spec plus the CRC32C of its blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub crc32c: u32,
}

impl ManifestTensor {
    pub fn spec(&self) -> TensorSpec {
        TensorSpec::new(self.name.clone(), self.shape.clone(), self.dtype)
    }
}

/// Per-checkpoint manifest (`step_<t>/manifest.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub step: u64,
    pub tensors: Vec<ManifestTensor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SeriesIndex {
    format_version: u32,
    base_step: u64,
    observed_steps: Vec<u64>,
    tensor_schema: Vec<TensorSpec>,
}

/// An opened, validated checkpoint series: one base checkpoint plus an
/// ordered set of observed checkpoints sharing a single tensor schema.
/// Immutable after open; reads of distinct (step, tensor) pairs are
/// independent.
#[derive(Debug, Clone)]
pub struct CheckpointSeries {
    root: PathBuf,
    base_step: u64,
    observed_steps: Vec<u64>,
    schema: Vec<TensorSpec>,
    manifests: BTreeMap<u64, CheckpointManifest>,
}

impl CheckpointSeries {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn base_step(&self) -> u64 {
        self.base_step
    }

    pub fn observed_steps(&self) -> &[u64] {
        &self.observed_steps
    }

    /// Observed steps at or below `upto`.
    pub fn observed_upto(&self, upto: u64) -> Vec<u64> {
        self.observed_steps.iter().copied().filter(|&s| s <= upto).collect()
    }

    pub fn schema(&self) -> &[TensorSpec] {
        &self.schema
    }

    pub fn tensor_spec(&self, name: &str) -> Result<&TensorSpec> {
        self.schema
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn manifest(&self, step: u64) -> Result<&CheckpointManifest> {
        self.manifests.get(&step).ok_or(Error::UnknownStep(step))
    }

    pub fn has_step(&self, step: u64) -> bool {
        self.manifests.contains_key(&step)
    }

    pub fn blob_path(&self, step: u64, name: &str) -> PathBuf {
        step_dir(&self.root, step).join(format!("{name}.bin"))
    }
}

fn step_dir(root: &Path, step: u64) -> PathBuf {
    root.join(format!("step_{step}"))
}

fn validate_schema(schema: &[TensorSpec]) -> Result<()> {
    if schema.is_empty() {
        return Err(Error::InvalidIndex("tensor schema is empty".into()));
    }
    let mut seen = BTreeSet::new();
    for spec in schema {
        spec.validate()?;
        if !seen.insert(spec.name.as_str()) {
            return Err(Error::InvalidIndex(format!("duplicate tensor name {:?}", spec.name)));
        }
    }
    Ok(())
}

/// Open and validate a series rooted at `root`.
///
/// Structural validation only: the index and every per-step manifest are
/// checked for schema agreement, step ordering and blob sizes. Checksums
/// are verified lazily on read, so opening a large series stays cheap.
pub fn open_series(root: impl AsRef<Path>) -> Result<CheckpointSeries> {
    let root = root.as_ref().to_path_buf();
    let index_path = root.join("series.json");
    if !index_path.is_file() {
        return Err(Error::MissingIndex(index_path.display().to_string()));
    }
    let index: SeriesIndex = serde_json::from_reader(BufReader::new(File::open(&index_path)?))?;
    if index.format_version != FORMAT_VERSION {
        return Err(Error::InvalidIndex(format!(
            "unsupported format_version {}",
            index.format_version
        )));
    }
    validate_schema(&index.tensor_schema)?;
    let mut prev = index.base_step;
    for &s in &index.observed_steps {
        if s <= prev {
            return Err(Error::InvalidIndex(format!(
                "steps must be strictly increasing and above the base: {prev} then {s}"
            )));
        }
        prev = s;
    }
    if index.observed_steps.is_empty() {
        return Err(Error::InvalidIndex("no observed steps".into()));
    }

    let mut manifests = BTreeMap::new();
    for &step in std::iter::once(&index.base_step).chain(&index.observed_steps) {
        let manifest = load_manifest(&root, step)?;
        check_manifest_schema(&manifest, &index.tensor_schema, step)?;
        check_blob_sizes(&root, &manifest)?;
        manifests.insert(step, manifest);
    }

    Ok(CheckpointSeries {
        root,
        base_step: index.base_step,
        observed_steps: index.observed_steps,
        schema: index.tensor_schema,
        manifests,
    })
}

fn load_manifest(root: &Path, step: u64) -> Result<CheckpointManifest> {
    let path = step_dir(root, step).join("manifest.json");
    if !path.is_file() {
        return Err(Error::MissingIndex(path.display().to_string()));
    }
    let manifest: CheckpointManifest =
        serde_json::from_reader(BufReader::new(File::open(&path)?))?;
    if manifest.step != step {
        return Err(Error::InvalidIndex(format!(
            "manifest in step_{step} claims step {}",
            manifest.step
        )));
    }
    Ok(manifest)
}

fn check_manifest_schema(
    manifest: &CheckpointManifest,
    schema: &[TensorSpec],
    step: u64,
) -> Result<()> {
    let by_name: BTreeMap<&str, &ManifestTensor> =
        manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    if by_name.len() != manifest.tensors.len() {
        return Err(Error::InvalidIndex(format!("duplicate tensor in manifest for step {step}")));
    }
    for spec in schema {
        match by_name.get(spec.name.as_str()) {
            None => {
                return Err(Error::SchemaMismatch {
                    tensor: spec.name.clone(),
                    step,
                    detail: "tensor missing from checkpoint".into(),
                })
            }
            Some(t) if t.shape != spec.shape || t.dtype != spec.dtype => {
                return Err(Error::SchemaMismatch {
                    tensor: spec.name.clone(),
                    step,
                    detail: format!(
                        "expected {:?} {:?}, found {:?} {:?}",
                        spec.shape, spec.dtype, t.shape, t.dtype
                    ),
                })
            }
            Some(_) => {}
        }
    }
    if manifest.tensors.len() != schema.len() {
        let extra = manifest
            .tensors
            .iter()
            .find(|t| !schema.iter().any(|s| s.name == t.name))
            .map(|t| t.name.clone())
            .unwrap_or_default();
        return Err(Error::SchemaMismatch {
            tensor: extra,
            step,
            detail: "tensor not present in series schema".into(),
        });
    }
    Ok(())
}

fn check_blob_sizes(root: &Path, manifest: &CheckpointManifest) -> Result<()> {
    for t in &manifest.tensors {
        let spec = t.spec();
        let path = step_dir(root, manifest.step).join(format!("{}.bin", t.name));
        let meta = fs::metadata(&path).map_err(|_| Error::SchemaMismatch {
            tensor: t.name.clone(),
            step: manifest.step,
            detail: format!("blob {} missing", path.display()),
        })?;
        let expected = (spec.element_count() * spec.dtype.size_bytes()) as u64;
        if meta.len() != expected {
            return Err(Error::SchemaMismatch {
                tensor: t.name.clone(),
                step: manifest.step,
                detail: format!("blob has {} bytes, expected {expected}", meta.len()),
            });
        }
    }
    Ok(())
}

fn manifest_entry<'a>(
    series: &'a CheckpointSeries,
    step: u64,
    name: &str,
) -> Result<&'a ManifestTensor> {
    let manifest = series.manifest(step)?;
    manifest
        .tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::UnknownTensor(name.to_string()))
}

/// Read one tensor fully, widened to f64 in row-major order. Verifies the
/// blob checksum.
pub fn read_tensor(series: &CheckpointSeries, step: u64, name: &str) -> Result<Vec<f64>> {
    let entry = manifest_entry(series, step, name)?;
    let spec = entry.spec();
    let mut out = Vec::with_capacity(spec.element_count());
    for_each_tensor_block(series, step, name, |_, block| out.extend_from_slice(block))?;
    debug_assert_eq!(out.len(), spec.element_count());
    Ok(out)
}

/// Stream one tensor in blocks of at most [`DOT_BLOCK`] elements. The
/// callback receives the element offset and the widened block. The blob
/// checksum is verified once the final block has been delivered.
pub fn for_each_tensor_block<F>(
    series: &CheckpointSeries,
    step: u64,
    name: &str,
    mut f: F,
) -> Result<()>
where
    F: FnMut(usize, &[f64]),
{
    let entry = manifest_entry(series, step, name)?;
    let mut reader = BlobReader::open(series, step, entry)?;
    let mut buf = Vec::with_capacity(DOT_BLOCK);
    let mut offset = 0usize;
    while let Some(()) = reader.next_block(&mut buf)? {
        f(offset, &buf);
        offset += buf.len();
    }
    Ok(())
}

/// Sequential reader over one blob, decoding [`DOT_BLOCK`]-element blocks
/// and accumulating the running CRC32C. Reaching the end with a checksum
/// mismatch yields [`Error::CorruptBlob`].
pub struct BlobReader {
    reader: BufReader<File>,
    dtype: Dtype,
    remaining: usize,
    crc: Crc32c,
    stored_crc: u32,
    tensor: String,
    step: u64,
    byte_buf: Vec<u8>,
}

impl BlobReader {
    fn open(series: &CheckpointSeries, step: u64, entry: &ManifestTensor) -> Result<Self> {
        let spec = entry.spec();
        let path = series.blob_path(step, &entry.name);
        let file = File::open(&path)?;
        Ok(Self {
            // Trajectory passes hold one reader per observed step, so the
            // buffer must stay small relative to a tensor.
            reader: BufReader::with_capacity(128 << 10, file),
            dtype: spec.dtype,
            remaining: spec.element_count(),
            crc: Crc32c::new(),
            stored_crc: entry.crc32c,
            tensor: entry.name.clone(),
            step,
            byte_buf: Vec::new(),
        })
    }

    /// Open a standalone reader for `(step, name)` of a series.
    pub fn for_tensor(series: &CheckpointSeries, step: u64, name: &str) -> Result<Self> {
        let entry = manifest_entry(series, step, name)?;
        Self::open(series, step, entry)
    }

    /// Decode the next block into `out` (cleared first). Returns `None`
    /// at end of blob, after the checksum has been verified.
    pub fn next_block(&mut self, out: &mut Vec<f64>) -> Result<Option<()>> {
        out.clear();
        if self.remaining == 0 {
            let computed = self.crc.finish();
            if computed != self.stored_crc {
                return Err(Error::CorruptBlob {
                    tensor: self.tensor.clone(),
                    step: self.step,
                    stored: self.stored_crc,
                    computed,
                });
            }
            return Ok(None);
        }
        let elems = self.remaining.min(DOT_BLOCK);
        let bytes = elems * self.dtype.size_bytes();
        self.byte_buf.resize(bytes, 0);
        self.reader.read_exact(&mut self.byte_buf)?;
        self.crc.update(&self.byte_buf);
        self.dtype.decode_into(&self.byte_buf, out);
        self.remaining -= elems;
        Ok(Some(()))
    }
}

/// Streaming writer for one tensor blob: narrows pushed f64 blocks to the
/// schema dtype, tracks the CRC, and hands back the manifest entry on
/// finish.
pub struct TensorSink {
    writer: BufWriter<File>,
    spec: TensorSpec,
    crc: Crc32c,
    written: usize,
    byte_buf: Vec<u8>,
}

impl TensorSink {
    pub fn push(&mut self, values: &[f64]) -> Result<()> {
        self.byte_buf.clear();
        self.spec.dtype.encode_into(values, &mut self.byte_buf);
        self.crc.update(&self.byte_buf);
        self.writer.write_all(&self.byte_buf)?;
        self.written += values.len();
        if self.written > self.spec.element_count() {
            return Err(Error::ShapeMismatch {
                tensor: self.spec.name.clone(),
                expected: self.spec.element_count(),
                got: self.written,
            });
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<ManifestTensor> {
        if self.written != self.spec.element_count() {
            return Err(Error::ShapeMismatch {
                tensor: self.spec.name.clone(),
                expected: self.spec.element_count(),
                got: self.written,
            });
        }
        self.writer.flush()?;
        Ok(ManifestTensor {
            name: self.spec.name.clone(),
            shape: self.spec.shape.clone(),
            dtype: self.spec.dtype,
            crc32c: self.crc.finish(),
        })
    }
}

/// Writer for one checkpoint directory. Tensors may be produced in any
/// order (including from worker threads via [`StepWriter::tensor_sink`]);
/// the manifest is assembled in schema order on finish.
pub struct StepWriter {
    dir: PathBuf,
    step: u64,
    schema: Vec<TensorSpec>,
    entries: BTreeMap<String, ManifestTensor>,
}

impl StepWriter {
    pub fn new(root: impl AsRef<Path>, step: u64, schema: &[TensorSpec]) -> Result<Self> {
        validate_schema(schema)?;
        let dir = step_dir(root.as_ref(), step);
        fs::create_dir_all(&dir)?;
        Ok(Self { dir, step, schema: schema.to_vec(), entries: BTreeMap::new() })
    }

    /// Open a sink for one tensor. Does not register the result; call
    /// [`StepWriter::commit`] with the finished entry.
    pub fn tensor_sink(&self, name: &str) -> Result<TensorSink> {
        let spec = self
            .schema
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))?
            .clone();
        let file = File::create(self.dir.join(format!("{name}.bin")))?;
        Ok(TensorSink {
            writer: BufWriter::with_capacity(1 << 20, file),
            spec,
            crc: Crc32c::new(),
            written: 0,
            byte_buf: Vec::new(),
        })
    }

    pub fn commit(&mut self, entry: ManifestTensor) {
        self.entries.insert(entry.name.clone(), entry);
    }

    /// Narrow and write a full tensor in one call.
    pub fn write_tensor(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let spec = self
            .schema
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
        if values.len() != spec.element_count() {
            return Err(Error::ShapeMismatch {
                tensor: name.to_string(),
                expected: spec.element_count(),
                got: values.len(),
            });
        }
        let mut sink = self.tensor_sink(name)?;
        for chunk in values.chunks(DOT_BLOCK) {
            sink.push(chunk)?;
        }
        let entry = sink.finish()?;
        self.commit(entry);
        Ok(())
    }

    /// Byte-copy a blob from another series (same spec), preserving the
    /// stored checksum, without registering it. Used for base checkpoints
    /// and zero-delta tensors; safe to call from worker threads, with the
    /// returned entry committed afterwards.
    pub fn copy_tensor_entry(
        &self,
        source: &CheckpointSeries,
        source_step: u64,
        name: &str,
    ) -> Result<ManifestTensor> {
        let entry = manifest_entry(source, source_step, name)?;
        let spec = self
            .schema
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
        if spec.shape != entry.shape || spec.dtype != entry.dtype {
            return Err(Error::SchemaMismatch {
                tensor: name.to_string(),
                step: self.step,
                detail: "copy source spec differs".into(),
            });
        }
        let src = source.blob_path(source_step, name);
        let dst = self.dir.join(format!("{name}.bin"));
        // Stream the copy while recomputing the checksum so corruption in
        // the source is caught rather than propagated.
        let mut reader = BufReader::with_capacity(1 << 20, File::open(&src)?);
        let mut writer = BufWriter::with_capacity(1 << 20, File::create(&dst)?);
        let mut crc = Crc32c::new();
        let mut buf = vec![0u8; 1 << 20];
        loop {
            let n = reader.read(&mut buf)?;
            if n == 0 {
                break;
            }
            crc.update(&buf[..n]);
            writer.write_all(&buf[..n])?;
        }
        writer.flush()?;
        let computed = crc.finish();
        if computed != entry.crc32c {
            return Err(Error::CorruptBlob {
                tensor: name.to_string(),
                step: source_step,
                stored: entry.crc32c,
                computed,
            });
        }
        Ok(ManifestTensor {
            name: name.to_string(),
            shape: entry.shape.clone(),
            dtype: entry.dtype,
            crc32c: entry.crc32c,
        })
    }

    /// [`StepWriter::copy_tensor_entry`] plus the commit.
    pub fn copy_tensor_raw(
        &mut self,
        source: &CheckpointSeries,
        source_step: u64,
        name: &str,
    ) -> Result<()> {
        let entry = self.copy_tensor_entry(source, source_step, name)?;
        self.commit(entry);
        Ok(())
    }

    pub fn finish(self) -> Result<CheckpointManifest> {
        let mut tensors = Vec::with_capacity(self.schema.len());
        for spec in &self.schema {
            let entry = self.entries.get(&spec.name).ok_or_else(|| Error::ShapeMismatch {
                tensor: spec.name.clone(),
                expected: spec.element_count(),
                got: 0,
            })?;
            tensors.push(entry.clone());
        }
        let manifest =
            CheckpointManifest { format_version: FORMAT_VERSION, step: self.step, tensors };
        let file = File::create(self.dir.join("manifest.json"))?;
        let mut writer = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut writer, &manifest)?;
        writer.flush()?;
        Ok(manifest)
    }
}

/// Write one checkpoint under `root`: blobs plus manifest. Every schema
/// tensor must be present in `tensors` with a matching element count.
pub fn write_checkpoint(
    root: impl AsRef<Path>,
    step: u64,
    schema: &[TensorSpec],
    tensors: &BTreeMap<String, Vec<f64>>,
) -> Result<CheckpointManifest> {
    let mut writer = StepWriter::new(root, step, schema)?;
    for spec in schema {
        let values = tensors.get(&spec.name).ok_or_else(|| Error::ShapeMismatch {
            tensor: spec.name.clone(),
            expected: spec.element_count(),
            got: 0,
        })?;
        writer.write_tensor(&spec.name, values)?;
    }
    writer.finish()
}

/// Builder for a whole series directory. Steps may be written in any
/// order; `finish` designates the base step, writes `series.json` and
/// re-opens the result so callers always get back a validated series.
pub struct SeriesWriter {
    root: PathBuf,
    schema: Vec<TensorSpec>,
    steps: Vec<u64>,
}

impl SeriesWriter {
    pub fn create(root: impl AsRef<Path>, schema: Vec<TensorSpec>) -> Result<Self> {
        validate_schema(&schema)?;
        fs::create_dir_all(root.as_ref())?;
        Ok(Self { root: root.as_ref().to_path_buf(), schema, steps: Vec::new() })
    }

    pub fn schema(&self) -> &[TensorSpec] {
        &self.schema
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn step_writer(&self, step: u64) -> Result<StepWriter> {
        StepWriter::new(&self.root, step, &self.schema)
    }

    /// Record that `step` has been fully written via a [`StepWriter`].
    pub fn register_step(&mut self, step: u64) {
        self.steps.push(step);
    }

    pub fn write_step(&mut self, step: u64, tensors: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        write_checkpoint(&self.root, step, &self.schema, tensors)?;
        self.register_step(step);
        Ok(())
    }

    pub fn finish(self, base_step: u64) -> Result<CheckpointSeries> {
        let mut observed: Vec<u64> = self.steps.iter().copied().filter(|&s| s != base_step).collect();
        observed.sort_unstable();
        observed.dedup();
        if !self.steps.contains(&base_step) {
            return Err(Error::InvalidIndex(format!("base step {base_step} was never written")));
        }
        let index = SeriesIndex {
            format_version: FORMAT_VERSION,
            base_step,
            observed_steps: observed,
            tensor_schema: self.schema.clone(),
        };
        let file = File::create(self.root.join("series.json"))?;
        let mut writer = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut writer, &index)?;
        writer.flush()?;
        open_series(&self.root)
    }
}

//! "ATNS" binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size      | field                                |
//! |--------|-----------|--------------------------------------|
//! | 0      | 4         | magic `b"ATNS"`                      |
//! | 4      | 4         | version (`u32`, currently 1)         |
//! | 8      | 1         | dtype code (0 = f32, 1 = f16)        |
//! | 9      | 1         | ndim (1..=8)                         |
//! | 10     | 2         | reserved, zero                       |
//! | 12     | 8 × ndim  | dims (`u64` each)                    |
//!
//! followed by the row-major payload. f16 payloads are widened to f32 on read.
//!
//! [`TensorReader::slabs`] streams the payload along the leading axis with a
//! bounded scratch buffer, so reductions over multi-gigabyte attention dumps
//! only ever hold one slab in memory.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"ATNS";
pub const VERSION: u32 = 1;
pub const MAX_NDIM: usize = 8;

/// Bytes read from disk per decode step when streaming.
const SCRATCH_BYTES: usize = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F16,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F16),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorHeader {
    pub version: u32,
    pub dtype: DType,
    pub dims: Vec<u64>,
}

impl TensorHeader {
    pub fn new(dims: &[usize], dtype: DType) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_NDIM {
            return Err(Error::Size(format!(
                "ndim must be in 1..={MAX_NDIM}, got {}",
                dims.len()
            )));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::Size(format!("dim {pos} is zero")));
        }
        Ok(Self {
            version: VERSION,
            dtype,
            dims: dims.iter().map(|&d| d as u64).collect(),
        })
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    /// Header size in bytes: `12 + 8 * ndim`.
    pub fn byte_len(&self) -> usize {
        12 + 8 * self.ndim()
    }

    pub fn dims_usize(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    pub fn numel(&self) -> u64 {
        self.dims.iter().product()
    }

    pub fn payload_bytes(&self) -> u64 {
        self.numel() * self.dtype.size() as u64
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.dtype.code());
        out.push(self.ndim() as u8);
        out.extend_from_slice(&[0u8, 0u8]);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out
    }

    pub fn read_from<R: Read>(reader: &mut R) -> Result<Self> {
        let mut fixed = [0u8; 12];
        reader
            .read_exact(&mut fixed)
            .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
        if fixed[0..4] != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected \"ATNS\"",
                String::from_utf8_lossy(&fixed[0..4])
            )));
        }
        let version = u32::from_le_bytes(fixed[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let dtype = DType::from_code(fixed[8])?;
        let ndim = fixed[9] as usize;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(Error::Format(format!("ndim {ndim} out of range")));
        }
        if fixed[10] != 0 || fixed[11] != 0 {
            return Err(Error::Format("reserved bytes are not zero".into()));
        }
        let mut dims = Vec::with_capacity(ndim);
        let mut buf = [0u8; 8];
        for _ in 0..ndim {
            reader
                .read_exact(&mut buf)
                .map_err(|e| Error::Format(format!("truncated dims: {e}")))?;
            let d = u64::from_le_bytes(buf);
            if d == 0 {
                return Err(Error::Format("zero-length dimension".into()));
            }
            dims.push(d);
        }
        Ok(Self {
            version,
            dtype,
            dims,
        })
    }
}

/// Dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::Size(format!(
                "dims {dims:?} imply {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let numel = dims.iter().product();
        Self {
            dims,
            data: vec![0.0; numel],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Axis names and classifier-free-guidance branch split, stored next to a
/// tensor as `<name>.meta.json`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisMeta {
    #[serde(default)]
    pub axis_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch_split: Option<usize>,
}

impl AxisMeta {
    pub fn validate(&self, ndim: usize) -> Result<()> {
        if !self.axis_names.is_empty() && self.axis_names.len() != ndim {
            return Err(Error::Format(format!(
                "meta names {} axes but tensor has {ndim}",
                self.axis_names.len()
            )));
        }
        Ok(())
    }

    pub fn axis(&self, name: &str) -> Option<usize> {
        self.axis_names.iter().position(|n| n == name)
    }

    /// Sidecar path for a tensor file: `dir/x.atns` → `dir/x.meta.json`.
    pub fn sidecar_path(tensor_path: &Path) -> PathBuf {
        let stem = tensor_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        tensor_path.with_file_name(format!("{stem}.meta.json"))
    }

    pub fn load(tensor_path: &Path) -> Result<Option<Self>> {
        let path = Self::sidecar_path(tensor_path);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io_at(&path, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    pub fn save(&self, tensor_path: &Path) -> Result<()> {
        let path = Self::sidecar_path(tensor_path);
        let text = serde_json::to_string(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io_at(&path, e))
    }
}

/// Incremental writer: the header is written up front and values are appended
/// in row-major order. [`TensorWriter::finish`] fails unless exactly
/// `product(dims)` values were supplied.
pub struct TensorWriter<W: Write> {
    inner: W,
    header: TensorHeader,
    written: u64,
    buf: Vec<u8>,
}

impl TensorWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>, dims: &[usize], dtype: DType) -> Result<Self> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io_at(path, e))?;
        Self::new(BufWriter::new(file), dims, dtype)
    }
}

impl<W: Write> TensorWriter<W> {
    pub fn new(mut inner: W, dims: &[usize], dtype: DType) -> Result<Self> {
        let header = TensorHeader::new(dims, dtype)?;
        inner.write_all(&header.encode())?;
        Ok(Self {
            inner,
            header,
            written: 0,
            buf: Vec::new(),
        })
    }

    pub fn header(&self) -> &TensorHeader {
        &self.header
    }

    pub fn write_values(&mut self, values: &[f32]) -> Result<()> {
        let total = self.header.numel();
        if self.written + values.len() as u64 > total {
            return Err(Error::Size(format!(
                "payload exceeds {total} values declared by dims {:?}",
                self.header.dims
            )));
        }
        self.buf.clear();
        match self.header.dtype {
            DType::F32 => {
                for v in values {
                    self.buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            DType::F16 => {
                for v in values {
                    self.buf.extend_from_slice(&f16::from_f32(*v).to_le_bytes());
                }
            }
        }
        self.inner.write_all(&self.buf)?;
        self.written += values.len() as u64;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        let total = self.header.numel();
        if self.written != total {
            return Err(Error::Size(format!(
                "payload has {} values, dims {:?} require {total}",
                self.written, self.header.dims
            )));
        }
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub fn write_tensor(path: impl AsRef<Path>, dims: &[usize], dtype: DType, data: &[f32]) -> Result<()> {
    let expected: usize = dims.iter().product();
    if expected != data.len() {
        return Err(Error::Size(format!(
            "dims {dims:?} require {expected} values, got {}",
            data.len()
        )));
    }
    let mut writer = TensorWriter::create(path, dims, dtype)?;
    writer.write_values(data)?;
    writer.finish()?;
    Ok(())
}

pub fn write_tensor_to<W: Write>(out: W, dims: &[usize], dtype: DType, data: &[f32]) -> Result<W> {
    let mut writer = TensorWriter::new(out, dims, dtype)?;
    writer.write_values(data)?;
    writer.finish()
}

pub fn read_header(path: impl AsRef<Path>) -> Result<TensorHeader> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::io_at(path, e))?;
    TensorHeader::read_from(&mut file)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let reader = TensorReader::open(path)?;
    reader.read_all()
}

/// Reads a whole tensor from an arbitrary byte stream.
pub fn read_tensor_from<R: Read>(mut reader: R) -> Result<Tensor> {
    let header = TensorHeader::read_from(&mut reader)?;
    let numel = header.numel() as usize;
    let mut data = Vec::with_capacity(numel);
    decode_into(&mut reader, header.dtype, numel, &mut data)?;
    let mut probe = [0u8; 1];
    if reader.read(&mut probe)? != 0 {
        return Err(Error::Size("trailing bytes after payload".into()));
    }
    Tensor::new(header.dims_usize(), data)
}

fn decode_into<R: Read>(reader: &mut R, dtype: DType, count: usize, out: &mut Vec<f32>) -> Result<()> {
    let elem = dtype.size();
    let per_step = SCRATCH_BYTES / elem;
    let mut scratch = vec![0u8; per_step.min(count.max(1)) * elem];
    let mut remaining = count;
    while remaining > 0 {
        let n = remaining.min(per_step);
        let bytes = &mut scratch[..n * elem];
        reader
            .read_exact(bytes)
            .map_err(|e| Error::Size(format!("payload truncated: {e}")))?;
        match dtype {
            DType::F32 => out.extend(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
            ),
            DType::F16 => out.extend(
                bytes
                    .chunks_exact(2)
                    .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32()),
            ),
        }
        remaining -= n;
    }
    Ok(())
}

/// Read-only handle on an ATNS file with a validated header.
pub struct TensorReader {
    file: File,
    header: TensorHeader,
}

impl TensorReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut file = File::open(path).map_err(|e| Error::io_at(path, e))?;
        let header = TensorHeader::read_from(&mut file)?;
        let len = file.metadata().map_err(|e| Error::io_at(path, e))?.len();
        let expected = header.byte_len() as u64 + header.payload_bytes();
        if len != expected {
            return Err(Error::Size(format!(
                "{} is {len} bytes, header declares {expected}",
                path.display()
            )));
        }
        Ok(Self { file, header })
    }

    pub fn header(&self) -> &TensorHeader {
        &self.header
    }

    pub fn read_all(mut self) -> Result<Tensor> {
        let numel = self.header.numel() as usize;
        let mut data = Vec::with_capacity(numel);
        decode_into(&mut self.file, self.header.dtype, numel, &mut data)?;
        Tensor::new(self.header.dims_usize(), data)
    }

    /// Iterates over slabs of `chunk` consecutive leading-axis indices.
    pub fn slabs(self, chunk: usize) -> Result<Slabs> {
        if chunk == 0 {
            return Err(Error::Input("chunk size must be positive".into()));
        }
        let dims = self.header.dims_usize();
        let inner: usize = dims[1..].iter().product();
        Ok(Slabs {
            file: self.file,
            dtype: self.header.dtype,
            dims,
            inner,
            chunk,
            next: 0,
        })
    }
}

/// A contiguous block of the leading axis, `[start, start + dims[0])`.
#[derive(Debug, Clone, PartialEq)]
pub struct Slab {
    pub start: usize,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub struct Slabs {
    file: File,
    dtype: DType,
    dims: Vec<usize>,
    inner: usize,
    chunk: usize,
    next: usize,
}

impl Slabs {
    pub fn tensor_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn slab_count(&self) -> usize {
        self.dims[0].div_ceil(self.chunk)
    }
}

impl Iterator for Slabs {
    type Item = Result<Slab>;

    fn next(&mut self) -> Option<Self::Item> {
        let lead = self.dims[0];
        if self.next >= lead {
            return None;
        }
        let start = self.next;
        let rows = self.chunk.min(lead - start);
        self.next += rows;
        let count = rows * self.inner;
        let mut data = Vec::with_capacity(count);
        if let Err(e) = decode_into(&mut self.file, self.dtype, count, &mut data) {
            self.next = lead;
            return Some(Err(e));
        }
        let mut dims = self.dims.clone();
        dims[0] = rows;
        Some(Ok(Slab { start, dims, data }))
    }
}

/// Streams `path` in slabs along `axis`, which must be the leading axis.
pub fn stream_slices(path: impl AsRef<Path>, axis: usize, chunk: usize) -> Result<Slabs> {
    if axis != 0 {
        return Err(Error::Unsupported(format!(
            "streaming is row-major along axis 0 only, got axis {axis}"
        )));
    }
    TensorReader::open(path)?.slabs(chunk)
}

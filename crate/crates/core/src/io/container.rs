//! Binary tensor and checkpoint containers.
//!
//! Tensor container layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "PAHATNSR"
//! version u32      1
//! dtype   u8       0 = f64, 1 = f32
//! rank    u32
//! dims    rank x u64
//! payload product(dims) x dtype size
//! crc32   u32      over every preceding byte
//! ```
//!
//! A checkpoint is `"PAHACKPT"`, version, a JSON metadata block
//! (`u64` length + UTF-8), a `u32` tensor count, then per tensor a `u32`
//! name length, the name, and a tensor record (dtype, rank, dims, payload),
//! closed by a CRC32 over everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{device, DTYPE};

pub const TENSOR_MAGIC: &[u8; 8] = b"PAHATNSR";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PAHACKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            t => Err(Error::Container(format!("unknown dtype tag {t}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorContainer {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Container(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn split_crc(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 4 {
        return Err(Error::Container("file shorter than its checksum".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Container(format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    Ok(body)
}

fn check_magic(r: &mut Reader, magic: &[u8; 8]) -> Result<()> {
    if r.take(8)? != magic {
        return Err(Error::Container("bad magic bytes".into()));
    }
    let v = r.u32()?;
    if v != VERSION {
        return Err(Error::Container(format!("unsupported version {v}")));
    }
    Ok(())
}

impl TensorContainer {
    pub fn new(dtype: DType, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} does not hold {} values", data.len())));
        }
        Ok(TensorContainer { dtype, shape, data })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let data = t.flatten_all()?.to_dtype(DTYPE)?.to_vec1::<f64>()?;
        TensorContainer::new(DType::F64, t.dims().to_vec(), data)
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), self.shape.clone(), &device())?)
    }

    fn write_record(&self, out: &mut Vec<u8>) {
        out.push(self.dtype.tag());
        out.extend((self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend((d as u64).to_le_bytes());
        }
        match self.dtype {
            DType::F64 => self.data.iter().for_each(|v| out.extend(v.to_le_bytes())),
            DType::F32 => self.data.iter().for_each(|v| out.extend((*v as f32).to_le_bytes())),
        }
    }

    fn read_record(r: &mut Reader) -> Result<Self> {
        let dtype = DType::from_tag(r.u8()?)?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * dtype.size())?;
        let data = match dtype {
            DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        Ok(TensorContainer { dtype, shape, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.data.len() * self.dtype.size());
        out.extend(TENSOR_MAGIC);
        out.extend(VERSION.to_le_bytes());
        self.write_record(&mut out);
        let crc = crc32fast::hash(&out);
        out.extend(crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = split_crc(bytes)?;
        let mut r = Reader { buf: body, pos: 0 };
        check_magic(&mut r, TENSOR_MAGIC)?;
        let t = TensorContainer::read_record(&mut r)?;
        if r.pos != body.len() {
            return Err(Error::Container(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(t)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        TensorContainer::from_bytes(&read_file(path)?)
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(format!("{} does not exist", path.display())),
        _ => Error::io(path, e),
    })
}

/// Named tensors with JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, TensorContainer>,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Checkpoint {
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert_tensors(&mut self, prefix: &str, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, v) in tensors {
            self.tensors.insert(format!("{prefix}{k}"), TensorContainer::from_tensor(v)?);
        }
        Ok(())
    }

    pub fn insert_values(&mut self, name: &str, values: &[f64]) {
        self.tensors.insert(
            name.to_string(),
            TensorContainer {
                dtype: DType::F64,
                shape: vec![values.len()],
                data: values.to_vec(),
            },
        );
    }

    /// Tensors under `prefix`, with the prefix stripped.
    pub fn tensors_with_prefix(&self, prefix: &str) -> Result<BTreeMap<String, Tensor>> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|rest| Ok((rest.to_string(), v.to_tensor()?))))
            .collect()
    }

    pub fn values(&self, name: &str) -> Result<&[f64]> {
        self.tensors
            .get(name)
            .map(|t| t.data.as_slice())
            .ok_or_else(|| Error::Container(format!("checkpoint lacks `{name}`")))
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Container(format!("checkpoint metadata lacks `{key}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.metadata).expect("json value serializes");
        let mut out = Vec::new();
        out.extend(CHECKPOINT_MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((meta.len() as u64).to_le_bytes());
        out.extend(&meta);
        out.extend((self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            t.write_record(&mut out);
        }
        let crc = crc32fast::hash(&out);
        out.extend(crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = split_crc(bytes)?;
        let mut r = Reader { buf: body, pos: 0 };
        check_magic(&mut r, CHECKPOINT_MAGIC)?;
        let meta_len = r.u64()? as usize;
        let metadata = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Container("tensor name is not UTF-8".into()))?;
            tensors.insert(name, TensorContainer::read_record(&mut r)?);
        }
        if r.pos != body.len() {
            return Err(Error::Container(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint { metadata, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&read_file(path)?)
    }
}

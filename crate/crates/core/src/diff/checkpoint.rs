//! Checkpoint file format: magic "PSIW", version u16, then a count-prefixed
//! list of named tensors (name, dtype code, rank, dims, little-endian values).

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PSIW";
pub const CHECKPOINT_VERSION: u16 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("PSIW checkpoint: io error: {0}")]
    Io(#[from] io::Error),
    #[error("PSIW checkpoint: {0}")]
    Format(String),
}

/// Values preserved at their stored precision, so a write-read-write cycle
/// is byte-identical.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    F32(Vec<f32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F64(v) => v.clone(),
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl CheckpointEntry {
    pub fn f64(name: impl Into<String>, dims: &[usize], values: Vec<f64>) -> Self {
        CheckpointEntry { name: name.into(), dims: dims.to_vec(), data: TensorData::F64(values) }
    }

    pub fn f32(name: impl Into<String>, dims: &[usize], values: Vec<f32>) -> Self {
        CheckpointEntry { name: name.into(), dims: dims.to_vec(), data: TensorData::F32(values) }
    }
}

pub fn write_checkpoint(path: &Path, entries: &[CheckpointEntry]) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in entries {
        let numel: usize = e.dims.iter().product();
        if numel != e.data.len() {
            return Err(CheckpointError::Format(format!(
                "entry '{}': dims {:?} imply {} values, got {}",
                e.name,
                e.dims,
                numel,
                e.data.len()
            )));
        }
        let name_bytes = e.name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        let dtype = match e.data {
            TensorData::F64(_) => DTYPE_F64,
            TensorData::F32(_) => DTYPE_F32,
        };
        w.write_all(&[dtype, e.dims.len() as u8])?;
        for &d in &e.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        match &e.data {
            TensorData::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            TensorData::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };

    let magic = cur.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Format(format!("bad magic {:?}, expected \"PSIW\"", magic)));
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Format(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Format("entry name is not UTF-8".into()))?;
        let dtype = cur.take(1)?[0];
        let rank = cur.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = dims.iter().product();
        let data = match dtype {
            DTYPE_F64 => {
                let raw = cur.take(numel * 8)?;
                TensorData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
            }
            DTYPE_F32 => {
                let raw = cur.take(numel * 4)?;
                TensorData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
            }
            other => {
                return Err(CheckpointError::Format(format!("unknown dtype code {other} for entry '{name}'")));
            }
        };
        entries.push(CheckpointEntry { name, dims, data });
    }
    if cur.pos != buf.len() {
        return Err(CheckpointError::Format(format!(
            "trailing bytes: file is {} bytes, parsed {}",
            buf.len(),
            cur.pos
        )));
    }
    Ok(entries)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Format(format!(
                "truncated file: wanted {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

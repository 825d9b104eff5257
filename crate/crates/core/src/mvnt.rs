//! MVNT binary tensor files.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "MVNT" | version: u32 = 1 | dtype: u32 | rank: u32 | dims: rank x u64 | payload
//! ```
//!
//! dtype codes: 1 = f64, 2 = f32, 3 = u8. Several records may be concatenated
//! in one stream; [`read_record`] consumes exactly one.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MVNT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
    U8,
}

impl DType {
    pub fn code(self) -> u32 {
        match self {
            DType::F64 => 1,
            DType::F32 => 2,
            DType::U8 => 3,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            1 => Ok(DType::F64),
            2 => Ok(DType::F32),
            3 => Ok(DType::U8),
            other => Err(Error::Mvnt(format!("unknown dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    F32(Vec<f32>),
    U8(Vec<u8>),
}

/// One decoded MVNT record.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl Record {
    pub fn f64(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Self {
        Record {
            shape: shape.into(),
            payload: Payload::F64(data),
        }
    }

    pub fn f32(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Self {
        Record {
            shape: shape.into(),
            payload: Payload::F32(data),
        }
    }

    pub fn u8(shape: impl Into<Vec<usize>>, data: Vec<u8>) -> Self {
        Record {
            shape: shape.into(),
            payload: Payload::U8(data),
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Record::f64(t.shape().to_vec(), t.data().to_vec())
    }

    pub fn dtype(&self) -> DType {
        match self.payload {
            Payload::F64(_) => DType::F64,
            Payload::F32(_) => DType::F32,
            Payload::U8(_) => DType::U8,
        }
    }

    fn payload_len(&self) -> usize {
        match &self.payload {
            Payload::F64(v) => v.len(),
            Payload::F32(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    /// Converts any dtype to an `f64` tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let data = match &self.payload {
            Payload::F64(v) => v.clone(),
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::U8(v) => v.iter().map(|&x| x as f64).collect(),
        };
        Tensor::new(self.shape.clone(), data)
    }

    pub fn into_u8(self) -> Result<(Vec<usize>, Vec<u8>)> {
        match self.payload {
            Payload::U8(v) => Ok((self.shape, v)),
            _ => Err(Error::Mvnt(format!("expected uint8 payload, got {:?}", self.dtype()))),
        }
    }

    pub fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        assert_eq!(
            self.shape.iter().product::<usize>(),
            self.payload_len(),
            "record shape does not match payload"
        );
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&self.dtype().code().to_le_bytes())?;
        out.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.payload_len() * self.dtype().size());
        match &self.payload {
            Payload::F64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            Payload::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            Payload::U8(v) => buf.extend_from_slice(v),
        }
        out.write_all(&buf)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Mvnt(format!("truncated {what}")));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn take_u32(bytes: &mut &[u8], what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, 4, what)?.try_into().unwrap()))
}

/// Decodes one record from the front of `bytes`, advancing the slice.
pub fn read_record(bytes: &mut &[u8]) -> Result<Record> {
    if take(bytes, 4, "magic")? != MAGIC {
        return Err(Error::Mvnt("bad magic".into()));
    }
    let version = take_u32(bytes, "version")?;
    if version != VERSION {
        return Err(Error::Mvnt(format!("unsupported version {version}")));
    }
    let dtype = DType::from_code(take_u32(bytes, "dtype")?)?;
    let rank = take_u32(bytes, "rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(bytes, 8, "dimensions")?.try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| Error::Mvnt("dimension overflow".into()))?);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Mvnt("element count overflow".into()))?;
    let nbytes = count
        .checked_mul(dtype.size())
        .ok_or_else(|| Error::Mvnt("payload size overflow".into()))?;
    if bytes.len() < nbytes {
        return Err(Error::Mvnt(format!(
            "payload length mismatch: need {nbytes} bytes, have {}",
            bytes.len()
        )));
    }
    let raw = take(bytes, nbytes, "payload")?;
    let payload = match dtype {
        DType::F64 => Payload::F64(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::F32 => Payload::F32(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::U8 => Payload::U8(raw.to_vec()),
    };
    Ok(Record { shape, payload })
}

/// Decodes a buffer holding exactly one record.
pub fn decode(bytes: &[u8]) -> Result<Record> {
    let mut rest = bytes;
    let rec = read_record(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Mvnt(format!(
            "payload length mismatch: {} trailing bytes",
            rest.len()
        )));
    }
    Ok(rec)
}

pub fn write_file(path: &Path, record: &Record) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&record.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Record> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

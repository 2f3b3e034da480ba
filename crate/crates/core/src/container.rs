//! Raw array container: `UNMA` magic, dtype code (u8), rank (u8), one
//! little-endian u64 per dimension, then the little-endian elements.
//! Several arrays may be concatenated in one file.

use std::fs;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::{LabelMap, Tensor};

pub const MAGIC: &[u8; 4] = b"UNMA";

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    U8(Vec<u8>),
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::U8(_) => DType::U8,
            ArrayData::F32(_) => DType::F32,
            ArrayData::F64(_) => DType::F64,
            ArrayData::I64(_) => DType::I64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::U8(v) => v.len(),
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawArray {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl RawArray {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let data = match T::DTYPE {
            DType::F32 => ArrayData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            _ => ArrayData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        RawArray { shape: t.shape().to_vec(), data }
    }

    pub fn from_labels(m: &LabelMap) -> Self {
        RawArray { shape: m.shape().to_vec(), data: ArrayData::U8(m.data().to_vec()) }
    }

    /// Converts any stored element type to `T`.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match &self.data {
            ArrayData::U8(v) => v.iter().map(|&x| T::cast(x as f64)).collect(),
            ArrayData::F32(v) => v.iter().map(|&x| T::cast(x as f64)).collect(),
            ArrayData::F64(v) => v.iter().map(|&x| T::cast(x)).collect(),
            ArrayData::I64(v) => v.iter().map(|&x| T::cast(x as f64)).collect(),
        };
        Tensor::from_vec(&self.shape, data)
    }

    /// Accepts u8 labels or integer labels within `0..=255`.
    pub fn to_labels(&self) -> Result<LabelMap> {
        let data = match &self.data {
            ArrayData::U8(v) => v.clone(),
            ArrayData::I64(v) => v
                .iter()
                .map(|&x| u8::try_from(x).map_err(|_| invalid!("label {x} out of range 0..=255")))
                .collect::<Result<_>>()?,
            other => return Err(invalid!("labels must be integers, found {:?}", other.dtype())),
        };
        LabelMap::new(&self.shape, data)
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.push(self.data.dtype().code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            ArrayData::U8(v) => out.extend_from_slice(v),
            ArrayData::F32(v) => v.iter().for_each(|x| x.write_le(out)),
            ArrayData::F64(v) => v.iter().for_each(|x| x.write_le(out)),
            ArrayData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    /// Decodes one array from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize)> {
        let short = || invalid!("truncated array container");
        if bytes.len() < 6 {
            return Err(short());
        }
        if &bytes[..4] != MAGIC {
            return Err(invalid!("bad magic bytes, expected UNMA"));
        }
        let dtype = DType::from_code(bytes[4]).ok_or_else(|| invalid!("unknown dtype code {}", bytes[4]))?;
        let rank = bytes[5] as usize;
        let mut pos = 6;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let raw = bytes.get(pos..pos + 8).ok_or_else(short)?;
            let d = u64::from_le_bytes(raw.try_into().expect("8 bytes"));
            shape.push(usize::try_from(d).map_err(|_| invalid!("dimension {d} too large"))?);
            pos += 8;
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| invalid!("array shape {shape:?} overflows"))?;
        let nbytes = n.checked_mul(dtype.size()).ok_or_else(short)?;
        let body = bytes.get(pos..pos + nbytes).ok_or_else(short)?;
        let data = match dtype {
            DType::U8 => ArrayData::U8(body.to_vec()),
            DType::F32 => ArrayData::F32(body.chunks_exact(4).map(f32::read_le).collect()),
            DType::F64 => ArrayData::F64(body.chunks_exact(8).map(f64::read_le).collect()),
            DType::I64 => ArrayData::I64(
                body.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
            ),
        };
        Ok((RawArray { shape, data }, pos + nbytes))
    }

    /// Decodes every array of a concatenated buffer.
    pub fn decode_all(mut bytes: &[u8]) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        while !bytes.is_empty() {
            let (a, used) = Self::decode(bytes)?;
            out.push(a);
            bytes = &bytes[used..];
        }
        Ok(out)
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_array(path: &Path) -> Result<RawArray> {
    let bytes = read_bytes(path)?;
    let (a, used) = RawArray::decode(&bytes).map_err(|e| invalid!("{}: {e}", path.display()))?;
    if used != bytes.len() {
        return Err(invalid!("{}: {} trailing bytes", path.display(), bytes.len() - used));
    }
    Ok(a)
}

pub fn write_array(path: &Path, array: &RawArray) -> Result<()> {
    write_bytes(path, &array.encode())
}

//! Dense row-major tensors and their binary on-disk encoding.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "QTNSR1"          6 bytes
//! dtype  u8                0 = f32, 1 = f64, 2 = i32
//! ndim   u8
//! dims   ndim x u64
//! data   row-major payload, little-endian elements
//! ```

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"QTNSR1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    I32,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::I32 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::I32),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I32(_) => DType::I32,
        }
    }
}

/// Immutable dense tensor. Construction validates the shape against the payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::InvalidTensor("shape must have at least one dimension".into()));
        }
        if shape.len() > u8::MAX as usize {
            return Err(Error::InvalidTensor(format!("too many dimensions: {}", shape.len())));
        }
        if let Some(pos) = shape.iter().position(|&d| d == 0) {
            return Err(Error::InvalidTensor(format!("dimension {pos} has size 0")));
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidTensor("element count overflows".into()))?;
        if numel != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} holds {numel} elements but payload has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, TensorData::F64(data))
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_i32(shape: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        Self::new(shape, TensorData::I32(data))
    }

    /// 2-D f64 tensor from a matrix, stored row-major.
    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        let data = m.transpose().as_slice().to_vec();
        Self::from_f64(vec![m.nrows(), m.ncols()], data)
    }

    /// 2-D f32 tensor from a matrix (narrowing).
    pub fn from_matrix_f32(m: &DMatrix<f64>) -> Result<Self> {
        let data = m.transpose().as_slice().iter().map(|&x| x as f32).collect();
        Self::from_f32(vec![m.nrows(), m.ncols()], data)
    }

    pub fn from_int_matrix(rows: usize, cols: usize, data: Vec<i32>) -> Result<Self> {
        Self::from_i32(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// All values widened to f64. Integer tensors are converted exactly.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::I32(v) => v.iter().map(|&x| f64::from(x)).collect(),
        }
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Some(v),
            _ => None,
        }
    }

    /// Interprets a 2-D tensor as a matrix, widening to f64.
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        let [rows, cols] = self.shape[..] else {
            return Err(Error::ShapeMismatch(format!(
                "expected a 2-D tensor, got shape {:?}",
                self.shape
            )));
        };
        Ok(DMatrix::from_row_slice(rows, cols, &self.to_f64_vec()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dtype = self.dtype();
        let mut out = Vec::with_capacity(8 + 8 * self.shape.len() + dtype.size_of() * self.numel());
        out.extend_from_slice(MAGIC);
        out.push(dtype.tag());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };

        let magic = cur.take(6, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                field: "magic",
                detail: format!("expected {:?}, found {:?}", MAGIC, magic),
            });
        }
        let tag = cur.take(1, "dtype")?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format {
            field: "dtype",
            detail: format!("tag {tag} out of range (0=f32, 1=f64, 2=i32)"),
        })?;
        let ndim = cur.take(1, "ndim")?[0] as usize;
        if ndim == 0 {
            return Err(Error::Format {
                field: "ndim",
                detail: "zero-dimensional tensors are not allowed".into(),
            });
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let raw = u64::from_le_bytes(cur.take(8, "dims")?.try_into().unwrap());
            let d = usize::try_from(raw).map_err(|_| Error::Format {
                field: "dims",
                detail: format!("dimension {raw} does not fit in usize"),
            })?;
            if d == 0 {
                return Err(Error::Format {
                    field: "dims",
                    detail: "dimension of size 0".into(),
                });
            }
            shape.push(d);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size_of()).map(|_| n))
            .ok_or_else(|| Error::Format {
                field: "dims",
                detail: "element count overflows".into(),
            })?;
        let payload = cur.take(numel * dtype.size_of(), "payload")?;
        if cur.pos != bytes.len() {
            return Err(Error::Format {
                field: "payload",
                detail: format!("{} trailing bytes after payload", bytes.len() - cur.pos),
            });
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::I32 => TensorData::I32(
                payload
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Tensor::new(shape, data)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Format {
                field,
                detail: format!(
                    "truncated: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            }),
        }
    }
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes)
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, t.to_bytes()).map_err(|e| Error::io(path, e))
}

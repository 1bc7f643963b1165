//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FGAK"                 4 bytes magic
//! version: u32           = 1
//! count:   u32           number of tensors
//! per tensor:
//!   name_len: u32, name: UTF-8 bytes
//!   dtype: u8            0 = f32, 1 = f64
//!   rank: u32, dims: u64 × rank
//!   payload              product(dims) × dtype size bytes
//! ```

use std::any::Any;
use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{format_err, Result};
use crate::numkit::Tensor;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"FGAK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            TensorData::F32(_) => f32::DTYPE_CODE,
            TensorData::F64(_) => f64::DTYPE_CODE,
        }
    }

    /// Converts to `T`; exact (bit-preserving) when the precision matches.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let same: Option<&Tensor<T>> = match self {
            TensorData::F32(t) => (t as &dyn Any).downcast_ref(),
            TensorData::F64(t) => (t as &dyn Any).downcast_ref(),
        };
        match (same, self) {
            (Some(t), _) => t.clone(),
            (None, TensorData::F32(t)) => t.cast(),
            (None, TensorData::F64(t)) => t.cast(),
        }
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let any = t as &dyn Any;
        if let Some(t) = any.downcast_ref::<Tensor<f32>>() {
            TensorData::F32(t.clone())
        } else if let Some(t) = any.downcast_ref::<Tensor<f64>>() {
            TensorData::F64(t.clone())
        } else if T::DTYPE_CODE == f64::DTYPE_CODE {
            TensorData::F64(t.cast())
        } else {
            TensorData::F32(t.cast())
        }
    }
}

/// Ordered collection of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    entries: Vec<(String, TensorData)>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn entries(&self) -> &[(String, TensorData)] {
        &self.entries
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) -> Result<()> {
        self.insert_data(name, TensorData::from_tensor(t))
    }

    pub fn insert_data(&mut self, name: impl Into<String>, data: TensorData) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(format_err!("duplicate tensor name '{name}'"));
        }
        self.entries.push((name, data));
        Ok(())
    }

    pub fn get_data(&self, name: &str) -> Option<&TensorData> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, d)| d)
    }

    /// Fetches `name`, converting to `T` if stored in the other precision.
    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.get_data(name)
            .map(TensorData::to_tensor)
            .ok_or_else(|| format_err!("tensor '{name}' missing"))
    }

    /// Like [`get`](Self::get) but also checks the stored shape.
    pub fn get_shaped<T: Scalar>(&self, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
        let t = self.get::<T>(name)?;
        if t.shape() != shape {
            return Err(format_err!(
                "tensor '{name}' has dims {:?}, expected {:?}",
                t.shape(),
                shape
            ));
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, data) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(data.dtype());
            let shape = data.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match data {
                TensorData::F32(t) => t.data().iter().for_each(|&x| x.write_le(&mut out)),
                TensorData::F64(t) => t.data().iter().for_each(|&x| x.write_le(&mut out)),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(format_err!("bad magic {:?}, expected \"FGAK\"", magic));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_err!(
                "unsupported tensor file version {version} (expected {VERSION})"
            ));
        }
        let count = r.u32()? as usize;
        let mut file = TensorFile::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| format_err!("tensor name is not UTF-8"))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(format_err!("duplicate tensor name '{name}'"));
            }
            let dtype = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                dims.push(usize::try_from(r.u64()?).map_err(|_| format_err!("dim overflows usize"))?);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| format_err!("tensor '{name}' dims overflow"))?;
            let data = match dtype {
                0 => TensorData::F32(Tensor::new(dims, r.payload::<f32>(numel, &name)?)?),
                1 => TensorData::F64(Tensor::new(dims, r.payload::<f64>(numel, &name)?)?),
                other => return Err(format_err!("unknown dtype code {other} for '{name}'")),
            };
            file.entries.push((name, data));
        }
        if r.pos != bytes.len() {
            return Err(format_err!("{} trailing bytes after last tensor", bytes.len() - r.pos));
        }
        Ok(file)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format_err!("truncated tensor file at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn payload<T: Scalar>(&mut self, numel: usize, name: &str) -> Result<Vec<T>> {
        let len = numel
            .checked_mul(T::SIZE)
            .ok_or_else(|| format_err!("payload of '{name}' overflows"))?;
        let raw = self.take(len)?;
        Ok(raw.chunks_exact(T::SIZE).map(T::read_le).collect())
    }
}

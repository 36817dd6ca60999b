//! Binary checkpoint format.
//!
//! Layout (all integers little-endian): magic `NCSL`, format version `u32`,
//! entry count `u64`, then per entry: name length `u16`, UTF-8 name, dtype
//! code `u8` (0 = f32, 1 = f64), rank `u8`, extents as `u64`, raw buffer.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{DiffError, Result};
use crate::graph::Graph;
use crate::optim::OptimizerState;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NCSL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
        }
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => TensorData::F32(t.cast()),
            DType::F64 => TensorData::F64(t.cast()),
        }
    }

    /// The stored tensor, which must already have element type `T`.
    pub fn to_tensor<T: Scalar>(&self) -> Option<Tensor<T>> {
        match (self, T::DTYPE) {
            (TensorData::F32(t), DType::F32) => Some(t.cast()),
            (TensorData::F64(t), DType::F64) => Some(t.cast()),
            _ => None,
        }
    }
}

/// Ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, TensorData)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(DiffError::Format {
                offset: self.pos as u64,
                detail: format!("truncated while reading {what} ({n} bytes needed, {} left)", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn err(&self, detail: impl Into<String>) -> DiffError {
        DiffError::Format {
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }
}

impl Checkpoint {
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

    /// Inserts or replaces an entry.
    pub fn insert(&mut self, name: impl Into<String>, data: TensorData) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = data,
            None => self.entries.push((name, data)),
        }
    }

    pub fn insert_tensor<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.insert(name, TensorData::from_tensor(t));
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, d)| d)
    }

    /// Entry `name` with element type `T`; errors when absent or of another dtype.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let data = self
            .get(name)
            .ok_or_else(|| DiffError::ParamMismatch(format!("checkpoint has no entry `{name}`")))?;
        data.to_tensor().ok_or_else(|| {
            DiffError::ParamMismatch(format!("entry `{name}` is {:?}, expected {:?}", data.dtype(), T::DTYPE))
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, data) in &self.entries {
            let name_bytes = name.as_bytes();
            out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(name_bytes);
            out.push(data.dtype().code());
            out.push(data.shape().len() as u8);
            for &e in data.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            match data {
                TensorData::F32(t) => f32::write_le(t.data(), &mut out),
                TensorData::F64(t) => f64::write_le(t.data(), &mut out),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(DiffError::Format { offset: 0, detail: "bad magic, expected NCSL".into() });
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(DiffError::Format { offset: 4, detail: format!("unsupported format version {version}") });
        }
        let count = r.u64("entry count")?;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| r.err("entry name is not UTF-8"))?
                .to_string();
            let code = r.u8("dtype")?;
            let dtype = DType::from_code(code).ok_or_else(|| r.err(format!("unknown dtype code {code}")))?;
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("extent")? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
            let numel = numel.ok_or_else(|| r.err("extents overflow"))?;
            let raw = r.take(numel * dtype.size(), &format!("buffer of `{name}`"))?;
            let data = match dtype {
                DType::F32 => TensorData::F32(Tensor::new(shape, f32::read_le(raw)).map_err(|e| r.err(e.to_string()))?),
                DType::F64 => TensorData::F64(Tensor::new(shape, f64::read_le(raw)).map_err(|e| r.err(e.to_string()))?),
            };
            ckpt.insert(name, data);
        }
        if r.pos != bytes.len() {
            return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Stores parameter values and batch-norm running statistics under `prefix`.
    pub fn put_graph<T: Scalar>(&mut self, prefix: &str, graph: &Graph<T>) {
        for p in graph.params() {
            self.insert_tensor(format!("{prefix}param/{}", p.name), &p.value);
        }
        for s in graph.stats() {
            self.insert_tensor(format!("{prefix}bn/{}/mean", s.name), &s.mean);
            self.insert_tensor(format!("{prefix}bn/{}/var", s.name), &s.var);
        }
    }

    /// Restores every parameter and statistic of `graph`; all must be present
    /// with matching shapes and dtype.
    pub fn restore_graph<T: Scalar>(&self, prefix: &str, graph: &mut Graph<T>) -> Result<()> {
        let mut values = Vec::with_capacity(graph.params().len());
        for p in graph.params() {
            let t: Tensor<T> = self.tensor(&format!("{prefix}param/{}", p.name))?;
            if t.shape() != p.value.shape() {
                return Err(DiffError::ParamMismatch(format!(
                    "`{}` is {:?} in the checkpoint but {:?} in the model",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            values.push(t);
        }
        let mut stats = Vec::with_capacity(graph.stats().len());
        for s in graph.stats() {
            let mean: Tensor<T> = self.tensor(&format!("{prefix}bn/{}/mean", s.name))?;
            let var: Tensor<T> = self.tensor(&format!("{prefix}bn/{}/var", s.name))?;
            if mean.shape() != s.mean.shape() || var.shape() != s.var.shape() {
                return Err(DiffError::ParamMismatch(format!("statistics `{}` have the wrong shape", s.name)));
            }
            stats.push((mean, var));
        }
        for (p, v) in graph.params_mut().iter_mut().zip(values) {
            p.value = v;
        }
        for (s, (m, v)) in graph.stats_mut().iter_mut().zip(stats) {
            s.mean = m;
            s.var = v;
        }
        Ok(())
    }

    pub fn put_optimizer<T: Scalar>(&mut self, prefix: &str, graph: &Graph<T>, state: &OptimizerState<T>) {
        for (p, b) in graph.params().iter().zip(&state.buffers) {
            self.insert_tensor(format!("{prefix}momentum/{}", p.name), b);
        }
    }

    pub fn restore_optimizer<T: Scalar>(&self, prefix: &str, graph: &Graph<T>, state: &mut OptimizerState<T>) -> Result<()> {
        let mut buffers = Vec::with_capacity(graph.params().len());
        for p in graph.params() {
            let b: Tensor<T> = self.tensor(&format!("{prefix}momentum/{}", p.name))?;
            if b.shape() != p.value.shape() {
                return Err(DiffError::ParamMismatch(format!("momentum buffer of `{}` has the wrong shape", p.name)));
            }
            buffers.push(b);
        }
        state.buffers = buffers;
        Ok(())
    }
}

//! `CRPTCKPT` checkpoint files.
//!
//! Layout (little-endian): magic `CRPTCKPT`, `u32` version, `u32` entry
//! count, then per entry a `u32`-prefixed UTF-8 name, a `u8` dtype code
//! (0 = f32, 1 = f64), a `u32` rank, `u64` extents and the raw scalars.

use std::fs;
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::ndmath::params::ParamSet;
use crate::ndmath::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &str = "CRPTCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub raw: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Checkpoint {
    entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn push_tensor<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let mut raw = Vec::with_capacity(t.len() * T::DTYPE.size());
        for &x in t.data() {
            x.write_le(&mut raw);
        }
        self.entries.push(Entry {
            name: name.into(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            raw,
        });
    }

    /// Store every tensor of `params` as `{prefix}{name}`, plus its step counter.
    pub fn push_params<T: Scalar>(&mut self, prefix: &str, params: &ParamSet<T>) {
        for p in params.iter() {
            self.push_tensor(format!("{prefix}{}", p.name), &p.value);
        }
        self.push_tensor(format!("meta/{prefix}step"), &Tensor::scalar(params.step as f64));
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Decode an entry, converting precision if the stored dtype differs.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self
            .get(name)
            .ok_or_else(|| Error::shape(format!("checkpoint has no entry `{name}`")))?;
        let width = e.dtype.size();
        let data: Vec<T> = match e.dtype {
            DType::F32 => e.raw.chunks(width).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            DType::F64 => e.raw.chunks(width).map(|c| T::lit(f64::read_le(c))).collect(),
        };
        Tensor::new(&e.shape, data)
    }

    /// Rebuild a parameter set from all entries under `prefix`.
    pub fn params<T: Scalar>(&self, prefix: &str) -> Result<ParamSet<T>> {
        let mut out = ParamSet::new();
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            out.insert(&e.name[prefix.len()..], self.tensor(&e.name)?)?;
        }
        if let Ok(step) = self.tensor::<f64>(&format!("meta/{prefix}step")) {
            out.step = step.data()[0] as u64;
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC.as_bytes());
        w.u32(VERSION);
        w.u32(self.entries.len() as u32);
        for e in &self.entries {
            w.str(&e.name);
            w.u8(e.dtype.code());
            w.u32(e.shape.len() as u32);
            for &d in &e.shape {
                w.u64(d as u64);
            }
            w.bytes(&e.raw);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.header(MAGIC, VERSION)?;
        let count = r.u32("entry count")?;
        let mut entries = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let name = r.str("entry name")?;
            let code = r.u8("dtype")?;
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::Truncated(format!("unknown dtype code {code}")))?;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64("extent")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| Error::Truncated(format!("entry `{name}` size overflows")))?;
            let raw = r.take(numel, "tensor data")?.to_vec();
            entries.push(Entry {
                name,
                dtype,
                shape,
                raw,
            });
        }
        r.finish()?;
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

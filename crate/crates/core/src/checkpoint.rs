//! Binary checkpoint container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "NCKG" | version: u32 | fingerprint: u64 | record*
//! record = name_len: u32 | name: utf-8 | dtype: u8 | rank: u32 | extents: u64*rank | values
//! ```
//!
//! dtype tags: 0 = f32, 1 = f64, 2 = u64.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"NCKG";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Values {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl Values {
    fn len(&self) -> usize {
        match self {
            Values::F32(v) => v.len(),
            Values::F64(v) => v.len(),
            Values::U64(v) => v.len(),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Values::F32(_) => 0,
            Values::F64(_) => 1,
            Values::U64(_) => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Values,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: u64,
    pub records: Vec<Record>,
}

#[cfg(not(feature = "f32"))]
fn real_values(data: &[Real]) -> Values {
    Values::F64(data.to_vec())
}

#[cfg(feature = "f32")]
fn real_values(data: &[Real]) -> Values {
    Values::F32(data.to_vec())
}

impl Checkpoint {
    pub fn new(fingerprint: u64) -> Self {
        Checkpoint {
            fingerprint,
            records: Vec::new(),
        }
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.records.push(Record {
            name: name.into(),
            shape: t.shape().to_vec(),
            values: real_values(t.data()),
        });
    }

    pub fn push_reals(&mut self, name: impl Into<String>, data: &[Real]) {
        self.records.push(Record {
            name: name.into(),
            shape: vec![data.len()],
            values: real_values(data),
        });
    }

    pub fn push_u64s(&mut self, name: impl Into<String>, data: &[u64]) {
        self.records.push(Record {
            name: name.into(),
            shape: vec![data.len()],
            values: Values::U64(data.to_vec()),
        });
    }

    pub fn get(&self, name: &str) -> Result<&Record> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record `{name}`")))
    }

    /// Reads a floating-point record, converting precision if needed.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let r = self.get(name)?;
        let data: Vec<Real> = match &r.values {
            Values::F32(v) => v.iter().map(|&x| x as Real).collect(),
            Values::F64(v) => v.iter().map(|&x| x as Real).collect(),
            Values::U64(_) => return Err(Error::Checkpoint(format!("record `{name}` is not floating point"))),
        };
        if r.shape.is_empty() {
            return Ok(Tensor::scalar(data[0]));
        }
        Tensor::new(r.shape.clone(), data).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match &self.get(name)?.values {
            Values::U64(v) => Ok(v),
            _ => Err(Error::Checkpoint(format!("record `{name}` is not u64"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.values.tag());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &e in &r.shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            match &r.values {
                Values::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Values::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Values::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let fingerprint = cur.u64()?;
        let mut records = Vec::new();
        while cur.pos < bytes.len() {
            let len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("record name is not utf-8".into()))?;
            let tag = cur.take(1)?[0];
            let rank = cur.u32()? as usize;
            let shape = (0..rank).map(|_| cur.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let values = match tag {
                0 => Values::F32((0..n).map(|_| cur.array().map(f32::from_le_bytes)).collect::<Result<_>>()?),
                1 => Values::F64((0..n).map(|_| cur.array().map(f64::from_le_bytes)).collect::<Result<_>>()?),
                2 => Values::U64((0..n).map(|_| cur.array().map(u64::from_le_bytes)).collect::<Result<_>>()?),
                t => return Err(Error::Checkpoint(format!("unknown dtype tag {t} in `{name}`"))),
            };
            debug_assert_eq!(values.len(), n);
            records.push(Record { name, shape, values });
        }
        Ok(Checkpoint { fingerprint, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice length"))
    }

    fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }
}

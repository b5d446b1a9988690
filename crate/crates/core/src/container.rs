//! Flat little-endian container of named numeric arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  b"VIDARR\0\x01"
//! version  u32      1
//! meta_len u32      length of the UTF-8 metadata block
//! meta     bytes    free-form UTF-8 (TOML by convention)
//! count    u32      number of arrays
//! per array:
//!   name_len u16, name bytes (UTF-8)
//!   dtype    u8     1 = f32, 2 = f64
//!   ndim     u8
//!   dims     u64 × ndim
//!   data     product(dims) × sizeof(dtype) bytes
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"VIDARR\0\x01";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 1,
            ArrayData::F64(_) => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f32(name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Result<Self> {
        Self::new(name.into(), shape, ArrayData::F32(data))
    }

    pub fn f64(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::new(name.into(), shape, ArrayData::F64(data))
    }

    fn new(name: String, shape: &[usize], data: ArrayData) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(n, data.len()));
        }
        if name.len() > u16::MAX as usize || shape.len() > u8::MAX as usize {
            return Err(Error::Format(format!("array {name:?}: name or rank too large")));
        }
        Ok(Self {
            name,
            shape: shape.to_vec(),
            data,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ArrayContainer {
    pub meta: String,
    pub arrays: Vec<NamedArray>,
}

impl ArrayContainer {
    pub fn new(meta: impl Into<String>) -> Self {
        Self {
            meta: meta.into(),
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, a: NamedArray) -> Result<()> {
        if self.get(&a.name).is_some() {
            return Err(Error::Format(format!("duplicate array name {:?}", a.name)));
        }
        self.arrays.push(a);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// The named array, which must be f32 with the given shape.
    pub fn expect_f32(&self, name: &str, shape: &[usize]) -> Result<&[f32]> {
        let a = self
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing array {name:?}")))?;
        if a.shape != shape {
            return Err(Error::shape(shape, &a.shape));
        }
        match &a.data {
            ArrayData::F32(v) => Ok(v),
            ArrayData::F64(_) => Err(Error::Format(format!("array {name:?}: expected f32"))),
        }
    }

    /// The named f64 array and its shape.
    pub fn expect_f64(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let a = self
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing array {name:?}")))?;
        match &a.data {
            ArrayData::F64(v) => Ok((&a.shape, v)),
            ArrayData::F32(_) => Err(Error::Format(format!("array {name:?}: expected f64"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u16).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.push(a.data.dtype());
            out.push(a.shape.len() as u8);
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not an array container (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut c = ArrayContainer::new(meta);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let d = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
                shape.push(usize::try_from(d).map_err(|_| Error::Format("dimension overflow".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format("array size overflow".into()))?;
            let data = match dtype {
                1 => ArrayData::F32(
                    r.take(n.checked_mul(4).ok_or_else(|| Error::Format("array size overflow".into()))?)?
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                2 => ArrayData::F64(
                    r.take(n.checked_mul(8).ok_or_else(|| Error::Format("array size overflow".into()))?)?
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                other => return Err(Error::Format(format!("array {name:?}: unknown dtype {other}"))),
            };
            c.push(NamedArray { name, shape, data })?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(c)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("unexpected end of container".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

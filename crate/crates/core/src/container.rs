//! Binary container shared by datasets and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes   b"EXOLAMC\0"
//! version   u32       1
//! meta_len  u64       length of the JSON metadata block
//! meta      bytes     UTF-8 JSON (the generating config plus extras)
//! count     u32       number of tensors
//! table     count × { name_len u16, name bytes, dtype u8 (0 = f64, 1 = u32),
//!                     ndim u8, dims u64 × ndim }
//! payload   tensors in table order, row-major, little-endian
//! ```

use std::io::{Read, Write};

pub const MAGIC: &[u8; 8] = b"EXOLAMC\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    U32(Vec<u32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f64(name: &str, dims: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "tensor '{name}' shape/data mismatch");
        Self { name: name.to_string(), dims: dims.to_vec(), data: TensorData::F64(data) }
    }

    pub fn u32(name: &str, dims: &[usize], data: Vec<u32>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "tensor '{name}' shape/data mismatch");
        Self { name: name.to_string(), dims: dims.to_vec(), data: TensorData::U32(data) }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an exolam container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error("metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error("missing tensor '{0}'")]
    Missing(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, t: Tensor) {
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ContainerError> {
        self.tensors.iter().find(|t| t.name == name).ok_or_else(|| ContainerError::Missing(name.to_string()))
    }

    pub fn f64s(&self, name: &str) -> Result<(&[usize], &[f64]), ContainerError> {
        let t = self.get(name)?;
        match &t.data {
            TensorData::F64(v) => Ok((&t.dims, v)),
            TensorData::U32(_) => Err(ContainerError::Malformed(format!("tensor '{name}' is u32, expected f64"))),
        }
    }

    pub fn u32s(&self, name: &str) -> Result<(&[usize], &[u32]), ContainerError> {
        let t = self.get(name)?;
        match &t.data {
            TensorData::U32(v) => Ok((&t.dims, v)),
            TensorData::F64(_) => Err(ContainerError::Malformed(format!("tensor '{name}' is f64, expected u32"))),
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), ContainerError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            let name = t.name.as_bytes();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            let dtype: u8 = match t.data {
                TensorData::F64(_) => 0,
                TensorData::U32(_) => 1,
            };
            w.write_all(&[dtype, t.dims.len() as u8])?;
            for &d in &t.dims {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
        }
        for t in &self.tensors {
            match &t.data {
                TensorData::F64(v) => {
                    let mut buf = Vec::with_capacity(v.len() * 8);
                    v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
                    w.write_all(&buf)?;
                }
                TensorData::U32(v) => {
                    let mut buf = Vec::with_capacity(v.len() * 4);
                    v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
                    w.write_all(&buf)?;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, ContainerError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(ContainerError::Version(version));
        }
        let meta_len = read_u64(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let meta: serde_json::Value = serde_json::from_slice(&meta)?;
        let count = read_u32(&mut r)? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let mut nl = [0u8; 2];
            r.read_exact(&mut nl)?;
            let mut name = vec![0u8; u16::from_le_bytes(nl) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| ContainerError::Malformed(e.to_string()))?;
            let mut hdr = [0u8; 2];
            r.read_exact(&mut hdr)?;
            let dims = (0..hdr[1]).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            table.push((name, hdr[0], dims));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, dtype, dims) in table {
            let n: usize = dims.iter().product();
            let data = match dtype {
                0 => {
                    let mut buf = vec![0u8; n * 8];
                    r.read_exact(&mut buf)?;
                    TensorData::F64(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
                }
                1 => {
                    let mut buf = vec![0u8; n * 4];
                    r.read_exact(&mut buf)?;
                    TensorData::U32(buf.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
                }
                other => return Err(ContainerError::Malformed(format!("unknown dtype tag {other} for '{name}'"))),
            };
            tensors.push(Tensor { name, dims, data });
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ContainerError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ContainerError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, ContainerError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, ContainerError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

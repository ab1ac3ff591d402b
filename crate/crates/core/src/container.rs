//! Single-file tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AMPN"  u32 version  u32 kind
//! u32 header_len  header (UTF-8 key=value lines)
//! u64 step
//! u32 tensor_count  { u32 name_len  name  u32 dims[4]  f32 data[prod(dims)] }*
//! u8 has_optimizer  [ u64 adam_step  { f32 m[..] }*  { f32 v[..] }* ]
//! ```
//!
//! Optimizer moments reuse the shapes of the tensors they belong to.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AMPN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContainerKind {
    Checkpoint = 1,
    Extractor = 2,
}

impl ContainerKind {
    fn from_u32(v: u32) -> Result<Self> {
        match v {
            1 => Ok(ContainerKind::Checkpoint),
            2 => Ok(ContainerKind::Extractor),
            other => Err(Error::Checkpoint(format!("unknown container kind {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: ContainerKind,
    pub header: String,
    pub step: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<AdamState>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?;
        let raw = self.take(len)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, self.kind as u32);
        put_u32(&mut out, self.header.len() as u32);
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            for d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            put_f32s(&mut out, t.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(state) => {
                out.push(1);
                out.extend_from_slice(&state.step.to_le_bytes());
                for m in &state.m {
                    put_f32s(&mut out, m.data());
                }
                for v in &state.v {
                    put_f32s(&mut out, v.data());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("missing AMPN magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let kind = ContainerKind::from_u32(r.u32()?)?;
        let hlen = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(hlen)?)
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?
            .to_owned();
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_owned();
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = r.u32()? as usize;
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
            tensors.push((name, Tensor::from_vec(shape, r.f32s(numel)?)));
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let read_all = |r: &mut Reader| -> Result<Vec<Tensor<f32>>> {
                    tensors.iter().map(|(_, t)| Ok(Tensor::from_vec(t.shape(), r.f32s(t.numel())?))).collect()
                };
                let m = read_all(&mut r)?;
                let v = read_all(&mut r)?;
                Some(AdamState { step, m, v })
            }
            other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after container".into()));
        }
        Ok(Container { kind, header, step, tensors, optimizer })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path.as_ref())?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut f = std::fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

//! Binary checkpoints.
//!
//! Layout: `SAFD`, u32 version, u32 tensor count, then per tensor a u16 name
//! length, the name, a u8 dtype code (0 f32, 1 f64, 2 u64, 3 u8), a u8 rank,
//! u32 dims and the little-endian payload. The file ends with the SHA-256 of
//! every preceding byte. Integers are little-endian.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::optim::Adam;
use crate::error::{Error, Result};
use crate::sparse::Parameters;

pub const MAGIC: [u8; 4] = *b"SAFD";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

const ITERATION: &str = "meta.iteration";
const ADAM_STEP: &str = "meta.adam_step";
const CONFIG: &str = "meta.config";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl TensorData {
    fn code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::U64(_) => 2,
            TensorData::U8(_) => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                offset: self.pos,
                expected: n,
                found: self.bytes.len() - self.pos,
            }),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: TensorData) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.data.code());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 + DIGEST_LEN {
            return Err(Error::Truncated {
                offset: 0,
                expected: 12 + DIGEST_LEN,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::BadVersion(version));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::DigestMismatch);
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::BadHeader {
                offset: at,
                msg: "tensor name is not UTF-8".into(),
            })?;
            let code = r.u8()?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let width = match code {
                0 => 4,
                1 | 2 => 8,
                3 => 1,
                other => {
                    return Err(Error::BadHeader {
                        offset: at,
                        msg: format!("unknown dtype code {other} for `{name}`"),
                    })
                }
            };
            let raw = r.take(n.checked_mul(width).ok_or_else(|| Error::BadHeader {
                offset: at,
                msg: "tensor too large".into(),
            })?)?;
            let data = match code {
                0 => TensorData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => TensorData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                2 => TensorData::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
                _ => TensorData::U8(raw.to_vec()),
            };
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(Error::BadHeader {
                offset: r.pos,
                msg: format!("{} trailing bytes before the digest", body.len() - r.pos),
            });
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Parameters and buffers, Adam moments, iteration and config text.
    pub fn capture<P: Parameters<f64> + ?Sized>(model: &mut P, adam: &Adam, iteration: u64, config_text: &str) -> Self {
        let mut ck = Checkpoint::default();
        model.visit_params(&mut |p| ck.push(p.name, p.shape, TensorData::F64(p.value.to_vec())));
        for (k, name) in adam.names.iter().enumerate() {
            let n = adam.m[k].len();
            ck.push(format!("{name}.adam_m"), vec![n], TensorData::F64(adam.m[k].clone()));
            ck.push(format!("{name}.adam_v"), vec![n], TensorData::F64(adam.v[k].clone()));
        }
        ck.push(ITERATION, vec![1], TensorData::U64(vec![iteration]));
        ck.push(ADAM_STEP, vec![1], TensorData::U64(vec![adam.step]));
        let text = config_text.as_bytes().to_vec();
        ck.push(CONFIG, vec![text.len()], TensorData::U8(text));
        ck
    }

    fn scalar_u64(&self, name: &str) -> Result<u64> {
        match self.get(name).map(|t| &t.data) {
            Some(TensorData::U64(v)) if v.len() == 1 => Ok(v[0]),
            _ => Err(Error::BadHeader {
                offset: 0,
                msg: format!("missing or malformed `{name}`"),
            }),
        }
    }

    pub fn iteration(&self) -> Result<u64> {
        self.scalar_u64(ITERATION)
    }

    pub fn config_text(&self) -> Result<String> {
        match self.get(CONFIG).map(|t| &t.data) {
            Some(TensorData::U8(v)) => String::from_utf8(v.clone()).map_err(|_| Error::BadHeader {
                offset: 0,
                msg: "config text is not UTF-8".into(),
            }),
            _ => Err(Error::BadHeader {
                offset: 0,
                msg: format!("missing `{CONFIG}`"),
            }),
        }
    }

    fn f64_tensor(&self, name: &str, len: usize) -> Result<&[f64]> {
        match self.get(name).map(|t| &t.data) {
            Some(TensorData::F64(v)) if v.len() == len => Ok(v),
            Some(_) => Err(Error::ShapeMismatch(format!("checkpoint tensor `{name}` has the wrong type or size"))),
            None => Err(Error::ShapeMismatch(format!("checkpoint lacks `{name}`"))),
        }
    }

    /// Overwrites every parameter and buffer of `model`.
    pub fn restore_model<P: Parameters<f64> + ?Sized>(&self, model: &mut P) -> Result<()> {
        let mut err = None;
        model.visit_params(&mut |p| {
            if err.is_some() {
                return;
            }
            match self.f64_tensor(&p.name, p.value.len()) {
                Ok(v) => p.value.copy_from_slice(v),
                Err(e) => err = Some(e),
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// Optimizer state matching the trainable tensors of `model`.
    pub fn restore_adam<P: Parameters<f64> + ?Sized>(&self, model: &mut P, adam: &mut Adam) -> Result<()> {
        adam.step = self.scalar_u64(ADAM_STEP)?;
        adam.names.clear();
        adam.m.clear();
        adam.v.clear();
        if adam.step == 0 {
            return Ok(());
        }
        let mut err = None;
        model.visit_params(&mut |p| {
            if p.grad.is_none() || err.is_some() {
                return;
            }
            let n = p.value.len();
            let m = self.f64_tensor(&format!("{}.adam_m", p.name), n);
            let v = self.f64_tensor(&format!("{}.adam_v", p.name), n);
            match (m, v) {
                (Ok(m), Ok(v)) => {
                    adam.names.push(p.name.clone());
                    adam.m.push(m.to_vec());
                    adam.v.push(v.to_vec());
                }
                (Err(e), _) | (_, Err(e)) => err = Some(e),
            }
        });
        err.map_or(Ok(()), Err)
    }
}

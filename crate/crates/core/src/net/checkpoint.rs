//! Checkpoint container. Byte layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "DMFC"
//! version      u32      (currently 1)
//! kind         u8       0 pretrained-coarse, 1 retrained-coarse,
//!                       2 pretrained-fine, 3 retrained-fine, 4 discriminator
//! spec         u32 n_res_blocks, u32 n_features, u32 fine_layers,
//!              u32 disc_layers, f32 value_lo, f32 value_hi
//! step         u64      training step counter
//! count        u32      number of tensors
//! directory    count entries of:
//!                u16 name_len, name bytes (utf-8), u8 trainable,
//!                u8 ndim, ndim x u32 dims, u64 payload offset
//! payload      raw f32 little-endian tensor data at the given offsets
//! ```

use super::{NetworkSpec, ParamSet};
use crate::error::{CheckpointError, Error, Result};
use crate::tensor::Tensor;
use std::fmt;
use std::path::Path;

const MAGIC: &[u8; 4] = b"DMFC";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetKind {
    CoarsePretrained,
    CoarseRetrained,
    FinePretrained,
    FineRetrained,
    Discriminator,
}

impl NetKind {
    fn tag(&self) -> u8 {
        match self {
            NetKind::CoarsePretrained => 0,
            NetKind::CoarseRetrained => 1,
            NetKind::FinePretrained => 2,
            NetKind::FineRetrained => 3,
            NetKind::Discriminator => 4,
        }
    }

    fn from_tag(t: u8) -> Option<NetKind> {
        match t {
            0 => Some(NetKind::CoarsePretrained),
            1 => Some(NetKind::CoarseRetrained),
            2 => Some(NetKind::FinePretrained),
            3 => Some(NetKind::FineRetrained),
            4 => Some(NetKind::Discriminator),
            _ => None,
        }
    }
}

impl fmt::Display for NetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NetKind::CoarsePretrained => "pretrained-coarse",
            NetKind::CoarseRetrained => "retrained-coarse",
            NetKind::FinePretrained => "pretrained-fine",
            NetKind::FineRetrained => "retrained-fine",
            NetKind::Discriminator => "discriminator",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug)]
pub struct CheckpointTensor {
    pub name: String,
    pub trainable: bool,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: NetKind,
    pub spec: NetworkSpec,
    pub step: u64,
    pub tensors: Vec<CheckpointTensor>,
}

impl Checkpoint {
    pub fn from_params(kind: NetKind, spec: NetworkSpec, step: u64, params: &ParamSet) -> Self {
        let tensors = params
            .entries()
            .iter()
            .map(|e| CheckpointTensor {
                name: e.name.clone(),
                trainable: e.trainable,
                shape: e.tensor.shape().to_vec(),
                data: e.tensor.data().to_vec(),
            })
            .collect();
        Checkpoint {
            kind,
            spec,
            step,
            tensors,
        }
    }

    /// Copy checkpoint tensors into a freshly constructed parameter set.
    /// The name sets must match exactly, shapes included.
    pub fn fill(&self, params: &mut ParamSet) -> Result<()> {
        if self.tensors.len() != params.entries().len() {
            return Err(CheckpointError::NameMismatch(format!(
                "checkpoint has {} tensors, network wants {}",
                self.tensors.len(),
                params.entries().len()
            ))
            .into());
        }
        for t in &self.tensors {
            let entry = params.by_name_mut(&t.name).ok_or_else(|| {
                Error::from(CheckpointError::NameMismatch(format!(
                    "network has no parameter named {}",
                    t.name
                )))
            })?;
            if entry.tensor.shape() != t.shape.as_slice() {
                return Err(CheckpointError::SpecMismatch(format!(
                    "{} has shape {:?} in the checkpoint but {:?} in the network",
                    t.name,
                    t.shape,
                    entry.tensor.shape()
                ))
                .into());
            }
            entry.tensor = Tensor::new(&t.shape, t.data.clone())?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut head = Vec::new();
        head.extend_from_slice(MAGIC);
        head.extend_from_slice(&VERSION.to_le_bytes());
        head.push(self.kind.tag());
        head.extend_from_slice(&(self.spec.n_res_blocks as u32).to_le_bytes());
        head.extend_from_slice(&(self.spec.n_features as u32).to_le_bytes());
        head.extend_from_slice(&(self.spec.fine_layers as u32).to_le_bytes());
        head.extend_from_slice(&(self.spec.disc_layers as u32).to_le_bytes());
        head.extend_from_slice(&self.spec.value_lo.to_le_bytes());
        head.extend_from_slice(&self.spec.value_hi.to_le_bytes());
        head.extend_from_slice(&self.step.to_le_bytes());
        head.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());

        let mut payload = Vec::new();
        for t in &self.tensors {
            head.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            head.extend_from_slice(t.name.as_bytes());
            head.push(t.trainable as u8);
            head.push(t.shape.len() as u8);
            for d in &t.shape {
                head.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            head.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            for v in &t.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        head.extend_from_slice(&payload);

        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, &head).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader { bytes: &bytes, pos: 0 };

        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version).into());
        }
        let kind = NetKind::from_tag(r.u8()?).ok_or(CheckpointError::Truncated)?;
        let spec = NetworkSpec {
            n_res_blocks: r.u32()? as usize,
            n_features: r.u32()? as usize,
            fine_layers: r.u32()? as usize,
            disc_layers: r.u32()? as usize,
            value_lo: r.f32()?,
            value_hi: r.f32()?,
        };
        let step = r.u64()?;
        let count = r.u32()? as usize;

        struct Entry {
            name: String,
            trainable: bool,
            shape: Vec<usize>,
            offset: u64,
        }
        let mut dir = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Truncated)?;
            let trainable = r.u8()? != 0;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let offset = r.u64()?;
            dir.push(Entry {
                name,
                trainable,
                shape,
                offset,
            });
        }

        let payload = &bytes[r.pos..];
        let mut tensors = Vec::with_capacity(count);
        for e in dir {
            let numel: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start
                .checked_add(numel * 4)
                .ok_or(CheckpointError::Truncated)?;
            if end > payload.len() {
                return Err(CheckpointError::Truncated.into());
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(CheckpointTensor {
                name: e.name,
                trainable: e.trainable,
                shape: e.shape,
                data,
            });
        }
        Ok(Checkpoint {
            kind,
            spec,
            step,
            tensors,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated.into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

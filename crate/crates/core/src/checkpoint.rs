//! Binary model checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic    8 bytes  "DPNCKPT1"
//! version  u32      FORMAT_VERSION
//! header   u32 length + JSON {dims, router_layers, n_experts, step}
//! count    u32      number of tensors
//! tensor*  u32 name length, name (UTF-8), u32 rank, u64 extents, f64 data
//! ```
//!
//! Tensors appear in sorted name order, so equal models give equal bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::transformer::{Model, ModelDims};

pub const MAGIC: &[u8; 8] = b"DPNCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    dims: ModelDims,
    router_layers: Vec<usize>,
    n_experts: usize,
    step: u64,
}

/// A model plus the optimizer step it was taken at.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub step: u64,
}

impl Checkpoint {
    pub fn new(model: Model, step: u64) -> Self {
        Self { model, step }
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let header = Header {
            dims: self.model.dims,
            router_layers: self.model.router_layers.clone(),
            n_experts: self.model.n_experts,
            step: self.step,
        };
        let json = serde_json::to_vec(&header)?;
        write_u32(&mut out, json.len())?;
        out.write_all(&json)?;
        write_u32(&mut out, self.model.params.len())?;
        for (name, t) in self.model.params.iter() {
            write_u32(&mut out, name.len())?;
            out.write_all(name.as_bytes())?;
            write_u32(&mut out, t.shape().len())?;
            for &e in t.shape() {
                out.write_all(&(e as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut input)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, expected {FORMAT_VERSION}")));
        }
        let len = read_u32(&mut input)? as usize;
        let json = read_vec(&mut input, len)?;
        let header: Header = serde_json::from_slice(&json)?;
        header.dims.validate()?;
        let count = read_u32(&mut input)?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(&mut input)? as usize;
            let name = String::from_utf8(read_vec(&mut input, len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut input)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                input.read_exact(&mut b).map_err(truncated)?;
                shape.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format("extent overflow".into()))?);
            }
            let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| Error::Format(format!("tensor `{name}` too large")))?;
            let raw = read_vec(&mut input, numel.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        let model = Model { dims: header.dims, params, router_layers: header.router_layers, n_experts: header.n_experts };
        let reference = Model::new(model.dims, &layout_pyramid(&model)?, 0)?;
        if !reference.params.same_layout(&model.params) {
            return Err(Error::Config("checkpoint tensors do not match its declared dimensions".into()));
        }
        Ok(Self { model, step: header.step })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(fs::File::open(path)?))
    }
}

/// A pyramid config whose routers have the shapes `model` declares.
fn layout_pyramid(model: &Model) -> Result<crate::dpe::PyramidConfig> {
    let experts = vec![crate::dpe::PoolingExpert::identity(); model.n_experts.max(1)];
    Ok(crate::dpe::PyramidConfig::new(model.router_layers.clone()).with_experts(experts))
}

fn write_u32(out: &mut impl Write, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit a u32 field")))?;
    out.write_all(&n.to_le_bytes())?;
    Ok(())
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_vec(input: &mut impl Read, len: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    input.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    Ok(buf)
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated checkpoint".into())
    } else {
        Error::Io(e)
    }
}

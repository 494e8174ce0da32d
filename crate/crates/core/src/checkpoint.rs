//! Binary checkpoint format.
//!
//! ```text
//! "SPNCKPT1\n"
//! u32 LE  tensor count
//! per tensor:
//!   u16 LE name length, UTF-8 name
//!   u8 ndim, ndim x u32 LE dims
//!   row-major f64 LE payload
//! u64 LE  global step
//! ```
//!
//! The first tensor, `meta.config`, stores the model layout so a checkpoint is
//! self-describing; the remaining tensors are the model parameters in order.

use std::fs;
use std::path::Path;

use crate::engine::Tensor;
use crate::error::{Result, SpnError};
use crate::model::{ModelConfig, SpnModel};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 9] = b"SPNCKPT1\n";
const CONFIG_TENSOR: &str = "meta.config";

/// A checkpoint as stored on disk, independent of the model layout.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCheckpoint {
    pub tensors: Vec<NamedTensor>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f64>,
}

impl RawCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let count = u32::try_from(self.tensors.len()).map_err(|_| SpnError::InvalidArgument("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| SpnError::InvalidArgument(format!("name too long: {}", t.name)))?;
            let ndim = u8::try_from(t.dims.len()).map_err(|_| SpnError::InvalidArgument(format!("{}: too many dims", t.name)))?;
            let n: usize = t.dims.iter().map(|&d| d as usize).product();
            if n != t.data.len() {
                return Err(SpnError::Shape(format!("{}: dims {:?} vs {} values", t.name, t.dims, t.data.len())));
            }
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(ndim);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(SpnError::format(origin, "bad checkpoint magic"));
        }
        let count = u32::from_le_bytes(r.array()?);
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| SpnError::format(origin, "tensor name is not UTF-8"))?
                .to_owned();
            let ndim = r.take(1)?[0] as usize;
            let dims = (0..ndim).map(|_| r.array().map(u32::from_le_bytes)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().map(|&d| d as usize).product();
            let data = (0..n).map(|_| r.array().map(f64::from_le_bytes)).collect::<Result<Vec<_>>>()?;
            tensors.push(NamedTensor { name, dims, data });
        }
        let step = u64::from_le_bytes(r.array()?);
        if r.pos != bytes.len() {
            return Err(SpnError::format(origin, "trailing bytes after checkpoint"));
        }
        Ok(RawCheckpoint { tensors, step })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(SpnError::format(self.origin, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

fn config_values(c: &ModelConfig) -> Vec<f64> {
    [c.input_channels, c.num_classes, c.base_width, c.encoder_blocks, c.output_stride, c.head_width, c.prop_feature_dim]
        .iter()
        .map(|&v| v as f64)
        .collect()
}

pub fn to_raw<S: Scalar>(model: &SpnModel<S>, step: u64) -> RawCheckpoint {
    let mut tensors = vec![NamedTensor {
        name: CONFIG_TENSOR.into(),
        dims: vec![7],
        data: config_values(model.config()),
    }];
    tensors.extend(model.params().iter().map(|p| NamedTensor {
        name: p.name.clone(),
        dims: p.tensor.shape().iter().map(|&d| d as u32).collect(),
        data: p.tensor.data().iter().map(|v| v.as_f64()).collect(),
    }));
    RawCheckpoint { tensors, step }
}

pub fn from_raw<S: Scalar>(raw: &RawCheckpoint, origin: &Path) -> Result<SpnModel<S>> {
    let (meta, rest) = raw
        .tensors
        .split_first()
        .filter(|(m, _)| m.name == CONFIG_TENSOR && m.data.len() == 7)
        .ok_or_else(|| SpnError::format(origin, "missing meta.config tensor"))?;
    let v: Vec<usize> = meta.data.iter().map(|&x| x as usize).collect();
    let config = ModelConfig {
        input_channels: v[0],
        num_classes: v[1],
        base_width: v[2],
        encoder_blocks: v[3],
        output_stride: v[4],
        head_width: v[5],
        prop_feature_dim: v[6],
        seed: 0,
    };
    let mut model = SpnModel::<S>::zeros(config).map_err(|e| SpnError::format(origin, e.to_string()))?;
    if rest.len() != model.params().len() {
        return Err(SpnError::format(origin, format!("expected {} parameter tensors, found {}", model.params().len(), rest.len())));
    }
    for (p, t) in model.params_mut().iter_mut().zip(rest) {
        let dims: Vec<usize> = t.dims.iter().map(|&d| d as usize).collect();
        if t.name != p.name || dims != p.tensor.shape() {
            return Err(SpnError::format(
                origin,
                format!("tensor {} {:?} does not match expected {} {:?}", t.name, dims, p.name, p.tensor.shape()),
            ));
        }
        p.tensor = Tensor::new(dims, t.data.iter().map(|&x| S::lit(x)).collect())?;
    }
    Ok(model)
}

pub fn save<S: Scalar>(model: &SpnModel<S>, step: u64, path: &Path) -> Result<()> {
    let bytes = to_raw(model, step).to_bytes()?;
    fs::write(path, bytes).map_err(|e| SpnError::io(path, e))
}

pub fn load<S: Scalar>(path: &Path) -> Result<(SpnModel<S>, u64)> {
    let bytes = fs::read(path).map_err(|e| SpnError::io(path, e))?;
    let raw = RawCheckpoint::from_bytes(&bytes, path)?;
    Ok((from_raw(&raw, path)?, raw.step))
}

//! Little-endian binary tensor files.
//!
//! Layout: `b"VTTN"`, version `u16`, dtype tag `u8` (0 = f32, 1 = f64),
//! rank `u8`, `rank` dimensions as `u32`, then the row-major payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::Discriminator;
use crate::saliency::{FeatureMap, SaliencyMatrix};

pub const MAGIC: &[u8; 4] = b"VTTN";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            _ => Err(Error::TensorFormat(format!("unknown dtype tag {t}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Dense tensor. Values are held as f64; an F32 tensor only holds values
/// that are exactly representable in f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dtype: DType,
    pub dims: Vec<u32>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(dtype: DType, dims: Vec<u32>, values: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().map(|&d| d as usize).product();
        if n != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} need {n} values, got {}",
                values.len()
            )));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::TensorFormat(format!("rank {} too large", dims.len())));
        }
        let values = match dtype {
            DType::F64 => values,
            DType::F32 => values.into_iter().map(|v| v as f32 as f64).collect(),
        };
        Ok(Tensor { dtype, dims, values })
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + self.values.len() * self.dtype.size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dtype.tag());
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match self.dtype {
            DType::F32 => self
                .values
                .iter()
                .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
            DType::F64 => self.values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let short = || Error::TensorFormat("truncated header".into());
        if bytes.len() < 8 {
            return Err(short());
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::TensorFormat("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::TensorFormat(format!("unsupported version {version}")));
        }
        let dtype = DType::from_tag(bytes[6])?;
        let rank = bytes[7] as usize;
        let header = 8 + 4 * rank;
        if bytes.len() < header {
            return Err(short());
        }
        let dims: Vec<u32> = bytes[8..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let n: usize = dims.iter().map(|&d| d as usize).product();
        let payload = &bytes[header..];
        if payload.len() != n * dtype.size() {
            return Err(Error::TensorFormat(format!(
                "payload is {} bytes, dims {dims:?} need {}",
                payload.len(),
                n * dtype.size()
            )));
        }
        let values = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        Ok(Tensor { dtype, dims, values })
    }

    fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::ShapeMismatch(format!(
                "{what} needs a rank-{rank} tensor, got dims {:?}",
                self.dims
            )));
        }
        Ok(())
    }

    /// Reads a `[C, H, W]` tensor as a feature map at `stride`.
    pub fn to_feature_map(&self, stride: u32) -> Result<FeatureMap> {
        self.expect_rank(3, "feature map")?;
        let d = &self.dims;
        FeatureMap::new(stride, d[0] as usize, d[1] as usize, d[2] as usize, self.values.clone())
    }

    pub fn from_feature_map(f: &FeatureMap, dtype: DType) -> Result<Self> {
        Tensor::new(
            dtype,
            vec![f.channels as u32, f.height as u32, f.width as u32],
            f.data.clone(),
        )
    }

    /// Reads a `[H, W]` tensor as a saliency matrix at `stride`.
    pub fn to_saliency(&self, stride: u32) -> Result<SaliencyMatrix> {
        self.expect_rank(2, "saliency matrix")?;
        SaliencyMatrix::new(stride, self.dims[0] as usize, self.dims[1] as usize, self.values.clone())
    }

    pub fn from_saliency(m: &SaliencyMatrix, dtype: DType) -> Result<Self> {
        Tensor::new(dtype, vec![m.height as u32, m.width as u32], m.data.clone())
    }

    /// Reads a `[S, 2C + 2]` tensor of per-scale head parameters.
    pub fn to_discriminator(&self) -> Result<Discriminator> {
        self.expect_rank(2, "discriminator")?;
        let (scales, per) = (self.dims[0] as usize, self.dims[1] as usize);
        if per < 4 || per % 2 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "discriminator rows must have 2C+2 entries, got {per}"
            )));
        }
        Discriminator::from_flat(per / 2 - 1, scales, &self.values)
    }

    pub fn from_discriminator(d: &Discriminator, dtype: DType) -> Result<Self> {
        Tensor::new(
            dtype,
            vec![d.scales.len() as u32, Discriminator::params_per_scale(d.channels) as u32],
            d.to_flat(),
        )
    }
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&t.to_bytes())?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Tensor::from_bytes(&buf)
}

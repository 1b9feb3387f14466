//! QSF1 tensor files.
//!
//! Layout: `"QSF1"`, one dtype byte, one rank byte (≤ 4), `rank` little-endian
//! `u32` dims, then the row-major payload. Dtype 0 is little-endian `f32`;
//! dtype 1 is little-endian `f64` (used by checkpoints so parameters
//! round-trip exactly).

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"QSF1";
pub const MAX_RANK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::BadDtype(other)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dtype: DType,
    pub dims: Vec<u32>,
    /// Values widened to `f64`; `f32` tensors narrow back exactly.
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(dtype: DType, dims: Vec<u32>, values: Vec<f64>) -> Result<Self> {
        if dims.len() > MAX_RANK {
            return Err(Error::RankOverflow(dims.len() as u8));
        }
        let count = element_count(&dims)?;
        if count != values.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("dims {dims:?} hold {count} values, got {}", values.len()),
            ));
        }
        Ok(Self {
            dtype,
            dims,
            values,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.dims.len() + self.values.len() * 8);
        out.extend_from_slice(MAGIC);
        out.push(self.dtype as u8);
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match self.dtype {
            DType::F32 => {
                for v in &self.values {
                    out.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for v in &self.values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    /// Decodes one tensor from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8], source: &str) -> Result<(Self, usize)> {
        if bytes.len() < 6 {
            return Err(if bytes.len() >= 4 && &bytes[..4] != MAGIC {
                Error::BadMagic(source.to_string())
            } else {
                Error::Truncated {
                    expected: 6,
                    found: bytes.len(),
                }
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic(source.to_string()));
        }
        let dtype = DType::from_code(bytes[4])?;
        let rank = bytes[5] as usize;
        if rank > MAX_RANK {
            return Err(Error::RankOverflow(bytes[5]));
        }
        let header = 6 + 4 * rank;
        if bytes.len() < header {
            return Err(Error::Truncated {
                expected: header,
                found: bytes.len(),
            });
        }
        let dims: Vec<u32> = (0..rank)
            .map(|i| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap()))
            .collect();
        let count = element_count(&dims)?;
        let payload = count
            .checked_mul(dtype.width())
            .and_then(|p| p.checked_add(header))
            .ok_or_else(|| Error::DimOverflow(format!("{dims:?}")))?;
        if bytes.len() < payload {
            return Err(Error::Truncated {
                expected: payload,
                found: bytes.len(),
            });
        }
        let body = &bytes[header..payload];
        let values = match dtype {
            DType::F32 => body
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => body
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        Ok((
            Self {
                dtype,
                dims,
                values,
            },
            payload,
        ))
    }
}

fn element_count(dims: &[u32]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| Error::DimOverflow(format!("{dims:?}")))
}

pub fn save_tensor_file(path: &Path, tensor: &Tensor) -> Result<()> {
    std::fs::write(path, tensor.encode()).map_err(|e| Error::io(path, e))
}

pub fn load_tensor_file(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (tensor, used) = Tensor::decode(&bytes, &path.display().to_string())?;
    if used != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - used
        )));
    }
    Ok(tensor)
}

//! Checkpoint container.
//!
//! Layout (little-endian): `"QSFC"`, `u32` version, `u64` epoch, `u64`
//! master seed, `u64` episodes seen, `u32` config length and config text,
//! `u32` record count, then per record a `u32` name length, the name and a
//! QSF1 `f64` tensor of dims `[rows, cols]`. An FNV-1a `u64` over all
//! preceding bytes closes the file.

use std::path::Path;

use crate::data::tensor_file::{DType, Tensor};
use crate::error::{Error, Result};
use crate::numeric::{DenseMatrix, ParamStore};
use crate::seed::fnv1a;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"QSFC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    pub seed: u64,
    /// Training episodes consumed, i.e. the next episode seed index.
    pub episodes_seen: u64,
    pub config_text: String,
    pub params: Vec<(String, DenseMatrix)>,
}

impl Checkpoint {
    pub fn capture(
        store: &ParamStore,
        config_text: String,
        epoch: u64,
        seed: u64,
        episodes_seen: u64,
    ) -> Self {
        Self {
            epoch,
            seed,
            episodes_seen,
            config_text,
            params: store
                .iter()
                .map(|(n, v)| (n.to_string(), v.clone()))
                .collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [self.epoch, self.seed, self.episodes_seen] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_bytes(&mut out, self.config_text.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, value) in &self.params {
            put_bytes(&mut out, name.as_bytes());
            let dims = vec![value.rows() as u32, value.cols() as u32];
            let tensor = Tensor {
                dtype: DType::F64,
                dims,
                values: value.data().to_vec(),
            };
            out.extend_from_slice(&tensor.encode());
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8], source: &str) -> Result<Self> {
        if bytes.len() >= 4 && &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic(source.to_string()));
        }
        let mut r = Reader { bytes, pos: 0 };
        r.take(4)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        if bytes.len() < 8 + r.pos {
            return Err(Error::Truncated {
                expected: 8 + r.pos,
                found: bytes.len(),
            });
        }
        let body = &bytes[..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        if fnv1a(body) != stored {
            return Err(Error::Corrupt(format!("{source}: checksum mismatch")));
        }
        let mut r = Reader {
            bytes: body,
            pos: r.pos,
        };
        let (epoch, seed, episodes_seen) = (r.u64()?, r.u64()?, r.u64()?);
        let config_text = String::from_utf8(r.chunk()?.to_vec())
            .map_err(|_| Error::Corrupt(format!("{source}: config text is not UTF-8")))?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = String::from_utf8(r.chunk()?.to_vec())
                .map_err(|_| Error::Corrupt(format!("{source}: parameter name is not UTF-8")))?;
            let (tensor, used) = Tensor::decode(&body[r.pos..], source)?;
            r.pos += used;
            if tensor.dims.len() != 2 {
                return Err(Error::Corrupt(format!(
                    "{source}: parameter {name} is not 2-D"
                )));
            }
            let value = DenseMatrix::from_vec(
                tensor.dims[0] as usize,
                tensor.dims[1] as usize,
                tensor.values,
            )?;
            params.push((name, value));
        }
        if r.pos != body.len() {
            return Err(Error::Corrupt(format!(
                "{source}: {} trailing bytes",
                body.len() - r.pos
            )));
        }
        Ok(Self {
            epoch,
            seed,
            episodes_seen,
            config_text,
            params,
        })
    }

    /// Copies every record into `store`. All-or-nothing: on error `store` is
    /// left unchanged.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        let mut staged = store.clone();
        for (name, value) in &self.params {
            staged.set(name, value.clone())?;
        }
        if let Some((missing, _)) = store
            .iter()
            .find(|(n, _)| !self.params.iter().any(|(p, _)| p == n))
        {
            return Err(Error::Corrupt(format!(
                "checkpoint lacks parameter {missing}"
            )));
        }
        *store = staged;
        Ok(())
    }
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or(Error::Truncated {
                expected: self.pos.saturating_add(n),
                found: self.bytes.len(),
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn chunk(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.encode()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.register(
            "a.w",
            DenseMatrix::from_fn(2, 3, |i, j| i as f64 * 0.1 - j as f64 / 3.0),
        );
        s.register("b", DenseMatrix::scalar(f64::MIN_POSITIVE));
        s
    }

    fn sample() -> Checkpoint {
        Checkpoint::capture(&sample_store(), "seed = 7\n".into(), 3, 7, 150)
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let back = Checkpoint::decode(&ck.encode(), "mem").unwrap();
        assert_eq!(back, ck);
        let mut store = sample_store();
        store.get_mut(store.id("b").unwrap()).data_mut()[0] = 9.0;
        back.restore_into(&mut store).unwrap();
        assert_eq!(store, sample_store());
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample().encode();
        for n in 0..bytes.len() {
            assert!(Checkpoint::decode(&bytes[..n], "mem").is_err(), "{n}");
        }
    }

    #[test]
    fn distinct_diagnostics() {
        let mut bytes = sample().encode();
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::decode(&bytes, "mem"),
            Err(Error::VersionMismatch {
                expected: 1,
                found: 9
            })
        ));
        let mut bytes = sample().encode();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(
            Checkpoint::decode(&bytes, "mem"),
            Err(Error::Corrupt(_))
        ));
        assert!(matches!(
            Checkpoint::decode(b"NOPE1234", "mem"),
            Err(Error::BadMagic(_))
        ));
    }

    #[test]
    fn shape_mismatch_names_parameter_and_loads_nothing() {
        let mut other = ParamStore::new();
        other.register("b", DenseMatrix::scalar(5.0));
        other.register("a.w", DenseMatrix::zeros(3, 2));
        let before = other.clone();
        match sample().restore_into(&mut other) {
            Err(Error::ParamShape { name, .. }) => assert_eq!(name, "a.w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(other, before);
    }
}

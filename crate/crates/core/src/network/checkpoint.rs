//! Binary checkpoint framing.
//!
//! ```text
//! "MDEC" | version u32 | config: u32 len + UTF-8 JSON | count u32 |
//!   per tensor: u32 len + UTF-8 name | dtype u8 | rank u8 |
//!               extents u64 * rank | raw elements
//! ```
//! All integers and elements are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MDEC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl TensorRecord {
    pub fn from_slice<T: Scalar>(name: impl Into<String>, shape: &[usize], data: &[T]) -> Self {
        let mut bytes = Vec::with_capacity(data.len() * T::DTYPE.size());
        for &v in data {
            v.write_le(&mut bytes);
        }
        TensorRecord {
            name: name.into(),
            dtype: T::DTYPE,
            shape: shape.to_vec(),
            bytes,
        }
    }

    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        TensorRecord::from_slice(name, t.shape(), t.data())
    }

    pub fn to_vec<T: Scalar>(&self) -> Result<Vec<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' stored as {:?}, expected {:?}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        Ok(self.bytes.chunks_exact(self.dtype.size()).map(T::read_le).collect())
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::new(self.shape.clone(), self.to_vec()?)
    }

    /// Bytes this record occupies in a file, excluding element data.
    pub fn framing_len(&self) -> usize {
        4 + self.name.len() + 1 + 1 + 8 * self.shape.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointFile {
    pub config_json: String,
    pub tensors: Vec<TensorRecord>,
}

impl CheckpointFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.tensors.iter().map(|t| t.framing_len() + t.bytes.len()).sum();
        let mut out = Vec::with_capacity(16 + self.config_json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype as u8);
            out.push(t.shape.len() as u8);
            for &e in &t.shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}, expected \"MDEC\"")));
        }
        let version = r.u32("format version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (this build reads {VERSION})"
            )));
        }
        let len = r.u32("config length")? as usize;
        let config_json = std::str::from_utf8(r.take(len, "config")?)
            .map_err(|_| Error::Checkpoint("config is not valid UTF-8".into()))?
            .to_owned();
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let what = format!("name of tensor #{i}");
            let len = r.u32(&what)? as usize;
            let name = std::str::from_utf8(r.take(len, &what)?)
                .map_err(|_| Error::Checkpoint(format!("{what} is not valid UTF-8")))?
                .to_owned();
            let ctx = format!("tensor '{name}'");
            let tag = r.take(1, &ctx)?[0];
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| Error::Checkpoint(format!("{ctx}: unknown dtype tag {tag}")))?;
            let rank = r.take(1, &ctx)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let e = u64::from_le_bytes(r.take(8, &ctx)?.try_into().expect("8 bytes"));
                shape.push(usize::try_from(e).map_err(|_| Error::Checkpoint(format!("{ctx}: extent {e} too large")))?);
            }
            if rank == 0 || shape.contains(&0) {
                return Err(Error::Checkpoint(format!("{ctx}: invalid shape {shape:?}")));
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| Error::Checkpoint(format!("{ctx}: shape {shape:?} overflows")))?;
            let data = r.take(numel, &ctx)?.to_vec();
            tensors.push(TensorRecord {
                name,
                dtype,
                shape,
                bytes: data,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(CheckpointFile { config_json, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        CheckpointFile::from_bytes(&bytes)
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!(
                "truncated file: {what} needs {n} bytes at offset {}, only {} remain",
                self.pos,
                self.bytes.len() - self.pos
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CheckpointFile {
        CheckpointFile {
            config_json: "{\"a\":1}".into(),
            tensors: vec![
                TensorRecord::from_slice("w", &[2, 1], &[1.5f32, -2.0]),
                TensorRecord::from_slice("step", &[1], &[7.0f64]),
            ],
        }
    }

    #[test]
    fn exact_layout() {
        let bytes = sample().to_bytes();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"MDEC");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&7u32.to_le_bytes());
        expected.extend_from_slice(b"{\"a\":1}");
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(b"w");
        expected.extend_from_slice(&[0, 2]);
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1.5f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        expected.extend_from_slice(&4u32.to_le_bytes());
        expected.extend_from_slice(b"step");
        expected.extend_from_slice(&[1, 1]);
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&7.0f64.to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(CheckpointFile::from_bytes(&bytes).unwrap(), sample());
    }

    #[test]
    fn every_truncation_is_reported() {
        let bytes = sample().to_bytes();
        for cut in 0..bytes.len() {
            let err = CheckpointFile::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(err.to_string().contains("truncated"), "cut {cut}: {err}");
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(CheckpointFile::from_bytes(&bytes).unwrap_err().to_string().contains("magic"));
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(CheckpointFile::from_bytes(&bytes).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn dtype_mismatch_names_tensor() {
        let f = sample();
        let err = f.get("w").unwrap().to_vec::<f64>().unwrap_err();
        assert!(err.to_string().contains("'w'"));
    }
}

//! Weight archive file format: the magic `MVRW1`, then for every tensor its
//! name (u32 length + UTF-8 bytes), rank (u32), dims (u64 each) and row-major
//! little-endian `f32` data, repeated until end of file.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic};
use crate::tensor::ParamSet;

pub const MAGIC: &[u8; 5] = b"MVRW1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightArchive {
    pub params: ParamSet<f32>,
}

impl WeightArchive {
    pub fn new(params: ParamSet<f32>) -> Self {
        Self { params }
    }

    pub fn version(&self) -> u32 {
        FORMAT_VERSION
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Validation("not an MVRW1 weight archive".into()));
        }
        let mut r = Reader {
            bytes,
            pos: MAGIC.len(),
        };
        let mut params = ParamSet::new();
        while r.pos < bytes.len() {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Validation("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let data: Vec<f32> = r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let t = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| Error::Validation(format!("tensor `{name}`: {e}")))?;
            params.insert(name, t);
        }
        Ok(Self { params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }

    /// Checks names and shapes against the tensors a config requires.
    pub fn validate(&self, expected: &[(String, Vec<usize>)]) -> Result<()> {
        self.params.validate(expected)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Validation("weight archive is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let mut p = ParamSet::new();
        p.insert(
            "a.weight",
            ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1., 2., 3., 4., 5., -6.5]).unwrap(),
        );
        p.insert(
            "a.bias",
            ArrayD::from_shape_vec(IxDyn(&[3]), vec![0., f32::MIN_POSITIVE, 7.]).unwrap(),
        );
        let a = WeightArchive::new(p);
        let b = WeightArchive::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(a, b);
        assert_eq!(&a.to_bytes()[..5], b"MVRW1");
    }

    #[test]
    fn rejects_garbage() {
        assert!(WeightArchive::from_bytes(b"NOPE").is_err());
        let mut p = ParamSet::new();
        p.insert("x", ArrayD::from_elem(IxDyn(&[4]), 1.0_f32));
        let bytes = WeightArchive::new(p).to_bytes();
        assert!(WeightArchive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}

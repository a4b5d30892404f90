//! Binary parameter checkpoints.
//!
//! Layout (little endian): magic `CTRJCKPT`, `u32` version, `u32` tensor
//! count, then per tensor: `u32` name length, UTF-8 name, `u32` rank, `u64`
//! dims, and the values as `f64`. Values are widened to `f64` so that `f32`
//! and `f64` models share one lossless format.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{NnError, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CTRJCKPT";
const VERSION: u32 = 1;

pub fn encode<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(NnError::Checkpoint("truncated file".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader { buf: bytes };
    if r.take(8)? != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| NnError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if !r.buf.is_empty() {
        return Err(NnError::Checkpoint("trailing bytes".into()));
    }
    Ok(out)
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(store))?;
    Ok(())
}

pub fn load_into<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    store.load_from(decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_f32_bits() {
        let mut ps = ParamStore::<f32>::new();
        ps.add("a.w", Tensor::new(&[2, 3], vec![0.1, -2.5, 3.0e-7, 1.0, 0.0, f32::MAX]).unwrap());
        ps.add("b", Tensor::new(&[1], vec![std::f32::consts::PI]).unwrap());
        let bytes = encode(&ps);
        let mut other = ps.clone();
        for (i, _) in ps.iter().enumerate() {
            other.get_mut(crate::nn::ParamId(i)).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        other.load_from(decode(&bytes).unwrap()).unwrap();
        for ((_, a), (_, b)) in ps.iter().zip(other.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let mut ps = ParamStore::<f64>::new();
        ps.add("x", Tensor::ones(&[4]));
        let bytes = encode(&ps);
        assert!(decode::<f64>(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode::<f64>(b"NOTACKPT").is_err());
    }
}

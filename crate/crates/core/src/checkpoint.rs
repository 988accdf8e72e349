//! Binary checkpoint container: string metadata plus named little-endian
//! tensors. Entries are kept sorted so identical state gives identical bytes.
//!
//! Layout: magic `DNECKPT1`, u32 meta count, (u32 len, key, u32 len, value)*,
//! u32 tensor count, (u32 len, name, u8 dtype, u32 ndim, u64 dims*, data)*.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::nn::{DType, ParameterStore, Scalar};

pub const MAGIC: &[u8; 8] = b"DNECKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl Tensor {
    pub fn from_array<T: Scalar>(a: &ArrayD<T>) -> Self {
        let mut data = Vec::with_capacity(a.len() * dtype_width(T::DTYPE));
        for &v in a.iter() {
            v.write_le(&mut data);
        }
        Tensor {
            dtype: T::DTYPE,
            dims: a.shape().to_vec(),
            data,
        }
    }

    pub fn to_array<T: Scalar>(&self, name: &str) -> Result<ArrayD<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "{name}: stored as {:?}, expected {:?}",
                self.dtype,
                T::DTYPE
            )));
        }
        let w = dtype_width(self.dtype);
        let values: Vec<T> = self.data.chunks_exact(w).map(T::read_le).collect();
        ArrayD::from_shape_vec(IxDyn(&self.dims), values)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
    }
}

fn dtype_width(d: DType) -> usize {
    match d {
        DType::F32 => 4,
        DType::F64 => 8,
        DType::U8 => 1,
    }
}

fn dtype_from_u8(b: u8) -> Result<DType> {
    match b {
        0 => Ok(DType::F32),
        1 => Ok(DType::F64),
        2 => Ok(DType::U8),
        other => Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {key}")))
    }

    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("bad value for {key}: {raw:?}")))
    }

    /// Stores values and Adam moments of every parameter under `prefix/`.
    pub fn put_store<T: Scalar>(&mut self, prefix: &str, store: &ParameterStore<T>) {
        self.set(format!("{prefix}.step"), store.step);
        for p in store.params() {
            self.tensors
                .insert(format!("{prefix}/{}", p.name), Tensor::from_array(&p.value));
            self.tensors
                .insert(format!("{prefix}/{}.m", p.name), Tensor::from_array(&p.m));
            self.tensors
                .insert(format!("{prefix}/{}.v", p.name), Tensor::from_array(&p.v));
        }
    }

    /// Overwrites a freshly built store; names, shapes and dtype must agree.
    pub fn restore_store<T: Scalar>(&self, prefix: &str, store: &mut ParameterStore<T>) -> Result<()> {
        store.step = self.parse(&format!("{prefix}.step"))?;
        for p in store.params_mut() {
            for (suffix, slot) in [("", &mut p.value), (".m", &mut p.m), (".v", &mut p.v)] {
                let key = format!("{prefix}/{}{suffix}", p.name);
                let t = self
                    .tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
                let a = t.to_array::<T>(&key)?;
                if a.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{key}: stored shape {:?}, model expects {:?}",
                        a.shape(),
                        slot.shape()
                    )));
                }
                *slot = a;
            }
            p.grad.fill(T::zero());
        }
        let expected = store.len() * 3;
        let present = self.tensors.keys().filter(|k| k.starts_with(&format!("{prefix}/"))).count();
        if present != expected {
            return Err(Error::Checkpoint(format!(
                "{prefix}: checkpoint has {present} tensors, model has {expected}"
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.push(t.dtype as u8);
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let mut ck = Checkpoint::default();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let dtype = dtype_from_u8(r.take(1)?[0])?;
            let ndim = r.u32()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize);
            }
            let n: usize = dims.iter().product::<usize>() * dtype_width(dtype);
            let data = r.take(n)?.to_vec();
            ck.tensors.insert(name, Tensor { dtype, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ck)
    }

    /// Writes through a temporary file and renames into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())
            .map_err(|e| Error::io(format!("writing checkpoint {}", tmp.display()), e))?;
        std::fs::rename(&tmp, path)
            .map_err(|e| Error::io(format!("renaming checkpoint to {}", path.display()), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
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
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 string".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParameterStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParameterStore::new();
        s.add_uniform("a.w", &[3, 4], 3, &mut rng);
        s.add_const("a.b", &[4], 0.5, true);
        s.step = 17;
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let s = store();
        let mut ck = Checkpoint::default();
        ck.set("epoch", 3);
        ck.put_store("se", &s);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let mut fresh = ParameterStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        fresh.add_uniform("a.w", &[3, 4], 3, &mut rng);
        fresh.add_const("a.b", &[4], 0.0, true);
        back.restore_store("se", &mut fresh).unwrap();
        assert_eq!(fresh.step, 17);
        for (a, b) in fresh.params().iter().zip(s.params()) {
            assert_eq!(a.value, b.value);
        }
        assert_eq!(back.parse::<u32>("epoch").unwrap(), 3);
    }

    #[test]
    fn mismatches_are_reported() {
        let mut ck = Checkpoint::default();
        ck.put_store("se", &store());
        let mut wrong = ParameterStore::<f32>::new();
        wrong.add_const("a.w", &[4, 3], 0.0, true);
        wrong.add_const("a.b", &[4], 0.0, true);
        assert!(ck.restore_store("se", &mut wrong).is_err());
        let mut wide = ParameterStore::<f64>::new();
        wide.add_const("a.w", &[3, 4], 0.0, true);
        wide.add_const("a.b", &[4], 0.0, true);
        assert!(ck.restore_store("se", &mut wide).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}

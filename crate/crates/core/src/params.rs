//! Named trainable tensors, the Adam optimizer, and the checkpoint format.
//!
//! # Checkpoint layout
//!
//! All integers little-endian.
//!
//! ```text
//! magic     8 bytes   "SAGVAE01"
//! meta_len  u32       length of the UTF-8 JSON metadata that follows
//! meta      meta_len bytes
//! count     u32       number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims (u64 each)
//!   values   f64 x product(dims)
//! ```

use std::collections::HashMap;
use std::path::Path;

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SAGVAE01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Overwrites every value from `other`, which must have the same layout.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::State("parameter layouts differ".into()));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(Error::shape("copy_from", dst.shape(), src.shape()));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn to_bytes(&self, meta: &str) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + meta.len() + self.num_scalars() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, meta.len());
        out.extend_from_slice(meta.as_bytes());
        put_u32(&mut out, self.values.len());
        for (name, t) in self.names.iter().zip(&self.values) {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.ndim());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint, returning the metadata string and the store.
    pub fn from_bytes(bytes: &[u8]) -> Result<(String, ParamStore)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: "not a checkpoint (bad magic)".into(),
            });
        }
        let meta_len = r.u32()?;
        let meta = r.utf8(meta_len)?;
        let count = r.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()?;
            let at = r.pos;
            let name = r.utf8(len)?;
            if store.index.contains_key(&name) {
                return Err(Error::Format {
                    offset: at,
                    detail: format!("duplicate tensor {name}"),
                });
            }
            let ndim = r.u32()?;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.filter(|&n| n <= bytes.len() / 8).ok_or(Error::Format {
                offset: r.pos,
                detail: format!("implausible shape {shape:?}"),
            })?;
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            store.add(name, Tensor::new(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos,
                detail: "trailing bytes".into(),
            });
        }
        Ok((meta, store))
    }

    pub fn save(&self, path: &Path, meta: &str) -> Result<()> {
        std::fs::write(path, self.to_bytes(meta)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(String, ParamStore)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("length exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format {
                offset: self.pos,
                detail: format!("truncated: wanted {n} more bytes"),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize) -> Result<String> {
        let at = self.pos;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            offset: at,
            detail: "invalid UTF-8".into(),
        })
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || store.values.iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies one update. Parameters without a gradient still advance their
    /// moment estimates as if the gradient were zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, value) in store.values.iter_mut().enumerate() {
            let g = grads.param(ParamId(i)).map(Tensor::data);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in value.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                if self.lr != 0.0 {
                    *p -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.2));
        s.add("lambda", Tensor::scalar(f64::MIN_POSITIVE));
        s.add("b", Tensor::new(&[1], vec![-0.0]).unwrap());
        s
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let s = store();
        let bytes = s.to_bytes("{\"k\":1}");
        let (meta, back) = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(meta, "{\"k\":1}");
        assert_eq!(back, s);
        assert_eq!(back.to_bytes("{\"k\":1}"), bytes);
    }

    #[test]
    fn truncated_checkpoint_reports_offset() {
        let bytes = store().to_bytes("m");
        let cut = &bytes[..bytes.len() - 3];
        match ParamStore::from_bytes(cut) {
            Err(Error::Format { offset, .. }) => assert!(offset > 8),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(&s, 0.05);
        for _ in 0..2000 {
            let grads = {
                let mut tape = Tape::with_params(&s);
                let v = tape.param(x);
                let sq = tape.mul(v, v).unwrap();
                let l = tape.sum(sq);
                tape.backward(l).unwrap()
            };
            opt.step(&mut s, &grads);
        }
        assert!(s.get(x).data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn zero_learning_rate_keeps_bits() {
        let mut s = store();
        let before = s.clone();
        let w = s.id("w").unwrap();
        let mut opt = Adam::new(&s, 0.0);
        for _ in 0..5 {
            let grads = {
                let mut tape = Tape::with_params(&s);
                let v = tape.param(w);
                let l = tape.sum(v);
                tape.backward(l).unwrap()
            };
            opt.step(&mut s, &grads);
        }
        assert_eq!(s, before);
    }
}

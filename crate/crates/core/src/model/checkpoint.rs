//! RCK1 checkpoints: config text plus every named tensor (weights and
//! batch-norm running statistics) as little-endian f32.

use std::path::Path;

use super::{RcNet, RcNetConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Validation("checkpoint truncated".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Validation("checkpoint string is not UTF-8".into()))
    }
}

impl<T: Scalar> RcNet<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_str(&mut out, &self.config.to_text());
        put_u32(&mut out, self.store.len() as u32);
        for id in self.store.ids() {
            let t = self.store.get(id);
            put_str(&mut out, self.store.name(id));
            put_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for &v in t.data() {
                out.extend_from_slice(&v.as_f32().to_le_bytes());
            }
        }
        out
    }

    /// Rebuilds the model described by the embedded config and fills in every
    /// tensor, checking names and shapes.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut rd = Reader { buf, at: 0 };
        if rd.take(4).ok() != Some(&CHECKPOINT_MAGIC[..]) {
            return Err(Error::Validation("not an RCK1 checkpoint (bad magic)".into()));
        }
        let version = rd.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!("unsupported checkpoint version {version}")));
        }
        let config = RcNetConfig::parse(&rd.string()?)
            .map_err(|e| Error::Validation(format!("checkpoint config: {e}")))?;
        let mut model = RcNet::new(config)?;
        let count = rd.u32()? as usize;
        if count != model.store.len() {
            return Err(Error::Validation(format!(
                "checkpoint holds {count} tensors, model expects {}",
                model.store.len()
            )));
        }
        let mut seen = vec![false; count];
        for _ in 0..count {
            let name = rd.string()?;
            let rank = rd.u32()? as usize;
            let shape = (0..rank)
                .map(|_| rd.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let id = model
                .store
                .id(&name)
                .ok_or_else(|| Error::Validation(format!("unexpected tensor '{name}'")))?;
            if seen[id.index()] {
                return Err(Error::Validation(format!("tensor '{name}' repeated")));
            }
            seen[id.index()] = true;
            let expect = model.store.get(id).shape().to_vec();
            if shape != expect {
                return Err(Error::Validation(format!(
                    "tensor '{name}' has shape {shape:?}, expected {expect:?}"
                )));
            }
            let n: usize = shape.iter().product();
            let bytes = rd.take(n.checked_mul(4).ok_or_else(|| {
                Error::Validation("tensor size overflows".into())
            })?)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect();
            let t = Tensor::from_vec(&shape, data)
                .map_err(|e| Error::Validation(format!("tensor '{name}': {e}")))?;
            model.store.set(&name, t)?;
        }
        if rd.at != buf.len() {
            return Err(Error::Validation("trailing bytes after checkpoint".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

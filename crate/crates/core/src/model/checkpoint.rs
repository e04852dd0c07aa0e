//! Binary checkpoint: magic, version, precision tag, the model config as
//! key-value text, then named little-endian tensors.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::transformer::TransformerModel;
use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CTXMTCKP";
const VERSION: u32 = 1;

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn to_bytes<T: Real>(model: &TransformerModel<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::BYTES);
    push_str(&mut out, &model.config().to_kv());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.names().iter().zip(model.params()) {
        push_str(&mut out, name);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        T::to_le_bytes_vec(t.data(), &mut out);
    }
    out
}

fn decode<S: Real, T: Real>(bytes: &[u8]) -> Result<Vec<T>> {
    let vals = S::from_le_bytes_slice(bytes);
    Ok(vals.into_iter().map(|v| T::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN))).collect())
}

/// Loads into precision `T`, converting if the file was written in the other one.
pub fn from_bytes<T: Real>(buf: &[u8]) -> Result<TransformerModel<T>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let width = r.take(1)?[0];
    if width != 4 && width != 8 {
        return Err(Error::Format(format!("unknown precision tag {width}")));
    }
    let config = ModelConfig::from_kv(&r.string()?)?;
    let count = r.u32()? as usize;
    let mut named = HashMap::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * width as usize)?;
        let data = if width == 4 { decode::<f32, T>(raw)? } else { decode::<f64, T>(raw)? };
        named.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    TransformerModel::from_named(config, named)
}

pub fn save<T: Real>(model: &TransformerModel<T>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<TransformerModel<T>> {
    from_bytes(&fs::read(path)?)
}

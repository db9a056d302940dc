//! Binary checkpoint: `ROICTRL1`, a config block, then named tensors.
//!
//! ```text
//! magic "ROICTRL1" | u32 scalar bytes | u32 config length | config text
//! u32 tensor count | per tensor: u32 name length, name, u32 rank,
//! u64 extents, raw little-endian scalars
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::param::Parameterized;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"ROICTRL1";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode<T: Scalar, M: Parameterized<T>>(model: &mut M, config: &str) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    put_u32(&mut out, T::BYTES);
    put_u32(&mut out, config.len());
    out.extend_from_slice(config.as_bytes());
    let mut entries = Vec::new();
    model.visit_params("", &mut |name, p| entries.push((name.to_string(), p.value.clone())));
    put_u32(&mut out, entries.len());
    for (name, t) in entries {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: String,
    pub tensors: Vec<(String, Tensor<T>)>,
}

pub fn decode<T: Scalar>(buf: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let bytes = r.u32()?;
    if bytes != 4 && bytes != 8 {
        return Err(Error::Format(format!("scalar width {bytes}")));
    }
    let config = r.string()?;
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * bytes)?;
        let data: Vec<T> = if bytes == 4 {
            raw.chunks(4).map(|c| T::c(f32::read_le(c) as f64)).collect()
        } else {
            raw.chunks(8).map(|c| T::c(f64::read_le(c))).collect()
        };
        tensors.push((name, Tensor::from_vec(&shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes".into()));
    }
    Ok(Checkpoint { config, tensors })
}

/// Copies checkpoint tensors into a model with the same parameter manifest.
pub fn load_into<T: Scalar, M: Parameterized<T>>(model: &mut M, ck: &Checkpoint<T>) -> Result<()> {
    let names = model.param_names();
    let got: Vec<&str> = ck.tensors.iter().map(|(n, _)| n.as_str()).collect();
    if names.iter().map(|s| s.as_str()).ne(got.iter().copied()) {
        return Err(Error::Format(format!("parameter manifest mismatch: expected {names:?}, found {got:?}")));
    }
    let mut k = 0;
    let mut err = None;
    model.visit_params("", &mut |name, p| {
        let t = &ck.tensors[k].1;
        if t.shape() != p.value.shape() {
            err.get_or_insert_with(|| Error::Format(format!("{name}: shape {:?} vs {:?}", t.shape(), p.value.shape())));
        } else {
            p.value = t.clone();
        }
        k += 1;
    });
    err.map_or(Ok(()), Err)
}

pub fn save<T: Scalar, M: Parameterized<T>>(path: &std::path::Path, model: &mut M, config: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(model, config))?;
    Ok(())
}

pub fn read<T: Scalar>(path: &std::path::Path) -> Result<Checkpoint<T>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Config(format!("checkpoint {}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    decode(&buf)
}

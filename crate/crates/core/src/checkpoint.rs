//! Binary tensor container.
//!
//! Layout: magic `M3KGCKPT`, `u32` version, `u32` tensor count, then per
//! tensor a `u32`-length-prefixed UTF-8 name, a dtype byte (0 = f32,
//! 1 = f64), a rank byte, `u32` dims and row-major little-endian data.

use std::fs;
use std::path::Path;

use crate::autodiff::Matrix;
use crate::error::PipelineError;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"M3KGCKPT";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, m) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.push(2);
        out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
        for &x in m.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    entry: Option<usize>,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> PipelineError {
        let ctx = match self.entry {
            Some(e) => format!("checkpoint entry {e} (byte {})", self.pos),
            None => format!("checkpoint header (byte {})", self.pos),
        };
        PipelineError::format(ctx, message)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], PipelineError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!("unexpected end of file reading {n} bytes"))),
        }
    }

    fn u8(&mut self) -> Result<u8, PipelineError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, PipelineError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore, PipelineError> {
    let mut r = Reader { bytes, pos: 0, entry: None };
    if r.take(8)? != MAGIC {
        return Err(r.err("bad magic, not an M3KGCKPT file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version} (supported: {VERSION})")));
    }
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for e in 0..count {
        r.entry = Some(e);
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.err("tensor name is not UTF-8"))?
            .to_string();
        if store.id(&name).is_some() {
            return Err(r.err(format!("duplicate tensor `{name}`")));
        }
        let dtype = r.u8()?;
        let rank = r.u8()?;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [a, b] => (*a, *b),
            _ => return Err(r.err(format!("rank {rank} tensors are not supported"))),
        };
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| r.err("tensor size overflows"))?;
        let data: Vec<f64> = match dtype {
            DTYPE_F64 => r
                .take(n.checked_mul(8).ok_or_else(|| r.err("tensor size overflows"))?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            DTYPE_F32 => r
                .take(n.checked_mul(4).ok_or_else(|| r.err("tensor size overflows"))?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            other => return Err(r.err(format!("unknown dtype {other}"))),
        };
        let m = Matrix::from_shape_vec((rows, cols), data).map_err(|e| r.err(e.to_string()))?;
        store.insert(name, m);
    }
    if r.pos != bytes.len() {
        r.entry = None;
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(store)
}

pub fn save(path: impl AsRef<Path>, store: &ParamStore) -> Result<(), PipelineError> {
    let path = path.as_ref();
    fs::write(path, encode(store)).map_err(|e| PipelineError::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore, PipelineError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        PipelineError::Format { context, message } => PipelineError::format(format!("{}: {context}", path.display()), message),
        other => other,
    })
}

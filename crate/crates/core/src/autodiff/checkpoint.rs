//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `GDAE`, version `u32`, tensor count `u32`,
//! then per tensor: name length `u16`, UTF-8 name, ndim `u8`, dims as `u32`,
//! and the payload as IEEE-754 `f32` in row-major order. Running statistics
//! of IC layers are stored as two extra tensors named
//! `<layer>#running_mean` and `<layer>#running_var`.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::params::{ParamStore, RunningStats};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GDAE";
pub const VERSION: u32 = 1;

const MEAN_SUFFIX: &str = "#running_mean";
const VAR_SUFFIX: &str = "#running_var";

pub fn encode(store: &ParamStore) -> Result<Vec<u8>> {
    let mut entries: Vec<(String, &[usize], &[f64])> = store
        .iter()
        .map(|(_, name, t)| (name.to_string(), t.shape(), t.data()))
        .collect();
    let mut stat_shapes = Vec::new();
    for (name, s) in store.stats_iter() {
        stat_shapes.push((name.to_string(), [s.channels()], s));
    }
    for (name, shape, s) in &stat_shapes {
        entries.push((
            format!("{name}{MEAN_SUFFIX}"),
            shape.as_slice(),
            s.mean.as_slice(),
        ));
        entries.push((
            format!("{name}{VAR_SUFFIX}"),
            shape.as_slice(),
            s.var.as_slice(),
        ));
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape, data) in entries {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
        let ndim = u8::try_from(shape.len())
            .map_err(|_| Error::Checkpoint(format!("too many dims: {name}")))?;
        out.push(ndim);
        for &d in shape {
            let d = u32::try_from(d)
                .map_err(|_| Error::Checkpoint(format!("dim too large: {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = cur.u32()?;
    let mut store = ParamStore::new();
    let mut pending_mean: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for _ in 0..count {
        let len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("bad tensor name: {e}")))?
            .to_string();
        let ndim = cur.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| cur.f32().map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        if let Some(layer) = name.strip_suffix(MEAN_SUFFIX) {
            pending_mean.insert(layer.to_string(), data);
        } else if let Some(layer) = name.strip_suffix(VAR_SUFFIX) {
            let mean = pending_mean
                .remove(layer)
                .ok_or_else(|| Error::Checkpoint(format!("{name} without running mean")))?;
            store.insert_stats(layer, RunningStats { mean, var: data })?;
        } else {
            store.insert(name, Tensor::new(shape, data)?)?;
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    if let Some(layer) = pending_mean.keys().next() {
        return Err(Error::Checkpoint(format!(
            "{layer} has a running mean but no variance"
        )));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let bytes = encode(store)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

//! Versioned binary checkpoints: a JSON config header, string metadata and
//! named `f64` tensors stored bit-exactly.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelState};
use crate::binio::*;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TRONCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_NAME: usize = 1 << 16;
const MAX_HEADER: usize = 1 << 20;

/// A model plus auxiliary tensors (optimizer moments) and metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    pub extra: Vec<(String, Tensor)>,
    pub meta: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

fn write_tensors<W: Write>(w: &mut W, tensors: &[(String, &Tensor)]) -> io::Result<()> {
    write_u64(w, tensors.len() as u64)?;
    for (name, t) in tensors {
        write_str(w, name)?;
        write_u32(w, t.ndim() as u32)?;
        for &d in t.shape() {
            write_u64(w, d as u64)?;
        }
        for &v in t.data() {
            write_f64(w, v)?;
        }
    }
    Ok(())
}

fn bad(msg: String) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg)
}

fn read_tensors<R: Read>(r: &mut R) -> io::Result<Vec<(String, Tensor)>> {
    let n = read_u64(r)? as usize;
    let mut out = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let name = read_str(r, MAX_NAME)?;
        let ndim = read_u32(r)? as usize;
        if ndim > 8 {
            return Err(bad(format!("tensor {name} has {ndim} dimensions")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(r)? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&l| l <= 1 << 34)
            .ok_or_else(|| bad(format!("tensor {name} shape {shape:?} is too large")))?;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(read_f64(r)?);
        }
        let t = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn write_checkpoint(
    path: &Path,
    model: &ModelState,
    extra: &[(String, &Tensor)],
    meta: &[(String, String)],
) -> Result<()> {
    let header = serde_json::to_string(&model.config)
        .map_err(|e| Error::Checkpoint(format!("cannot encode config: {e}")))?;
    let tmp = path.with_extension("tmp");
    let write = || -> io::Result<()> {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        write_u32(&mut w, CHECKPOINT_VERSION)?;
        write_str(&mut w, &header)?;
        write_u64(&mut w, meta.len() as u64)?;
        for (k, v) in meta {
            write_str(&mut w, k)?;
            write_str(&mut w, v)?;
        }
        write_tensors(&mut w, &model.named())?;
        write_tensors(&mut w, extra)?;
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    let version = read_u32(&mut r).map_err(|e| Error::io(path, e))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let mut body = || -> io::Result<_> {
        let header = read_str(&mut r, MAX_HEADER)?;
        let n_meta = read_u64(&mut r)? as usize;
        let mut meta = Vec::with_capacity(n_meta.min(1024));
        for _ in 0..n_meta {
            meta.push((read_str(&mut r, MAX_NAME)?, read_str(&mut r, MAX_HEADER)?));
        }
        let params = read_tensors(&mut r)?;
        let extra = read_tensors(&mut r)?;
        Ok((header, meta, params, extra))
    };
    let (header, meta, params, extra) = body().map_err(|e| Error::io(path, e))?;
    let config: ModelConfig = serde_json::from_str(&header)
        .map_err(|e| Error::Checkpoint(format!("bad config header: {e}")))?;
    let model = ModelState::from_named(config, params)?;
    Ok(Checkpoint { model, extra, meta })
}

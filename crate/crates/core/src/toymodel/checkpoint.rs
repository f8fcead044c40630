//! Binary checkpoint container.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic        8 bytes  "SATOYCKP"
//! version      u32      1
//! config_len   u64      length of the config record
//! config       bytes    UTF-8 JSON of ToyModelConfig
//! n_tensors    u64
//! per tensor:
//!   name_len   u32
//!   name       bytes    UTF-8, e.g. "layers.0.attn.wq"
//!   ndim       u32
//!   dims       u64 x ndim
//!   data       f64 x prod(dims), row-major
//! ```
//!
//! Tensors appear in [`ToyModel::tensor_specs`] order and must match the
//! shapes implied by the config exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{io_err, Error, Result};

use super::{ToyModel, ToyModelConfig};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"SATOYCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn ck<T>(r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn write_checkpoint<W: Write>(model: &ToyModel, mut w: W) -> Result<()> {
    let config = serde_json::to_vec(model.config())?;
    ck(w.write_all(&CHECKPOINT_MAGIC))?;
    ck(w.write_all(&CHECKPOINT_VERSION.to_le_bytes()))?;
    ck(w.write_all(&(config.len() as u64).to_le_bytes()))?;
    ck(w.write_all(&config))?;
    let specs = model.tensor_specs();
    ck(w.write_all(&(specs.len() as u64).to_le_bytes()))?;
    for spec in specs {
        ck(w.write_all(&(spec.name.len() as u32).to_le_bytes()))?;
        ck(w.write_all(spec.name.as_bytes()))?;
        ck(w.write_all(&(spec.shape.len() as u32).to_le_bytes()))?;
        for &dim in &spec.shape {
            ck(w.write_all(&(dim as u64).to_le_bytes()))?;
        }
        for &x in &model.params()[spec.offset..spec.offset + spec.numel()] {
            ck(w.write_all(&x.to_le_bytes()))?;
        }
    }
    ck(w.flush())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    ck(r.read_exact(&mut b))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    ck(r.read_exact(&mut b))?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R, len: u64, what: &str) -> Result<Vec<u8>> {
    if len > 1 << 20 {
        return Err(Error::Checkpoint(format!("{what} length {len} is implausible")));
    }
    let mut buf = vec![0u8; len as usize];
    ck(r.read_exact(&mut buf))?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ToyModel> {
    let mut magic = [0u8; 8];
    ck(r.read_exact(&mut magic))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config_len = read_u64(&mut r)?;
    let config: ToyModelConfig = serde_json::from_slice(&read_bytes(&mut r, config_len, "config")?)?;
    let template = ToyModel::new(config.clone())?;
    let n_tensors = read_u64(&mut r)? as usize;
    if n_tensors != template.tensor_specs().len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {n_tensors}",
            template.tensor_specs().len()
        )));
    }
    let mut params = vec![0.0; template.n_params()];
    for spec in template.tensor_specs() {
        let name_len = read_u32(&mut r)? as u64;
        let name = String::from_utf8(read_bytes(&mut r, name_len, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if name != spec.name {
            return Err(Error::Checkpoint(format!("expected tensor {}, found {name}", spec.name)));
        }
        let ndim = read_u32(&mut r)? as usize;
        let dims = (0..ndim)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != spec.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {dims:?}, expected {:?}",
                spec.shape
            )));
        }
        let mut b = [0u8; 8];
        for slot in &mut params[spec.offset..spec.offset + spec.numel()] {
            ck(r.read_exact(&mut b))?;
            *slot = f64::from_le_bytes(b);
        }
    }
    let mut trailing = [0u8; 1];
    if ck(r.read(&mut trailing))? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    ToyModel::from_parts(config, params)
}

pub fn save_checkpoint(model: &ToyModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    write_checkpoint(model, BufWriter::new(file))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ToyModel> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    read_checkpoint(BufReader::new(file))
}
